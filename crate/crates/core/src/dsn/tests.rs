use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use super::frame::{data_overhead, Frame, FrameType};
use super::*;
use crate::auth::{IssueRequest, TokenAuthority, TokenLimits};
use crate::clock::{Clock, SimClock};
use crate::profiles::{EnclaveLevel, StreamMode};

struct Fixture {
    auth: Arc<TokenAuthority>,
    clock: SimClock,
    dsn: DsnService,
}

impl Fixture {
    fn new() -> Self {
        let auth = Arc::new(TokenAuthority::new(
            b"dsn-secret",
            TokenLimits { max_ttl_seconds: 86_400, max_delegation_depth: 3, mfa_required: false },
        ));
        let clock = SimClock::at_secs(1_000);
        let dsn = DsnService::new(DsnConfig::default(), auth.clone(), Arc::new(clock.clone()));
        dsn.install_template(template("l7", StreamMode::GatewayL7, "127.0.0.0/8", OverflowPolicy::Block)).unwrap();
        Fixture { auth, clock, dsn }
    }

    fn token(&self, project: &str, scopes: &[&str]) -> String {
        self.auth
            .issue_token(
                &IssueRequest {
                    subject: "alice".into(),
                    project: project.into(),
                    scopes: scopes.iter().map(|s| s.to_string()).collect(),
                    ttl_seconds: 3600,
                    mfa: false,
                    max_enclave: EnclaveLevel::Development,
                },
                self.clock.now_secs(),
            )
            .unwrap()
    }

    fn claims(&self, project: &str, scopes: &[&str]) -> crate::auth::Claims {
        self.auth.validate_token(&self.token(project, scopes), self.clock.now_secs()).unwrap()
    }

    fn provision(&self, template_id: &str, target: &str) -> StreamChannel {
        let req = ProvisionRequest { template_id: template_id.into(), internal_target: target.into(), buffer_capacity_bytes: None };
        self.dsn.provision_channel(&req, &self.claims("lcls", &["streams.provision"])).unwrap()
    }
}

fn wait_messages(dsn: &DsnService, id: u32, n: u64) {
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    while dsn.counters(id).unwrap().messages < n {
        assert!(std::time::Instant::now() < deadline, "timed out waiting for {n} messages");
        thread::sleep(Duration::from_millis(2));
    }
    assert!(dsn.wait_drained(id, Duration::from_secs(5)).unwrap());
}

fn template(id: &str, mode: StreamMode, cidr: &str, policy: OverflowPolicy) -> ChannelTemplate {
    ChannelTemplate {
        template_id: id.into(),
        mode,
        allowed_external_cidrs: vec![cidr.parse().unwrap()],
        allowed_internal_targets: vec!["analysis:9000".into()],
        buffer_capacity_bytes: 1 << 20,
        overflow_policy: policy,
        max_message_bytes: 4096,
    }
}

#[test]
fn provisioning_examples() {
    let f = Fixture::new();
    let c = f.provision("l7", "analysis:9000");
    assert_eq!(c.state, ChannelState::Provisioned);
    assert_eq!(c.counters, Counters::default());
    assert_ne!(c.data_port, 0);

    let owner = f.claims("lcls", &["streams.provision"]);
    let req = |target: &str, buf: Option<u64>| ProvisionRequest {
        template_id: "l7".into(),
        internal_target: target.into(),
        buffer_capacity_bytes: buf,
    };
    assert_eq!(f.dsn.provision_channel(&req("elsewhere:1", None), &owner).unwrap_err().code(), "TARGET_NOT_ALLOWED");
    assert_eq!(
        f.dsn.provision_channel(&req("analysis:9000", Some(2 << 20)), &owner).unwrap_err().code(),
        "BUFFER_EXCEEDS_TEMPLATE"
    );
    let mut bad = req("analysis:9000", None);
    bad.template_id = "nope".into();
    assert_eq!(f.dsn.provision_channel(&bad, &owner).unwrap_err().code(), "UNKNOWN_TEMPLATE");
    let reader = f.claims("lcls", &["streams.read"]);
    assert_eq!(f.dsn.provision_channel(&req("analysis:9000", None), &reader).unwrap_err().code(), "FORBIDDEN");

    f.dsn.set_allowed_modes(vec![StreamMode::RouterL4]);
    assert_eq!(f.dsn.provision_channel(&req("analysis:9000", None), &owner).unwrap_err().code(), "MODE_NOT_ALLOWED");

    assert_eq!(
        f.dsn.add_template(template("x", StreamMode::GatewayL7, "10.0.0.0/8", OverflowPolicy::Block), &owner).unwrap_err().code(),
        "FORBIDDEN"
    );
    let other = f.claims("other", &["streams.read"]);
    assert_eq!(f.dsn.channel(c.channel_id, &other).unwrap_err().code(), "FORBIDDEN");
}

#[test]
fn fifo_and_fan_out() {
    let f = Fixture::new();
    let c = f.provision("l7", "analysis:9000");
    let tok = f.token("lcls", &["streams.read"]);
    let mut sub1 = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    let mut sub2 = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    sub1.subscribe("det0").unwrap();
    sub2.subscribe("det0").unwrap();
    let mut prod = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    for i in 0..50u32 {
        prod.publish("det0", &i.to_be_bytes()).unwrap();
        prod.publish("other", b"x").unwrap();
    }
    prod.flush().unwrap();
    for sub in [&mut sub1, &mut sub2] {
        for i in 0..50u32 {
            assert_eq!(sub.recv().unwrap(), Delivery::Data { topic: "det0".into(), body: i.to_be_bytes().to_vec() });
        }
    }
    assert!(f.dsn.wait_drained(c.channel_id, Duration::from_secs(5)).unwrap());
    let n = f.dsn.counters(c.channel_id).unwrap();
    assert_eq!(n.messages, 100);
    // Nobody listens on "other".
    assert_eq!(n.drops, 50);
    assert_eq!(n.bytes_in, n.bytes_out + n.buffered_bytes + n.dropped_bytes);
    assert_eq!(f.dsn.channel(c.channel_id, &f.claims("lcls", &["streams.read"])).unwrap().state, ChannelState::Active);
}

#[test]
fn message_size_boundary() {
    let f = Fixture::new();
    let c = f.provision("l7", "analysis:9000");
    let tok = f.token("lcls", &["streams.read"]);
    let mut sub = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    sub.subscribe("t").unwrap();
    let mut prod = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    prod.publish("t", &vec![1u8; 4097]).unwrap();
    prod.publish("t", &vec![2u8; 4096]).unwrap();
    prod.flush().unwrap();
    match prod.recv() {
        Err(e) => assert_eq!(e.code(), "MESSAGE_TOO_LARGE"),
        other => panic!("expected error, got {other:?}"),
    }
    match sub.recv().unwrap() {
        Delivery::Data { body, .. } => assert_eq!(body, vec![2u8; 4096]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn l7_requires_auth_first() {
    let f = Fixture::new();
    let c = f.provision("l7", "analysis:9000");
    let mut s = TcpStream::connect(c.data_addr()).unwrap();
    s.write_all(&Frame::data(c.channel_id, "t", b"sneaky").encode()).unwrap();
    let reply = Frame::read_from(&mut s, 1 << 20).unwrap().unwrap();
    assert_eq!(reply.kind, FrameType::Err);
    assert_eq!(DsnError::from_wire(&reply.payload).code(), "AUTH_REQUIRED");
    assert_eq!(Frame::read_from(&mut s, 1 << 20).unwrap(), None);

    // A valid token for another project is refused too.
    let err = StreamClient::connect(c.data_addr(), c.channel_id, &f.token("other", &["streams.read"])).unwrap_err();
    assert_eq!(err.code(), "AUTH_REQUIRED");
    let err = StreamClient::connect(c.data_addr(), c.channel_id, &f.token("lcls", &["status.read"])).unwrap_err();
    assert_eq!(err.code(), "AUTH_REQUIRED");
    let err = StreamClient::connect(c.data_addr(), c.channel_id, "garbage").unwrap_err();
    assert_eq!(err.code(), "AUTH_REQUIRED");
    // jobs-scoped tokens are accepted.
    StreamClient::connect(c.data_addr(), c.channel_id, &f.token("lcls", &["jobs.submit"])).unwrap();
}

#[test]
fn garbage_gets_err_frame() {
    let f = Fixture::new();
    let c = f.provision("l7", "analysis:9000");
    let mut s = TcpStream::connect(c.data_addr()).unwrap();
    s.write_all(b"GET / HTTP/1.1\r\n\r\n").unwrap();
    let reply = Frame::read_from(&mut s, 1 << 20).unwrap().unwrap();
    assert_eq!(reply.kind, FrameType::Err);
}

#[test]
fn teardown_counters() {
    let f = Fixture::new();
    let owner = f.claims("lcls", &["streams.provision"]);
    let idle = f.provision("l7", "analysis:9000");
    assert_eq!(f.dsn.teardown_channel(idle.channel_id, &owner).unwrap(), Counters::default());
    assert_eq!(f.dsn.teardown_channel(idle.channel_id, &owner).unwrap_err().code(), "UNKNOWN_CHANNEL");

    let c = f.provision("l7", "analysis:9000");
    let tok = f.token("lcls", &["streams.read"]);
    let mut sub = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    sub.subscribe("det0").unwrap();
    let mut prod = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    for _ in 0..3 {
        prod.publish("det0", &[7u8; 100]).unwrap();
    }
    prod.flush().unwrap();
    for _ in 0..3 {
        assert!(matches!(sub.recv().unwrap(), Delivery::Data { .. }));
    }
    assert!(f.dsn.wait_drained(c.channel_id, Duration::from_secs(5)).unwrap());
    let other = f.claims("other", &["streams.provision"]);
    assert_eq!(f.dsn.teardown_channel(c.channel_id, &other).unwrap_err().code(), "FORBIDDEN");
    let n = f.dsn.teardown_channel(c.channel_id, &owner).unwrap();
    // Oracle: 13-byte header + 2-byte topic length + "det0" + body.
    let per = (13 + 2 + 4 + 100) as u64;
    assert_eq!(per, (data_overhead("det0") + 100) as u64);
    assert_eq!(n.messages, 3);
    assert_eq!(n.bytes_in, 3 * per);
    assert_eq!(n.bytes_out, 3 * per);
    assert_eq!(sub.recv().unwrap(), Delivery::Closed);
}

#[test]
fn throughput_window() {
    let f = Fixture::new();
    let c = f.provision("l7", "analysis:9000");
    let zero = f.dsn.throughput_stats(c.channel_id, 1).unwrap();
    assert_eq!((zero.bytes_per_second, zero.messages_per_second), (0.0, 0.0));
    let tok = f.token("lcls", &["streams.read"]);
    let mut prod = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    for _ in 0..10 {
        prod.publish("t", &[0u8; 1000]).unwrap();
    }
    prod.flush().unwrap();
    wait_messages(&f.dsn, c.channel_id, 10);
    let t = f.dsn.throughput_stats(c.channel_id, 1).unwrap();
    assert_eq!(t.messages_per_second, 10.0);
    assert_eq!(t.bytes_per_second, 10.0 * (data_overhead("t") + 1000) as f64);
    let before = f.dsn.counters(c.channel_id).unwrap();
    f.clock.advance_secs(5);
    assert_eq!(f.dsn.throughput_stats(c.channel_id, 1).unwrap().messages_per_second, 0.0);
    assert_eq!(f.dsn.throughput_stats(c.channel_id, 10).unwrap().messages_per_second, 1.0);
    let after = f.dsn.counters(c.channel_id).unwrap();
    assert!(after.bytes_in >= before.bytes_in && after.messages >= before.messages);
}

#[test]
fn drop_newest_counts_drops() {
    let f = Fixture::new();
    let mut t = template("lossy", StreamMode::GatewayL7, "127.0.0.0/8", OverflowPolicy::DropNewest);
    t.buffer_capacity_bytes = 4096;
    f.dsn.install_template(t).unwrap();
    let c = f.provision("lossy", "analysis:9000");
    let tok = f.token("lcls", &["streams.read"]);
    let mut prod = StreamClient::connect(c.data_addr(), c.channel_id, &tok).unwrap();
    for _ in 0..200 {
        prod.publish("nobody", &[0u8; 4000]).unwrap();
    }
    prod.flush().unwrap();
    wait_messages(&f.dsn, c.channel_id, 200);
    let n = f.dsn.counters(c.channel_id).unwrap();
    assert_eq!(n.messages, 200);
    assert_eq!(n.drops, 200);
    assert_eq!(n.bytes_in, n.bytes_out + n.buffered_bytes + n.dropped_bytes);
}

fn sink() -> (String, thread::JoinHandle<Vec<u8>>) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    let h = thread::spawn(move || {
        let (mut s, _) = l.accept().unwrap();
        let mut out = Vec::new();
        s.read_to_end(&mut out).unwrap();
        out
    });
    (addr, h)
}

#[test]
fn l4_relay_forwards_bytes() {
    let f = Fixture::new();
    let (target, received) = sink();
    let mut t = template("l4", StreamMode::RouterL4, "127.0.0.0/8", OverflowPolicy::Block);
    t.allowed_internal_targets = vec![target.clone()];
    f.dsn.install_template(t).unwrap();
    let c = f.provision("l4", &target);
    let mut s = TcpStream::connect(c.data_addr()).unwrap();
    let payload: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
    s.write_all(&payload).unwrap();
    drop(s);
    assert_eq!(received.join().unwrap(), payload);
    let owner = f.claims("lcls", &["streams.provision"]);
    thread::sleep(Duration::from_millis(50));
    let n = f.dsn.teardown_channel(c.channel_id, &owner).unwrap();
    assert_eq!(n.bytes_in, 100_000);
    assert_eq!(n.bytes_out, 100_000);
}

#[test]
fn l4_rejects_outside_cidr() {
    let f = Fixture::new();
    let (target, _received) = sink();
    let mut t = template("l4", StreamMode::RouterL4, "10.0.0.0/24", OverflowPolicy::Block);
    t.allowed_internal_targets = vec![target.clone()];
    f.dsn.install_template(t).unwrap();
    let c = f.provision("l4", &target);
    let mut s = TcpStream::connect(c.data_addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let mut buf = [0u8; 1];
    // The relay hangs up without forwarding anything.
    assert!(matches!(s.read(&mut buf), Ok(0) | Err(_)));
    assert_eq!(f.dsn.counters(c.channel_id).unwrap().rejected_connections, 1);
    let owner = f.claims("lcls", &["streams.provision"]);
    f.dsn.teardown_channel(c.channel_id, &owner).unwrap();
}
