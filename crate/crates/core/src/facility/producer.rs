use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Checksum, FacilityError, GatewayApi, PayloadGen};
use crate::clock::Pacer;
use crate::dsn::{Counters, StreamChannel, StreamClient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProducerConfig {
    pub token: String,
    pub template_id: String,
    #[serde(default)]
    pub internal_target: String,
    /// Publish on this channel instead of provisioning a new one.
    #[serde(default)]
    pub channel_id: Option<u32>,
    pub message_bytes: u64,
    /// Messages per second.
    pub rate: f64,
    pub duration_seconds: f64,
    pub topic: String,
    #[serde(default)]
    pub seed: u64,
    /// Tear the channel down once everything is sent.
    #[serde(default)]
    pub teardown: bool,
}

impl ProducerConfig {
    pub fn message_count(&self) -> u64 {
        (self.rate * self.duration_seconds).floor() as u64
    }

    fn validate(&self) -> Result<(), FacilityError> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(FacilityError::Config("rate must be positive".into()));
        }
        if !(self.duration_seconds >= 0.0 && self.duration_seconds.is_finite()) {
            return Err(FacilityError::Config("duration must be non-negative".into()));
        }
        if self.topic.is_empty() {
            return Err(FacilityError::Config("topic is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProducerSummary {
    pub channel_id: u32,
    pub sent: u64,
    pub rejected: u64,
    pub bytes: u64,
    pub checksum: String,
    pub achieved_rate: f64,
    /// Final channel counters when the producer tore the channel down.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counters: Option<Counters>,
}

fn channel(v: serde_json::Value) -> Result<StreamChannel, FacilityError> {
    serde_json::from_value(v).map_err(|e| FacilityError::Config(format!("unexpected channel body: {e}")))
}

/// Provisions (or looks up) a channel and streams seeded payloads at the
/// configured rate, paced by `pacer`.
pub fn run_producer(api: &dyn GatewayApi, cfg: &ProducerConfig, pacer: &Pacer) -> Result<ProducerSummary, FacilityError> {
    cfg.validate()?;
    let ch = match cfg.channel_id {
        Some(id) => channel(api.call("GET", &format!("/v1/streams/{id}"), &cfg.token, None)?)?,
        None => {
            let body = json!({"template_id": cfg.template_id, "internal_target": cfg.internal_target});
            channel(api.call("POST", "/v1/streams", &cfg.token, Some(&body))?)?
        }
    };
    if cfg.message_bytes > ch.max_message_bytes {
        if cfg.channel_id.is_none() {
            let _ = api.call("DELETE", &format!("/v1/streams/{}", ch.channel_id), &cfg.token, None);
        }
        return Err(FacilityError::MessageTooLarge { size: cfg.message_bytes, limit: ch.max_message_bytes });
    }

    let mut client = StreamClient::connect(ch.data_addr(), ch.channel_id, &cfg.token)?;
    let mut gen = PayloadGen::new(cfg.seed);
    let mut sum = Checksum::default();
    let total = cfg.message_count();
    let start = pacer.now_millis();
    let interval_ms = 1000.0 / cfg.rate;
    let (mut sent, mut bytes) = (0u64, 0u64);
    for i in 0..total {
        pacer.wait_until(start + (i as f64 * interval_ms).round() as u64);
        let payload = gen.next_payload(cfg.message_bytes as usize);
        if client.publish(&cfg.topic, &payload).and_then(|_| client.flush()).is_err() {
            break;
        }
        sum.update(&payload);
        sent += 1;
        bytes += payload.len() as u64;
    }
    pacer.wait_until(start + (cfg.duration_seconds * 1000.0).round() as u64);
    let elapsed = (pacer.now_millis() - start) as f64 / 1000.0;
    let _ = client.close();

    let counters = if cfg.teardown {
        let v = api.call("DELETE", &format!("/v1/streams/{}", ch.channel_id), &cfg.token, None)?;
        v.get("counters").cloned().and_then(|c| serde_json::from_value(c).ok())
    } else {
        None
    };
    Ok(ProducerSummary {
        channel_id: ch.channel_id,
        sent,
        rejected: total - sent,
        bytes,
        checksum: sum.hex(),
        achieved_rate: if elapsed > 0.0 { sent as f64 / elapsed } else { sent as f64 },
        counters,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::thread;

    use super::*;
    use crate::auth::IssueRequest;
    use crate::clock::{Clock, SimClock};
    use crate::facility::{Consumer, ConsumerConfig};
    use crate::gateway::{Gateway, GatewayConfig, MemoryAuditSink};
    use crate::profiles::EnclaveLevel;

    fn gateway(clock: &SimClock) -> Arc<Gateway> {
        let cfg = GatewayConfig::from_json(
            r#"{"secret": "s", "templates": [{"template_id": "t", "mode": "gateway_l7",
                "allowed_external_cidrs": ["127.0.0.0/8"], "allowed_internal_targets": ["127.0.0.1:9"],
                "buffer_capacity_bytes": 1048576, "max_message_bytes": 4096}]}"#,
        )
        .unwrap();
        Arc::new(Gateway::from_config_with_audit(&cfg, Arc::new(clock.clone()), Arc::new(MemoryAuditSink::new())).unwrap())
    }

    fn token(gw: &Gateway, scopes: &[&str]) -> String {
        let req = IssueRequest {
            subject: "det".into(),
            project: "lcls".into(),
            scopes: scopes.iter().map(|s| s.to_string()).collect(),
            ttl_seconds: 3600,
            mfa: true,
            max_enclave: EnclaveLevel::Leadership,
        };
        gw.authority().issue_token(&req, gw.clock().now_secs()).unwrap()
    }

    fn producer(token: String, rate: f64, secs: f64, size: u64) -> ProducerConfig {
        ProducerConfig {
            token,
            template_id: "t".into(),
            internal_target: "127.0.0.1:9".into(),
            channel_id: None,
            message_bytes: size,
            rate,
            duration_seconds: secs,
            topic: "frames".into(),
            seed: 1,
            teardown: true,
        }
    }

    const FULL: &[&str] = &["streams.provision", "streams.read"];

    #[test]
    fn simulated_rate_sends_exact_count() {
        let clock = SimClock::at_secs(1_000);
        let gw = gateway(&clock);
        let s = run_producer(gw.as_ref(), &producer(token(&gw, FULL), 10.0, 2.0, 256), &Pacer::Simulated(clock.clone())).unwrap();
        assert_eq!((s.sent, s.rejected, s.bytes), (20, 0, 20 * 256));
        assert_eq!(clock.now_secs(), 1_002);
        assert!((s.achieved_rate - 10.0).abs() < 1e-9);
        assert_eq!(s.counters.unwrap().messages, 20);
    }

    #[test]
    fn provision_without_scope_is_refused() {
        let clock = SimClock::at_secs(1_000);
        let gw = gateway(&clock);
        let err = run_producer(gw.as_ref(), &producer(token(&gw, &["streams.read"]), 1.0, 1.0, 8), &Pacer::Simulated(clock))
            .unwrap_err();
        assert_eq!(err.code(), "FORBIDDEN");
    }

    #[test]
    fn oversize_messages_are_rejected_up_front() {
        let clock = SimClock::at_secs(1_000);
        let gw = gateway(&clock);
        let err = run_producer(gw.as_ref(), &producer(token(&gw, FULL), 1.0, 1.0, 4097), &Pacer::Simulated(clock)).unwrap_err();
        assert_eq!(err, FacilityError::MessageTooLarge { size: 4097, limit: 4096 });
        assert!(gw.dsn().channels().iter().all(|c| c.state == crate::dsn::ChannelState::Closed));
    }

    fn provisioned(gw: &Gateway, tok: &str) -> u32 {
        let v = gw.call("POST", "/v1/streams", tok, Some(&json!({"template_id": "t", "internal_target": "127.0.0.1:9"}))).unwrap();
        v["channel_id"].as_u64().unwrap() as u32
    }

    #[test]
    fn consumer_sees_producer_checksum() {
        let clock = SimClock::at_secs(1_000);
        let gw = gateway(&clock);
        let tok = token(&gw, FULL);
        let id = provisioned(&gw, &tok);
        let ccfg =
            ConsumerConfig { token: tok.clone(), channel_id: id, topic: "frames".into(), expected_count: 50, idle_timeout_seconds: 10 };
        let consumer = Consumer::connect(gw.as_ref(), &ccfg).unwrap();
        let h = thread::spawn(move || consumer.run());
        let mut pcfg = producer(tok, 50.0, 1.0, 1000);
        pcfg.channel_id = Some(id);
        pcfg.teardown = false;
        let p = run_producer(gw.as_ref(), &pcfg, &Pacer::Simulated(clock)).unwrap();
        let c = h.join().unwrap().unwrap();
        assert_eq!((c.received, c.bytes, c.exit_code()), (50, 50_000, 0));
        assert_eq!(c.checksum, p.checksum);
    }

    #[test]
    fn close_before_expected_exits_two() {
        let clock = SimClock::at_secs(1_000);
        let gw = gateway(&clock);
        let tok = token(&gw, FULL);
        let id = provisioned(&gw, &tok);
        let ccfg =
            ConsumerConfig { token: tok.clone(), channel_id: id, topic: "frames".into(), expected_count: 100, idle_timeout_seconds: 10 };
        let consumer = Consumer::connect(gw.as_ref(), &ccfg).unwrap();
        let h = thread::spawn(move || consumer.run());
        let mut pcfg = producer(tok.clone(), 10.0, 1.0, 64);
        pcfg.channel_id = Some(id);
        pcfg.teardown = false;
        run_producer(gw.as_ref(), &pcfg, &Pacer::Simulated(clock)).unwrap();
        assert!(gw.dsn().wait_drained(id, std::time::Duration::from_secs(10)).unwrap());
        gw.call("DELETE", &format!("/v1/streams/{id}"), &tok, None).unwrap();
        let c = h.join().unwrap().unwrap();
        assert_eq!(c.received, 10);
        assert!(c.closed_early);
        assert_eq!(c.exit_code(), 2);
    }

    #[test]
    fn other_topics_are_not_counted() {
        let clock = SimClock::at_secs(1_000);
        let gw = gateway(&clock);
        let tok = token(&gw, FULL);
        let id = provisioned(&gw, &tok);
        let ccfg =
            ConsumerConfig { token: tok.clone(), channel_id: id, topic: "other".into(), expected_count: 5, idle_timeout_seconds: 10 };
        let consumer = Consumer::connect(gw.as_ref(), &ccfg).unwrap();
        let h = thread::spawn(move || consumer.run());
        let mut pcfg = producer(tok.clone(), 5.0, 1.0, 64);
        pcfg.channel_id = Some(id);
        run_producer(gw.as_ref(), &pcfg, &Pacer::Simulated(clock)).unwrap();
        let c = h.join().unwrap().unwrap();
        assert_eq!((c.received, c.exit_code()), (0, 2));
    }
}
