//! Per-channel data plane: listener, sessions, dispatcher and relay.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{IpAddr, Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::{Mutex, RwLock};

use super::frame::{self, Frame, FrameType, Header, HEADER_LEN};
use super::{ChannelState, ChannelTemplate, Counters, DsnError, Message};
use crate::auth::{Claims, Scope, TokenAuthority};
use crate::clock::SharedClock;
use crate::profiles::StreamMode;

const WRITE_TIMEOUT: Duration = Duration::from_secs(5);
const IO_BUF: usize = 64 * 1024;
const STATS_HORIZON_SECS: u64 = 3600;

/// Checks the first frame of an L7 connection: it must be AUTH carrying a
/// live token for the owning project (or an admin token) with a streams or
/// jobs scope.
pub fn authenticate_session(first: &Frame, owner: &str, authority: &TokenAuthority, now: u64) -> Result<Claims, DsnError> {
    if first.kind != FrameType::Auth {
        return Err(DsnError::AuthRequired("first frame must be AUTH".into()));
    }
    let token = std::str::from_utf8(&first.payload).map_err(|_| DsnError::AuthRequired("token is not UTF-8".into()))?;
    let claims = authority.validate_token(token.trim(), now).map_err(|e| DsnError::AuthRequired(e.code().into()))?;
    if claims.project != owner && !claims.is_admin() {
        return Err(DsnError::AuthRequired(format!("token is for project {}", claims.project)));
    }
    let scoped = claims.is_admin()
        || [Scope::StreamsRead, Scope::StreamsProvision, Scope::JobsSubmit, Scope::JobsRead, Scope::JobsCancel]
            .into_iter()
            .any(|s| claims.has_scope(s));
    if !scoped {
        return Err(DsnError::AuthRequired("token lacks a streams or jobs scope".into()));
    }
    Ok(claims)
}

#[derive(Debug, Default)]
struct AtomicCounters {
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
    messages: AtomicU64,
    drops: AtomicU64,
    dropped_bytes: AtomicU64,
    rejected: AtomicU64,
}

type SharedWriter = Arc<Mutex<BufWriter<TcpStream>>>;

struct Subscriber {
    session: u64,
    writer: SharedWriter,
}

struct Session {
    socket: TcpStream,
    writer: Option<SharedWriter>,
    peer: Option<TcpStream>,
}

pub(crate) struct ChannelRuntime {
    pub id: u32,
    pub owner: String,
    pub template: ChannelTemplate,
    pub internal_target: String,
    pub local_addr: SocketAddr,
    state: Mutex<ChannelState>,
    counters: AtomicCounters,
    pub buffer: super::ChannelBuffer,
    subscribers: RwLock<HashMap<String, Vec<Subscriber>>>,
    sessions: Mutex<HashMap<u64, Session>>,
    next_session: AtomicU64,
    stats: Mutex<VecDeque<(u64, u64, u64)>>,
    closed: AtomicBool,
    frozen: Mutex<Option<Counters>>,
    workers: Mutex<Vec<JoinHandle<()>>>,
    threads: Mutex<Vec<JoinHandle<()>>>,
    authority: Arc<TokenAuthority>,
    clock: SharedClock,
}

impl std::fmt::Debug for ChannelRuntime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChannelRuntime").field("id", &self.id).field("addr", &self.local_addr).finish_non_exhaustive()
    }
}

impl ChannelRuntime {
    pub fn start(
        id: u32,
        owner: String,
        template: ChannelTemplate,
        internal_target: String,
        bind_ip: IpAddr,
        authority: Arc<TokenAuthority>,
        clock: SharedClock,
    ) -> Result<Arc<Self>, DsnError> {
        let listener = TcpListener::bind((bind_ip, 0))?;
        let local_addr = listener.local_addr()?;
        let rt = Arc::new(ChannelRuntime {
            id,
            owner,
            buffer: super::ChannelBuffer::new(template.buffer_capacity_bytes, template.overflow_policy),
            template,
            internal_target,
            local_addr,
            state: Mutex::new(ChannelState::Provisioned),
            counters: AtomicCounters::default(),
            subscribers: RwLock::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            next_session: AtomicU64::new(1),
            stats: Mutex::new(VecDeque::new()),
            closed: AtomicBool::new(false),
            frozen: Mutex::new(None),
            workers: Mutex::new(Vec::new()),
            threads: Mutex::new(Vec::new()),
            authority,
            clock,
        });
        let mut threads = Vec::new();
        if rt.template.mode == StreamMode::GatewayL7 {
            let r = rt.clone();
            threads.push(spawn(format!("dsn-{id}-dispatch"), move || r.dispatch_loop())?);
        }
        let r = rt.clone();
        threads.push(spawn(format!("dsn-{id}-accept"), move || r.accept_loop(listener))?);
        rt.workers.lock().extend(threads);
        Ok(rt)
    }

    pub fn state(&self) -> ChannelState {
        *self.state.lock()
    }

    pub fn counters(&self) -> Counters {
        if let Some(c) = *self.frozen.lock() {
            return c;
        }
        let c = &self.counters;
        Counters {
            bytes_in: c.bytes_in.load(Ordering::SeqCst),
            bytes_out: c.bytes_out.load(Ordering::SeqCst),
            messages: c.messages.load(Ordering::SeqCst),
            drops: c.drops.load(Ordering::SeqCst),
            dropped_bytes: c.dropped_bytes.load(Ordering::SeqCst),
            buffered_bytes: self.buffer.buffered_frame_bytes(),
            rejected_connections: c.rejected.load(Ordering::SeqCst),
        }
    }

    /// Bytes and messages per second over the trailing `window` seconds.
    pub fn throughput(&self, window: u64) -> (f64, f64) {
        let window = window.max(1);
        let now = self.clock.now_secs();
        let (mut bytes, mut msgs) = (0u64, 0u64);
        for &(sec, b, m) in self.stats.lock().iter() {
            if sec <= now && sec + window > now {
                bytes += b;
                msgs += m;
            }
        }
        (bytes as f64 / window as f64, msgs as f64 / window as f64)
    }

    fn record(&self, bytes: u64, msgs: u64) {
        let now = self.clock.now_secs();
        let mut stats = self.stats.lock();
        match stats.back_mut() {
            Some(last) if last.0 == now => {
                last.1 += bytes;
                last.2 += msgs;
            }
            _ => stats.push_back((now, bytes, msgs)),
        }
        while stats.front().is_some_and(|f| f.0 + STATS_HORIZON_SECS < now) {
            stats.pop_front();
        }
    }

    fn mark_active(&self) {
        let mut s = self.state.lock();
        if *s == ChannelState::Provisioned {
            *s = ChannelState::Active;
        }
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        for conn in listener.incoming() {
            if self.closed.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let rt = self.clone();
            let name = format!("dsn-{}-session", self.id);
            let handle = match self.template.mode {
                StreamMode::GatewayL7 => spawn(name, move || rt.l7_session(stream)),
                StreamMode::RouterL4 => spawn(name, move || rt.l4_session(stream)),
            };
            if let Ok(h) = handle {
                let mut threads = self.threads.lock();
                threads.retain(|t| !t.is_finished());
                threads.push(h);
            }
        }
    }

    fn register(&self, session: Session) -> Option<u64> {
        let id = self.next_session.fetch_add(1, Ordering::SeqCst);
        let mut sessions = self.sessions.lock();
        // Checked under the lock so teardown cannot miss a session.
        if self.closed.load(Ordering::SeqCst) {
            let _ = session.socket.shutdown(Shutdown::Both);
            return None;
        }
        sessions.insert(id, session);
        Some(id)
    }

    fn unregister(&self, id: u64) {
        self.sessions.lock().remove(&id);
        let mut subs = self.subscribers.write();
        for list in subs.values_mut() {
            list.retain(|s| s.session != id);
        }
    }

    fn l7_session(self: Arc<Self>, stream: TcpStream) {
        let _ = stream.set_nodelay(true);
        let _ = stream.set_write_timeout(Some(WRITE_TIMEOUT));
        let (Ok(read_half), Ok(write_half), Ok(control)) = (stream.try_clone(), stream.try_clone(), stream.try_clone()) else {
            return;
        };
        let writer: SharedWriter = Arc::new(Mutex::new(BufWriter::with_capacity(IO_BUF, write_half)));
        let Some(sid) = self.register(Session { socket: control, writer: Some(writer.clone()), peer: None }) else {
            return;
        };
        let mut reader = BufReader::with_capacity(IO_BUF, read_half);
        let limit = (self.template.max_message_bytes + 2 + u16::MAX as u64).min(frame::MAX_PAYLOAD as u64) as u32;
        let send = |kind: FrameType, payload: Vec<u8>| {
            let mut w = writer.lock();
            Frame::new(kind, self.id, payload).write_to(&mut *w).and_then(|_| w.flush())
        };

        let first = match frame::read_raw(&mut reader, limit) {
            Ok(Some(raw)) => Frame::decode(&raw).map(|(f, _)| f).map_err(DsnError::from),
            Ok(None) => {
                self.unregister(sid);
                return;
            }
            Err(e) => Err(e.into()),
        };
        let authed = first.and_then(|f| authenticate_session(&f, &self.owner, &self.authority, self.clock.now_secs()));
        if let Err(e) = authed {
            log::info!("channel {}: session rejected: {e}", self.id);
            let _ = send(FrameType::Err, e.to_wire());
            let _ = stream.shutdown(Shutdown::Both);
            self.unregister(sid);
            return;
        }
        self.mark_active();
        if send(FrameType::Ack, Vec::new()).is_err() {
            self.unregister(sid);
            return;
        }

        loop {
            let raw = match frame::read_raw(&mut reader, limit) {
                Ok(Some(raw)) => raw,
                Ok(None) => break,
                Err(frame::FrameError::Io(_)) => break,
                Err(e) => {
                    let _ = send(FrameType::Err, DsnError::from(e).to_wire());
                    break;
                }
            };
            let header: &[u8; HEADER_LEN] = raw[..HEADER_LEN].try_into().expect("header length");
            let h = Header::parse(header, frame::MAX_PAYLOAD).expect("validated by read_raw");
            if h.channel_id != self.id {
                let _ = send(FrameType::Err, DsnError::MalformedFrame(format!("frame for channel {}", h.channel_id)).to_wire());
                break;
            }
            match h.kind {
                FrameType::Data => {
                    let (topic, body) = frame::parse_data(&raw[HEADER_LEN..]).expect("validated by read_raw");
                    let size = body.len() as u64;
                    if size > self.template.max_message_bytes {
                        let e = DsnError::MessageTooLarge { size, limit: self.template.max_message_bytes };
                        if send(FrameType::Err, e.to_wire()).is_err() {
                            break;
                        }
                        continue;
                    }
                    let topic = topic.to_string();
                    let len = raw.len() as u64;
                    self.counters.bytes_in.fetch_add(len, Ordering::SeqCst);
                    self.counters.messages.fetch_add(1, Ordering::SeqCst);
                    self.record(len, 1);
                    if self.buffer.push(Message { topic, frame: raw, size }) == super::Admission::Dropped {
                        self.counters.drops.fetch_add(1, Ordering::SeqCst);
                        self.counters.dropped_bytes.fetch_add(len, Ordering::SeqCst);
                    }
                }
                FrameType::Sub => {
                    let Ok(topic) = std::str::from_utf8(&raw[HEADER_LEN..]) else {
                        let _ = send(FrameType::Err, DsnError::MalformedFrame("topic is not UTF-8".into()).to_wire());
                        break;
                    };
                    self.subscribers
                        .write()
                        .entry(topic.to_string())
                        .or_default()
                        .push(Subscriber { session: sid, writer: writer.clone() });
                    if send(FrameType::Ack, topic.as_bytes().to_vec()).is_err() {
                        break;
                    }
                }
                FrameType::Close => break,
                other => {
                    let _ = send(FrameType::Err, DsnError::MalformedFrame(format!("unexpected {other:?} frame")).to_wire());
                    break;
                }
            }
        }
        self.unregister(sid);
        let _ = stream.shutdown(Shutdown::Both);
    }

    fn dispatch_loop(self: Arc<Self>) {
        let mut batch = Vec::with_capacity(256);
        let mut touched: Vec<SharedWriter> = Vec::new();
        let mut dead: HashSet<u64> = HashSet::new();
        while self.buffer.pop_batch(256, &mut batch) {
            {
                let subs = self.subscribers.read();
                for m in batch.drain(..) {
                    let len = m.frame.len() as u64;
                    let targets = subs.get(&m.topic).map(|v| v.as_slice()).unwrap_or(&[]);
                    let mut delivered = false;
                    for s in targets {
                        if dead.contains(&s.session) {
                            continue;
                        }
                        if s.writer.lock().write_all(&m.frame).is_ok() {
                            delivered = true;
                            if !touched.iter().any(|w| Arc::ptr_eq(w, &s.writer)) {
                                touched.push(s.writer.clone());
                            }
                        } else {
                            dead.insert(s.session);
                        }
                    }
                    if delivered {
                        self.counters.bytes_out.fetch_add(len, Ordering::SeqCst);
                    } else {
                        self.counters.drops.fetch_add(1, Ordering::SeqCst);
                        self.counters.dropped_bytes.fetch_add(len, Ordering::SeqCst);
                    }
                }
            }
            for w in touched.drain(..) {
                let _ = w.lock().flush();
            }
            if !dead.is_empty() {
                let mut subs = self.subscribers.write();
                for list in subs.values_mut() {
                    list.retain(|s| !dead.contains(&s.session));
                }
                dead.clear();
            }
        }
    }

    fn l4_session(self: Arc<Self>, client: TcpStream) {
        let peer = client.peer_addr().map(|a| a.ip()).unwrap_or(IpAddr::V4(Ipv4Addr::UNSPECIFIED));
        if !self.template.admits_peer(peer) {
            self.counters.rejected.fetch_add(1, Ordering::SeqCst);
            log::info!("channel {}: {}", self.id, DsnError::CidrRejected(peer.to_string()));
            let _ = client.shutdown(Shutdown::Both);
            return;
        }
        let target = match connect_target(&self.internal_target) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("channel {}: cannot reach {}: {e}", self.id, self.internal_target);
                let _ = client.shutdown(Shutdown::Both);
                return;
            }
        };
        let _ = client.set_nodelay(true);
        let _ = target.set_nodelay(true);
        let (Ok(c2), Ok(t2), Ok(cc), Ok(tc)) = (client.try_clone(), target.try_clone(), client.try_clone(), target.try_clone()) else {
            return;
        };
        let Some(sid) = self.register(Session { socket: cc, writer: None, peer: Some(tc) }) else {
            let _ = target.shutdown(Shutdown::Both);
            return;
        };
        self.mark_active();
        let rt = self.clone();
        let back = spawn(format!("dsn-{}-relay", self.id), move || rt.pump(t2, c2));
        self.pump(client, target);
        if let Ok(h) = back {
            let _ = h.join();
        }
        self.unregister(sid);
    }

    fn pump(&self, mut from: TcpStream, mut to: TcpStream) {
        let mut buf = vec![0u8; IO_BUF];
        loop {
            let n = match from.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n as u64,
            };
            self.counters.bytes_in.fetch_add(n, Ordering::SeqCst);
            self.record(n, 0);
            if to.write_all(&buf[..n as usize]).is_err() {
                self.counters.dropped_bytes.fetch_add(n, Ordering::SeqCst);
                break;
            }
            self.counters.bytes_out.fetch_add(n, Ordering::SeqCst);
        }
        let _ = to.shutdown(Shutdown::Write);
    }

    /// Stops the channel: queued messages are flushed to subscribers, live
    /// sessions get CLOSE, sockets close and the counters freeze.
    pub fn teardown(&self) -> Counters {
        if self.closed.swap(true, Ordering::SeqCst) {
            return self.counters();
        }
        self.buffer.close();
        // Wake the acceptor so it notices the flag.
        let mut wake = self.local_addr;
        if wake.ip().is_unspecified() {
            wake.set_ip(IpAddr::V4(Ipv4Addr::LOCALHOST));
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));

        // The dispatcher drains what is buffered before sessions are told
        // to close.
        let workers: Vec<JoinHandle<()>> = self.workers.lock().drain(..).collect();
        for h in workers {
            let _ = h.join();
        }

        let sessions: Vec<Session> = self.sessions.lock().drain().map(|(_, s)| s).collect();
        for s in &sessions {
            if let Some(w) = &s.writer {
                let mut w = w.lock();
                let _ = Frame::new(FrameType::Close, self.id, Vec::new()).write_to(&mut *w).and_then(|_| w.flush());
            }
            let _ = s.socket.shutdown(Shutdown::Both);
            if let Some(p) = &s.peer {
                let _ = p.shutdown(Shutdown::Both);
            }
        }
        let rest: Vec<JoinHandle<()>> = self.threads.lock().drain(..).collect();
        for h in rest {
            let _ = h.join();
        }
        *self.state.lock() = ChannelState::Closed;
        let c = self.counters();
        *self.frozen.lock() = Some(c);
        c
    }
}

fn spawn(name: String, f: impl FnOnce() + Send + 'static) -> Result<JoinHandle<()>, DsnError> {
    thread::Builder::new().name(name).spawn(f).map_err(DsnError::from)
}

fn connect_target(target: &str) -> std::io::Result<TcpStream> {
    let mut last = std::io::Error::new(std::io::ErrorKind::NotFound, "no address");
    for addr in target.to_socket_addrs()? {
        match TcpStream::connect_timeout(&addr, Duration::from_secs(5)) {
            Ok(s) => return Ok(s),
            Err(e) => last = e,
        }
    }
    Err(last)
}
