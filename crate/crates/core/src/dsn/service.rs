use std::collections::BTreeMap;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use super::data::ChannelRuntime;
use super::{ChannelTemplate, DsnError, OverflowPolicy};
use crate::auth::{Claims, Scope, TokenAuthority};
use crate::clock::SharedClock;
use crate::profiles::StreamMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelState {
    Provisioned,
    Active,
    Closed,
}

/// Monotonic channel counters. Byte counts are whole DATA frames for the
/// gateway mode and raw relayed bytes for the router mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub messages: u64,
    pub drops: u64,
    pub dropped_bytes: u64,
    pub buffered_bytes: u64,
    pub rejected_connections: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub bytes_per_second: f64,
    pub messages_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisionRequest {
    pub template_id: String,
    pub internal_target: String,
    #[serde(default)]
    pub buffer_capacity_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamChannel {
    pub channel_id: u32,
    pub template_id: String,
    pub owner_project: String,
    pub mode: StreamMode,
    pub state: ChannelState,
    pub internal_target: String,
    pub data_host: String,
    pub data_port: u16,
    pub buffer_capacity_bytes: u64,
    pub max_message_bytes: u64,
    pub overflow_policy: OverflowPolicy,
    pub counters: Counters,
}

impl StreamChannel {
    pub fn data_addr(&self) -> String {
        format!("{}:{}", self.data_host, self.data_port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DsnConfig {
    #[serde(default = "default_bind")]
    pub bind_ip: IpAddr,
    /// Host name handed to clients; defaults to `bind_ip`.
    #[serde(default)]
    pub advertise_host: Option<String>,
}

fn default_bind() -> IpAddr {
    IpAddr::V4(Ipv4Addr::LOCALHOST)
}

impl Default for DsnConfig {
    fn default() -> Self {
        DsnConfig { bind_ip: default_bind(), advertise_host: None }
    }
}

struct Inner {
    config: DsnConfig,
    authority: Arc<TokenAuthority>,
    clock: SharedClock,
    templates: RwLock<BTreeMap<String, ChannelTemplate>>,
    allowed_modes: RwLock<Vec<StreamMode>>,
    channels: RwLock<BTreeMap<u32, Arc<ChannelRuntime>>>,
    next_id: AtomicU32,
}

impl Drop for Inner {
    fn drop(&mut self) {
        for rt in self.channels.get_mut().values() {
            rt.teardown();
        }
    }
}

/// Control plane. Cheap to clone; all clones share one channel registry.
#[derive(Clone)]
pub struct DsnService {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for DsnService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DsnService").field("channels", &self.inner.channels.read().len()).finish_non_exhaustive()
    }
}

fn owner_or_admin(rt: &ChannelRuntime, claims: &Claims) -> Result<(), DsnError> {
    if claims.is_admin() || claims.project == rt.owner {
        Ok(())
    } else {
        Err(DsnError::Forbidden(format!("channel {} belongs to another project", rt.id)))
    }
}

impl DsnService {
    pub fn new(config: DsnConfig, authority: Arc<TokenAuthority>, clock: SharedClock) -> Self {
        DsnService {
            inner: Arc::new(Inner {
                config,
                authority,
                clock,
                templates: RwLock::new(BTreeMap::new()),
                allowed_modes: RwLock::new(vec![StreamMode::GatewayL7, StreamMode::RouterL4]),
                channels: RwLock::new(BTreeMap::new()),
                next_id: AtomicU32::new(1),
            }),
        }
    }

    /// Restricts which template modes may be provisioned from now on.
    pub fn set_allowed_modes(&self, modes: Vec<StreamMode>) {
        *self.inner.allowed_modes.write() = modes;
    }

    pub fn allowed_modes(&self) -> Vec<StreamMode> {
        self.inner.allowed_modes.read().clone()
    }

    /// Adds or replaces a template. Admin only.
    pub fn add_template(&self, template: ChannelTemplate, claims: &Claims) -> Result<(), DsnError> {
        if !claims.is_admin() {
            return Err(DsnError::Forbidden("templates need admin scope".into()));
        }
        self.install_template(template)
    }

    /// Adds a template without a caller, for startup configuration.
    pub fn install_template(&self, template: ChannelTemplate) -> Result<(), DsnError> {
        template.validate()?;
        self.inner.templates.write().insert(template.template_id.clone(), template);
        Ok(())
    }

    pub fn templates(&self) -> Vec<ChannelTemplate> {
        self.inner.templates.read().values().cloned().collect()
    }

    pub fn provision_channel(&self, req: &ProvisionRequest, claims: &Claims) -> Result<StreamChannel, DsnError> {
        if !claims.has_scope(Scope::StreamsProvision) && !claims.is_admin() {
            return Err(DsnError::Forbidden("streams.provision scope required".into()));
        }
        let mut template = self
            .inner
            .templates
            .read()
            .get(&req.template_id)
            .cloned()
            .ok_or_else(|| DsnError::UnknownTemplate(req.template_id.clone()))?;
        if !self.inner.allowed_modes.read().contains(&template.mode) {
            return Err(DsnError::ModeNotAllowed(template.mode.name().into()));
        }
        if !template.allowed_internal_targets.contains(&req.internal_target) {
            return Err(DsnError::TargetNotAllowed(req.internal_target.clone()));
        }
        if let Some(requested) = req.buffer_capacity_bytes {
            if requested > template.buffer_capacity_bytes {
                return Err(DsnError::BufferExceedsTemplate { requested, limit: template.buffer_capacity_bytes });
            }
            if requested < template.max_message_bytes {
                return Err(DsnError::InvalidRequest(format!(
                    "buffer of {requested} bytes cannot hold a {}-byte message",
                    template.max_message_bytes
                )));
            }
            template.buffer_capacity_bytes = requested;
        }
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let rt = ChannelRuntime::start(
            id,
            claims.project.clone(),
            template,
            req.internal_target.clone(),
            self.inner.config.bind_ip,
            self.inner.authority.clone(),
            self.inner.clock.clone(),
        )?;
        let info = self.describe(&rt);
        self.inner.channels.write().insert(id, rt);
        log::info!("provisioned channel {id} from template {} for {}", req.template_id, claims.project);
        Ok(info)
    }

    fn describe(&self, rt: &ChannelRuntime) -> StreamChannel {
        let host = self.inner.config.advertise_host.clone().unwrap_or_else(|| match rt.local_addr.ip() {
            ip if ip.is_unspecified() => Ipv4Addr::LOCALHOST.to_string(),
            ip => ip.to_string(),
        });
        StreamChannel {
            channel_id: rt.id,
            template_id: rt.template.template_id.clone(),
            owner_project: rt.owner.clone(),
            mode: rt.template.mode,
            state: rt.state(),
            internal_target: rt.internal_target.clone(),
            data_host: host,
            data_port: rt.local_addr.port(),
            buffer_capacity_bytes: rt.template.buffer_capacity_bytes,
            max_message_bytes: rt.template.max_message_bytes,
            overflow_policy: rt.template.overflow_policy,
            counters: rt.counters(),
        }
    }

    fn runtime(&self, id: u32) -> Result<Arc<ChannelRuntime>, DsnError> {
        self.inner.channels.read().get(&id).cloned().ok_or(DsnError::UnknownChannel(id))
    }

    pub fn channel(&self, id: u32, claims: &Claims) -> Result<StreamChannel, DsnError> {
        let rt = self.runtime(id)?;
        owner_or_admin(&rt, claims)?;
        Ok(self.describe(&rt))
    }

    /// Live channels, unfiltered. For admin views and tests.
    pub fn channels(&self) -> Vec<StreamChannel> {
        self.inner.channels.read().values().map(|rt| self.describe(rt)).collect()
    }

    pub fn data_addr(&self, id: u32) -> Result<SocketAddr, DsnError> {
        Ok(self.runtime(id)?.local_addr)
    }

    pub fn counters(&self, id: u32) -> Result<Counters, DsnError> {
        Ok(self.runtime(id)?.counters())
    }

    pub fn teardown_channel(&self, id: u32, claims: &Claims) -> Result<Counters, DsnError> {
        let rt = {
            let mut channels = self.inner.channels.write();
            let rt = channels.get(&id).cloned().ok_or(DsnError::UnknownChannel(id))?;
            owner_or_admin(&rt, claims)?;
            channels.remove(&id);
            rt
        };
        Ok(rt.teardown())
    }

    pub fn throughput_stats(&self, id: u32, window_seconds: u64) -> Result<Throughput, DsnError> {
        let (b, m) = self.runtime(id)?.throughput(window_seconds);
        Ok(Throughput { bytes_per_second: b, messages_per_second: m })
    }

    /// Blocks until the channel's buffer is empty, or `timeout` passes.
    pub fn wait_drained(&self, id: u32, timeout: std::time::Duration) -> Result<bool, DsnError> {
        let rt = self.runtime(id)?;
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let c = rt.counters();
            if rt.buffer.is_empty() && c.bytes_in == c.bytes_out + c.dropped_bytes {
                return Ok(true);
            }
            if std::time::Instant::now() >= deadline {
                return Ok(false);
            }
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
    }
}
