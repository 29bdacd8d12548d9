use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Checksum, FacilityError, GatewayApi};
use crate::dsn::{Delivery, DsnError, StreamChannel, StreamClient};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerConfig {
    pub token: String,
    pub channel_id: u32,
    pub topic: String,
    pub expected_count: u64,
    /// Give up after this long without a message.
    #[serde(default = "default_idle")]
    pub idle_timeout_seconds: u64,
}

fn default_idle() -> u64 {
    30
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerSummary {
    pub channel_id: u32,
    pub expected: u64,
    pub received: u64,
    pub bytes: u64,
    pub checksum: String,
    /// The stream ended before `expected` messages arrived.
    pub closed_early: bool,
}

impl ConsumerSummary {
    /// Process exit code: 0 when complete, 2 when the stream ended short.
    pub fn exit_code(&self) -> i32 {
        if self.received < self.expected {
            2
        } else {
            0
        }
    }
}

/// A subscribed consumer. Splitting connect from [`run`](Self::run) lets a
/// caller subscribe before any producer starts.
#[derive(Debug)]
pub struct Consumer {
    cfg: ConsumerConfig,
    client: StreamClient,
}

impl Consumer {
    pub fn connect(api: &dyn GatewayApi, cfg: &ConsumerConfig) -> Result<Self, FacilityError> {
        let v = api.call("GET", &format!("/v1/streams/{}", cfg.channel_id), &cfg.token, None)?;
        let ch: StreamChannel =
            serde_json::from_value(v).map_err(|e| FacilityError::Config(format!("unexpected channel body: {e}")))?;
        let mut client = StreamClient::connect(ch.data_addr(), ch.channel_id, &cfg.token)?;
        client.set_read_timeout(Some(Duration::from_secs(cfg.idle_timeout_seconds.max(1))))?;
        client.subscribe(&cfg.topic)?;
        Ok(Consumer { cfg: cfg.clone(), client })
    }

    /// Receives until `expected_count` messages, a CLOSE, or the idle timeout.
    pub fn run(mut self) -> Result<ConsumerSummary, FacilityError> {
        let mut sum = Checksum::default();
        let (mut received, mut bytes) = (0u64, 0u64);
        let mut closed_early = false;
        while received < self.cfg.expected_count {
            match self.client.recv() {
                Ok(Delivery::Data { topic, body }) if topic == self.cfg.topic => {
                    sum.update(&body);
                    received += 1;
                    bytes += body.len() as u64;
                }
                Ok(Delivery::Data { .. }) => {}
                Ok(Delivery::Closed | Delivery::Disconnected) | Err(DsnError::Io(_)) => {
                    closed_early = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        if !closed_early {
            let _ = self.client.close();
        }
        Ok(ConsumerSummary {
            channel_id: self.cfg.channel_id,
            expected: self.cfg.expected_count,
            received,
            bytes,
            checksum: sum.hex(),
            closed_early,
        })
    }
}

pub fn run_consumer(api: &dyn GatewayApi, cfg: &ConsumerConfig) -> Result<ConsumerSummary, FacilityError> {
    Consumer::connect(api, cfg)?.run()
}
