//! Synthetic facility: a detector-like producer, an analysis consumer, and a
//! scenario runner that drives the whole stack on a simulated clock.

mod consumer;
mod producer;
pub mod scenario;

pub use consumer::{run_consumer, Consumer, ConsumerConfig, ConsumerSummary};
pub use producer::{run_producer, ProducerConfig, ProducerSummary};
pub use scenario::{load_scenario, run_scenario, Scenario, ScenarioReport, LCLSTREAM_SMALL};

use std::net::{IpAddr, Ipv4Addr};

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dsn::DsnError;
use crate::gateway::Gateway;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FacilityError {
    /// The gateway refused a call.
    #[error("{code} ({status}): {message}")]
    Api { status: u16, code: String, message: String },
    #[error("{0}")]
    Dsn(#[from] DsnError),
    #[error("INVALID_CONFIG: {0}")]
    Config(String),
    #[error("MESSAGE_TOO_LARGE: {size} bytes exceeds {limit}")]
    MessageTooLarge { size: u64, limit: u64 },
    #[error("SCENARIO_PARSE_ERROR: {0}")]
    ScenarioParse(String),
    #[error("SCENARIO_FAILED: {0}")]
    Scenario(String),
}

impl FacilityError {
    pub fn code(&self) -> &str {
        match self {
            FacilityError::Api { code, .. } => code,
            FacilityError::Dsn(e) => e.code(),
            FacilityError::Config(_) => "INVALID_CONFIG",
            FacilityError::MessageTooLarge { .. } => "MESSAGE_TOO_LARGE",
            FacilityError::ScenarioParse(_) => "SCENARIO_PARSE_ERROR",
            FacilityError::Scenario(_) => "SCENARIO_FAILED",
        }
    }
}

/// Anything that answers gateway calls: the in-process [`Gateway`] or an
/// HTTP client.
pub trait GatewayApi: Send + Sync {
    fn call(&self, method: &str, path: &str, token: &str, body: Option<&Value>) -> Result<Value, FacilityError>;
}

impl GatewayApi for Gateway {
    fn call(&self, method: &str, path: &str, token: &str, body: Option<&Value>) -> Result<Value, FacilityError> {
        let body = body.map(|b| b.to_string().into_bytes()).unwrap_or_default();
        let r = self.handle_request(self.request(method, path, Some(token), body, IpAddr::V4(Ipv4Addr::LOCALHOST)));
        api_result(r.status, r.body)
    }
}

/// Turns a gateway status and body into a result.
pub fn api_result(status: u16, body: Value) -> Result<Value, FacilityError> {
    if status < 400 {
        return Ok(body);
    }
    let text = |k: &str| body.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
    Err(FacilityError::Api { status, code: text("error"), message: text("message") })
}

/// Seeded stand-in for detector frames.
#[derive(Debug, Clone)]
pub struct PayloadGen {
    rng: ChaCha8Rng,
}

impl PayloadGen {
    pub fn new(seed: u64) -> Self {
        PayloadGen { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_payload(&mut self, size: usize) -> Vec<u8> {
        let mut buf = vec![0u8; size];
        self.rng.fill_bytes(&mut buf);
        buf
    }
}

/// Running SHA-256 over every payload in order.
#[derive(Debug, Clone, Default)]
pub struct Checksum(Sha256);

impl Checksum {
    pub fn update(&mut self, payload: &[u8]) {
        self.0.update(payload);
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0.clone().finalize())
    }
}
