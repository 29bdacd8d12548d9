//! Data streaming node.
//!
//! The control plane ([`DsnService`]) provisions channels from admin
//! templates and never touches payload bytes. Each channel gets its own
//! data-plane listener, either an L7 pub/sub gateway speaking the
//! [`frame`] protocol or an L4 relay that forwards opaque bytes to an
//! allowlisted internal target after a connect-time CIDR check.

mod buffer;
mod client;
mod data;
pub mod frame;
mod service;
mod template;

pub use buffer::{buffer_admit, Admission, ChannelBuffer, Message};
pub use client::{Delivery, StreamClient};
pub use data::authenticate_session;
pub use frame::{Frame, FrameError, FrameType};
pub use service::{ChannelState, Counters, DsnConfig, DsnService, ProvisionRequest, StreamChannel, Throughput};
pub use template::{load_templates, ChannelTemplate, OverflowPolicy};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DsnError {
    #[error("TARGET_NOT_ALLOWED: {0}")]
    TargetNotAllowed(String),
    #[error("BUFFER_EXCEEDS_TEMPLATE: requested {requested} bytes, template allows {limit}")]
    BufferExceedsTemplate { requested: u64, limit: u64 },
    #[error("UNKNOWN_TEMPLATE: {0}")]
    UnknownTemplate(String),
    #[error("INVALID_TEMPLATE: {0}")]
    InvalidTemplate(String),
    #[error("INVALID_REQUEST: {0}")]
    InvalidRequest(String),
    #[error("MODE_NOT_ALLOWED: {0} is disabled by the active profile")]
    ModeNotAllowed(String),
    #[error("FORBIDDEN: {0}")]
    Forbidden(String),
    #[error("AUTH_REQUIRED: {0}")]
    AuthRequired(String),
    #[error("CIDR_REJECTED: {0}")]
    CidrRejected(String),
    #[error("CHANNEL_CLOSED")]
    ChannelClosed,
    #[error("UNKNOWN_CHANNEL: {0}")]
    UnknownChannel(u32),
    #[error("MESSAGE_TOO_LARGE: {size} bytes exceeds {limit}")]
    MessageTooLarge { size: u64, limit: u64 },
    #[error("MALFORMED_FRAME: {0}")]
    MalformedFrame(String),
    #[error("IO: {0}")]
    Io(String),
    /// An ERR frame from the peer whose code is not one of the above.
    #[error("{0}")]
    Remote(String),
}

impl DsnError {
    pub fn code(&self) -> &str {
        match self {
            DsnError::TargetNotAllowed(_) => "TARGET_NOT_ALLOWED",
            DsnError::BufferExceedsTemplate { .. } => "BUFFER_EXCEEDS_TEMPLATE",
            DsnError::UnknownTemplate(_) => "UNKNOWN_TEMPLATE",
            DsnError::InvalidTemplate(_) => "INVALID_TEMPLATE",
            DsnError::InvalidRequest(_) => "INVALID_REQUEST",
            DsnError::ModeNotAllowed(_) => "MODE_NOT_ALLOWED",
            DsnError::Forbidden(_) => "FORBIDDEN",
            DsnError::AuthRequired(_) => "AUTH_REQUIRED",
            DsnError::CidrRejected(_) => "CIDR_REJECTED",
            DsnError::ChannelClosed => "CHANNEL_CLOSED",
            DsnError::UnknownChannel(_) => "UNKNOWN_CHANNEL",
            DsnError::MessageTooLarge { .. } => "MESSAGE_TOO_LARGE",
            DsnError::MalformedFrame(_) => "MALFORMED_FRAME",
            DsnError::Io(_) => "IO",
            DsnError::Remote(s) => s.split(':').next().unwrap_or(s),
        }
    }

    /// Rebuilds an error from an ERR frame payload (`"CODE: detail"`).
    pub fn from_wire(payload: &[u8]) -> Self {
        let text = String::from_utf8_lossy(payload).into_owned();
        let (code, detail) = text.split_once(": ").unwrap_or((&text, ""));
        let detail = detail.to_string();
        match code {
            "AUTH_REQUIRED" => DsnError::AuthRequired(detail),
            "CHANNEL_CLOSED" => DsnError::ChannelClosed,
            "MALFORMED_FRAME" => DsnError::MalformedFrame(detail),
            "FORBIDDEN" => DsnError::Forbidden(detail),
            _ => DsnError::Remote(text),
        }
    }

    pub fn to_wire(&self) -> Vec<u8> {
        let text = self.to_string();
        if text.starts_with(self.code()) {
            text.into_bytes()
        } else {
            format!("{}: {text}", self.code()).into_bytes()
        }
    }
}

impl From<std::io::Error> for DsnError {
    fn from(e: std::io::Error) -> Self {
        DsnError::Io(e.to_string())
    }
}

impl From<FrameError> for DsnError {
    fn from(e: FrameError) -> Self {
        match e {
            FrameError::Io(s) => DsnError::Io(s),
            other => DsnError::MalformedFrame(other.to_string()),
        }
    }
}

#[cfg(test)]
mod tests;
