use std::net::IpAddr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use super::DsnError;
use crate::profiles::StreamMode;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverflowPolicy {
    #[default]
    Block,
    DropNewest,
}

/// Admin-defined shape of a channel. Application teams pick a template and
/// one of its internal targets; they cannot widen either list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelTemplate {
    pub template_id: String,
    pub mode: StreamMode,
    pub allowed_external_cidrs: Vec<Ipv4Net>,
    pub allowed_internal_targets: Vec<String>,
    pub buffer_capacity_bytes: u64,
    #[serde(default)]
    pub overflow_policy: OverflowPolicy,
    #[serde(default = "default_max_message")]
    pub max_message_bytes: u64,
}

fn default_max_message() -> u64 {
    64 * 1024
}

impl ChannelTemplate {
    pub fn validate(&self) -> Result<(), DsnError> {
        let bad = |m: String| Err(DsnError::InvalidTemplate(m));
        if self.template_id.is_empty() {
            return bad("template_id is empty".into());
        }
        if self.allowed_external_cidrs.is_empty() {
            return bad("allowed_external_cidrs is empty".into());
        }
        if self.allowed_internal_targets.is_empty() {
            return bad("allowed_internal_targets is empty".into());
        }
        for t in &self.allowed_internal_targets {
            let ok = t.rsplit_once(':').is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
            if !ok {
                return bad(format!("target {t:?} is not host:port"));
            }
        }
        if self.max_message_bytes == 0 || self.buffer_capacity_bytes < self.max_message_bytes {
            return bad("buffer_capacity_bytes must be at least max_message_bytes > 0".into());
        }
        if self.max_message_bytes > super::frame::MAX_PAYLOAD as u64 / 2 {
            return bad("max_message_bytes too large".into());
        }
        Ok(())
    }

    /// Connect-time allowlist check used by router mode.
    pub fn admits_peer(&self, peer: IpAddr) -> bool {
        match peer.to_canonical() {
            IpAddr::V4(v4) => self.allowed_external_cidrs.iter().any(|n| n.contains(&v4)),
            IpAddr::V6(_) => false,
        }
    }
}

/// Parses an admin template file: a JSON array of templates, or one template.
pub fn load_templates(text: &str) -> Result<Vec<ChannelTemplate>, DsnError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Many(Vec<ChannelTemplate>),
        One(ChannelTemplate),
    }
    let doc: Doc = serde_json::from_str(text).map_err(|e| DsnError::InvalidTemplate(e.to_string()))?;
    let list = match doc {
        Doc::Many(v) => v,
        Doc::One(t) => vec![t],
    };
    for t in &list {
        t.validate()?;
    }
    Ok(list)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> ChannelTemplate {
        serde_json::from_value(serde_json::json!({
            "template_id": "lcls",
            "mode": "router_l4",
            "allowed_external_cidrs": ["10.0.0.0/24"],
            "allowed_internal_targets": ["node1:9000"],
            "buffer_capacity_bytes": 4096,
            "max_message_bytes": 1024
        }))
        .unwrap()
    }

    #[test]
    fn cidr_examples() {
        let t = template();
        assert!(t.admits_peer("10.0.0.5".parse().unwrap()));
        assert!(!t.admits_peer("192.168.1.1".parse().unwrap()));
        assert!(t.admits_peer("::ffff:10.0.0.9".parse().unwrap()));
    }

    #[test]
    fn validation() {
        let t = template();
        assert_eq!(t.overflow_policy, OverflowPolicy::Block);
        t.validate().unwrap();
        let mut bad = t.clone();
        bad.allowed_internal_targets.clear();
        assert_eq!(bad.validate().unwrap_err().code(), "INVALID_TEMPLATE");
        let mut bad = t.clone();
        bad.buffer_capacity_bytes = 100;
        assert!(bad.validate().is_err());
        let mut bad = t;
        bad.allowed_internal_targets = vec!["nope".into()];
        assert!(bad.validate().is_err());
        assert_eq!(load_templates("[]").unwrap(), vec![]);
    }
}
