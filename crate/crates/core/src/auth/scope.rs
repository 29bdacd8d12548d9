use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// The fixed scope vocabulary a token may carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    AdminAll,
    JobsCancel,
    JobsRead,
    JobsSubmit,
    StatusRead,
    StreamsProvision,
    StreamsRead,
}

impl Scope {
    pub const ALL: [Scope; 7] = [
        Scope::AdminAll,
        Scope::JobsCancel,
        Scope::JobsRead,
        Scope::JobsSubmit,
        Scope::StatusRead,
        Scope::StreamsProvision,
        Scope::StreamsRead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::AdminAll => "admin.*",
            Scope::JobsCancel => "jobs.cancel",
            Scope::JobsRead => "jobs.read",
            Scope::JobsSubmit => "jobs.submit",
            Scope::StatusRead => "status.read",
            Scope::StreamsProvision => "streams.provision",
            Scope::StreamsRead => "streams.read",
        }
    }

    /// Whether holding this scope permits the concrete `action`.
    /// `admin.*` grants every `admin.<x>` action.
    pub fn covers(self, action: &str) -> bool {
        match self {
            Scope::AdminAll => action.strip_prefix("admin.").is_some_and(|rest| !rest.is_empty()),
            other => other.as_str() == action,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownScope(pub String);

impl FromStr for Scope {
    type Err = UnknownScope;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scope::ALL
            .into_iter()
            .find(|sc| sc.as_str() == s)
            .ok_or_else(|| UnknownScope(s.to_string()))
    }
}

impl Serialize for Scope {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|UnknownScope(s)| serde::de::Error::custom(format!("unknown scope {s:?}")))
    }
}
