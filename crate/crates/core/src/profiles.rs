//! Enclave profiles along the development → leadership pathway, and the
//! promotion-readiness rubric that checks a workflow against them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::Scope;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProfileError {
    #[error("UNKNOWN_PROFILE: {0}")]
    UnknownProfile(String),
    #[error("INVALID_OVERRIDE: {0}")]
    InvalidOverride(String),
    #[error("NON_MONOTONE: {0}")]
    NonMonotone(String),
    #[error("INVALID_MANIFEST: {0}")]
    InvalidManifest(String),
}

impl ProfileError {
    pub fn code(&self) -> &'static str {
        match self {
            ProfileError::UnknownProfile(_) => "UNKNOWN_PROFILE",
            ProfileError::InvalidOverride(_) => "INVALID_OVERRIDE",
            ProfileError::NonMonotone(_) => "NON_MONOTONE",
            ProfileError::InvalidManifest(_) => "INVALID_MANIFEST",
        }
    }
}

/// Security enclave level. Ordering follows strictness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnclaveLevel {
    Development = 0,
    OpenProduction = 1,
    ModerateProduction = 2,
    Leadership = 3,
}

impl EnclaveLevel {
    pub const ALL: [EnclaveLevel; 4] = [
        EnclaveLevel::Development,
        EnclaveLevel::OpenProduction,
        EnclaveLevel::ModerateProduction,
        EnclaveLevel::Leadership,
    ];

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_u8(level: u8) -> Option<Self> {
        Self::ALL.get(level as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EnclaveLevel::Development => "development",
            EnclaveLevel::OpenProduction => "open_production",
            EnclaveLevel::ModerateProduction => "moderate_production",
            EnclaveLevel::Leadership => "leadership",
        }
    }
}

impl fmt::Display for EnclaveLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnclaveLevel {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| ProfileError::UnknownProfile(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    GatewayL7,
    RouterL4,
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::GatewayL7 => "gateway_l7",
            StreamMode::RouterL4 => "router_l4",
        }
    }
}

impl fmt::Display for StreamMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Operational notes that travel with a profile but are never enforced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maintenance_window: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sla: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentProfile {
    pub name: EnclaveLevel,
    pub level: u8,
    pub max_token_ttl_seconds: u64,
    pub mfa_required_at_issuance: bool,
    pub max_delegation_depth: u32,
    pub reservation_requires_approval: bool,
    pub allowed_stream_modes: Vec<StreamMode>,
    /// Minimum share of the machine a workflow must use to belong here.
    pub min_nodes_fraction_leadership: Option<f64>,
    #[serde(default)]
    pub metadata: ProfileMetadata,
}

impl EnvironmentProfile {
    pub fn default_for(level: EnclaveLevel) -> Self {
        use EnclaveLevel::*;
        let both = vec![StreamMode::GatewayL7, StreamMode::RouterL4];
        let l7 = vec![StreamMode::GatewayL7];
        let (ttl, mfa, depth, approval, modes, fraction) = match level {
            Development => (2_592_000, false, 4, false, both, None),
            OpenProduction => (604_800, false, 3, true, both, None),
            ModerateProduction => (86_400, true, 2, true, l7, None),
            Leadership => (86_400, true, 2, true, l7, Some(0.20)),
        };
        EnvironmentProfile {
            name: level,
            level: level.as_u8(),
            max_token_ttl_seconds: ttl,
            mfa_required_at_issuance: mfa,
            max_delegation_depth: depth,
            reservation_requires_approval: approval,
            allowed_stream_modes: modes,
            min_nodes_fraction_leadership: fraction,
            metadata: ProfileMetadata::default(),
        }
    }

    pub fn allows_stream_mode(&self, mode: StreamMode) -> bool {
        self.allowed_stream_modes.contains(&mode)
    }
}

/// Partial profile used in override files; absent fields keep the default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverride {
    pub max_token_ttl_seconds: Option<u64>,
    pub mfa_required_at_issuance: Option<bool>,
    pub max_delegation_depth: Option<u32>,
    pub reservation_requires_approval: Option<bool>,
    pub allowed_stream_modes: Option<Vec<StreamMode>>,
    pub min_nodes_fraction_leadership: Option<f64>,
    pub metadata: Option<ProfileMetadata>,
}

/// The four profiles, indexed by level.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    profiles: [EnvironmentProfile; 4],
}

impl Default for ProfileTable {
    fn default() -> Self {
        ProfileTable { profiles: EnclaveLevel::ALL.map(EnvironmentProfile::default_for) }
    }
}

impl ProfileTable {
    /// Applies an override document `{"<profile name>": {field: value, ...}}`
    /// on top of the defaults. The resulting table must still tighten
    /// monotonically with level.
    pub fn with_overrides(text: &str) -> Result<Self, ProfileError> {
        let raw: BTreeMap<String, ProfileOverride> =
            serde_json::from_str(text).map_err(|e| ProfileError::InvalidOverride(e.to_string()))?;
        let mut table = ProfileTable::default();
        for (name, ov) in raw {
            let level: EnclaveLevel = name.parse()?;
            let p = &mut table.profiles[level as usize];
            if let Some(v) = ov.max_token_ttl_seconds {
                if v == 0 {
                    return Err(ProfileError::InvalidOverride(format!("{name}: max_token_ttl_seconds must be > 0")));
                }
                p.max_token_ttl_seconds = v;
            }
            if let Some(v) = ov.mfa_required_at_issuance {
                p.mfa_required_at_issuance = v;
            }
            if let Some(v) = ov.max_delegation_depth {
                p.max_delegation_depth = v;
            }
            if let Some(v) = ov.reservation_requires_approval {
                p.reservation_requires_approval = v;
            }
            if let Some(v) = ov.allowed_stream_modes {
                if v.is_empty() {
                    return Err(ProfileError::InvalidOverride(format!("{name}: allowed_stream_modes is empty")));
                }
                p.allowed_stream_modes = v;
            }
            if let Some(v) = ov.min_nodes_fraction_leadership {
                if !(0.0..=1.0).contains(&v) {
                    return Err(ProfileError::InvalidOverride(format!("{name}: fraction outside [0, 1]")));
                }
                p.min_nodes_fraction_leadership = Some(v);
            }
            if let Some(v) = ov.metadata {
                p.metadata = v;
            }
        }
        table.check_monotone()?;
        Ok(table)
    }

    pub fn get(&self, level: EnclaveLevel) -> &EnvironmentProfile {
        &self.profiles[level as usize]
    }

    pub fn load(&self, name: &str) -> Result<EnvironmentProfile, ProfileError> {
        Ok(self.get(name.parse()?).clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = &EnvironmentProfile> {
        self.profiles.iter()
    }

    /// Every constraint at level i+1 is at least as strict as at level i.
    pub fn check_monotone(&self) -> Result<(), ProfileError> {
        for pair in self.profiles.windows(2) {
            let (lo, hi) = (&pair[0], &pair[1]);
            let fail = |what: &str| Err(ProfileError::NonMonotone(format!("{what} loosens from {} to {}", lo.name, hi.name)));
            if hi.max_token_ttl_seconds > lo.max_token_ttl_seconds {
                return fail("max_token_ttl_seconds");
            }
            if hi.max_delegation_depth > lo.max_delegation_depth {
                return fail("max_delegation_depth");
            }
            if lo.mfa_required_at_issuance && !hi.mfa_required_at_issuance {
                return fail("mfa_required_at_issuance");
            }
            if lo.reservation_requires_approval && !hi.reservation_requires_approval {
                return fail("reservation_requires_approval");
            }
            if !hi.allowed_stream_modes.iter().all(|m| lo.allowed_stream_modes.contains(m)) {
                return fail("allowed_stream_modes");
            }
            let lo_frac = lo.min_nodes_fraction_leadership.unwrap_or(0.0);
            let hi_frac = hi.min_nodes_fraction_leadership.unwrap_or(0.0);
            if hi_frac < lo_frac {
                return fail("min_nodes_fraction_leadership");
            }
        }
        Ok(())
    }
}

/// Load one of the four default profiles by name.
pub fn load_profile(name: &str) -> Result<EnvironmentProfile, ProfileError> {
    ProfileTable::default().load(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthMethod {
    TokenMfa,
    Token,
    None,
}

impl AuthMethod {
    pub fn name(self) -> &'static str {
        match self {
            AuthMethod::TokenMfa => "token_mfa",
            AuthMethod::Token => "token",
            AuthMethod::None => "none",
        }
    }
}

/// What a workflow declares about itself when asking to move up an enclave.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowManifest {
    pub workflow: String,
    pub auth_method: AuthMethod,
    pub max_token_ttl_seconds: u64,
    pub delegation_depth: u32,
    #[serde(default)]
    pub endpoints: Vec<String>,
    #[serde(default)]
    pub stream_modes: Vec<StreamMode>,
    #[serde(default)]
    pub qos_tiers: Vec<String>,
    pub nodes_fraction: f64,
}

impl WorkflowManifest {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: String| Err(ProfileError::InvalidManifest(m));
        if self.workflow.is_empty() {
            return bad("workflow name is empty".into());
        }
        if !(0.0..=1.0).contains(&self.nodes_fraction) {
            return bad(format!("nodes_fraction {} outside [0, 1]", self.nodes_fraction));
        }
        for e in &self.endpoints {
            if e.parse::<Scope>().is_err() {
                return bad(format!("unknown endpoint scope {e:?}"));
            }
        }
        if self.auth_method == AuthMethod::None && self.delegation_depth > 0 {
            return bad("delegation declared without token authentication".into());
        }
        if !self.stream_modes.is_empty() && !self.endpoints.iter().any(|e| e.starts_with("streams.")) {
            return bad("stream modes declared but no streams.* endpoint used".into());
        }
        for t in &self.qos_tiers {
            if !matches!(t.as_str(), "batch" | "interactive" | "urgent") {
                return bad(format!("unknown qos tier {t:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: String,
    pub observed: String,
    pub required: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadinessReport {
    pub target: EnclaveLevel,
    pub pass: bool,
    pub violations: Vec<Violation>,
}

impl ReadinessReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("target: {}\nresult: {}\n", self.target, if self.pass { "PASS" } else { "FAIL" });
        if !self.violations.is_empty() {
            let w = self.violations.iter().map(|v| v.rule.len()).max().unwrap_or(4).max(4);
            out.push_str(&format!("{:<w$}  {:<20}  {}\n", "rule", "observed", "required"));
            for v in &self.violations {
                out.push_str(&format!("{:<w$}  {:<20}  {}\n", v.rule, v.observed, v.required));
            }
        }
        out
    }
}

/// Checks a manifest against every manifest-checkable constraint of the
/// target profile. Violations come back sorted by rule name.
pub fn check_promotion_readiness(manifest: &WorkflowManifest, target: &EnvironmentProfile) -> ReadinessReport {
    let mut violations = Vec::new();

    let bad_modes: Vec<&str> = manifest
        .stream_modes
        .iter()
        .filter(|m| !target.allows_stream_mode(**m))
        .map(|m| m.name())
        .collect();
    if !bad_modes.is_empty() {
        violations.push(Violation {
            rule: "allowed_stream_modes".into(),
            observed: bad_modes.join(","),
            required: target.allowed_stream_modes.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        });
    }
    if manifest.delegation_depth > target.max_delegation_depth {
        violations.push(Violation {
            rule: "max_delegation_depth".into(),
            observed: manifest.delegation_depth.to_string(),
            required: format!("<= {}", target.max_delegation_depth),
        });
    }
    if manifest.max_token_ttl_seconds > target.max_token_ttl_seconds {
        violations.push(Violation {
            rule: "max_token_ttl_seconds".into(),
            observed: manifest.max_token_ttl_seconds.to_string(),
            required: format!("<= {}", target.max_token_ttl_seconds),
        });
    }
    if target.mfa_required_at_issuance && manifest.auth_method != AuthMethod::TokenMfa {
        violations.push(Violation {
            rule: "mfa_required".into(),
            observed: manifest.auth_method.name().into(),
            required: AuthMethod::TokenMfa.name().into(),
        });
    }
    if let Some(min) = target.min_nodes_fraction_leadership {
        if manifest.nodes_fraction < min {
            violations.push(Violation {
                rule: "min_nodes_fraction".into(),
                observed: format!("{}", manifest.nodes_fraction),
                required: format!(">= {min}"),
            });
        }
    }

    violations.sort_by(|a, b| a.rule.cmp(&b.rule));
    ReadinessReport { target: target.name, pass: violations.is_empty(), violations }
}

/// Gateway-side settings that a profile constrains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyKnobs {
    pub max_token_ttl_seconds: u64,
    pub max_delegation_depth: u32,
    pub mfa_required: bool,
    pub allowed_stream_modes: Vec<StreamMode>,
    pub reservation_requires_approval: bool,
}

impl PolicyKnobs {
    /// Knobs with nothing clamped yet.
    pub fn unrestricted() -> Self {
        PolicyKnobs {
            max_token_ttl_seconds: u64::MAX,
            max_delegation_depth: u32::MAX,
            mfa_required: false,
            allowed_stream_modes: vec![StreamMode::GatewayL7, StreamMode::RouterL4],
            reservation_requires_approval: false,
        }
    }
}

/// Clamps the configured knobs to what `profile` permits. Never loosens a
/// setting, so applying the same profile again changes nothing.
pub fn apply_profile(profile: &EnvironmentProfile, config: &PolicyKnobs) -> PolicyKnobs {
    PolicyKnobs {
        max_token_ttl_seconds: config.max_token_ttl_seconds.min(profile.max_token_ttl_seconds),
        max_delegation_depth: config.max_delegation_depth.min(profile.max_delegation_depth),
        mfa_required: config.mfa_required || profile.mfa_required_at_issuance,
        allowed_stream_modes: config
            .allowed_stream_modes
            .iter()
            .copied()
            .filter(|m| profile.allows_stream_mode(*m))
            .collect(),
        reservation_requires_approval: config.reservation_requires_approval || profile.reservation_requires_approval,
    }
}
