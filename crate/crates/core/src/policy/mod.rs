//! Deny-by-default policy-as-code evaluation.
//!
//! A policy document is JSON:
//!
//! ```json
//! {"version": 1, "rules": [
//!   {"rule_id": "alice-jobs", "effect": "allow", "subjects": "alice",
//!    "actions": "jobs.*", "resources": "/v1/jobs",
//!    "conditions": [{"time_window": [0, 4102444800]}, {"source_cidr": "10.0.0.0/8"}]}
//! ]}
//! ```
//!
//! Explicit deny rules win over allow rules; within one effect the first
//! matching rule in document order is reported.

use std::collections::HashSet;
use std::net::IpAddr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiles::EnclaveLevel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("PARSE_ERROR at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("DUPLICATE_RULE_ID: {0}")]
    DuplicateRuleId(String),
    #[error("INVALID_CONDITION in rule {rule_id}: {message}")]
    InvalidCondition { rule_id: String, message: String },
    #[error("INVALID_PATTERN in rule {rule_id}: {message}")]
    InvalidPattern { rule_id: String, message: String },
}

impl PolicyError {
    pub fn code(&self) -> &'static str {
        match self {
            PolicyError::Parse { .. } => "PARSE_ERROR",
            PolicyError::DuplicateRuleId(_) => "DUPLICATE_RULE_ID",
            PolicyError::InvalidCondition { .. } => "INVALID_CONDITION",
            PolicyError::InvalidPattern { .. } => "INVALID_PATTERN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Condition {
    /// Half-open `[start, end)` in unix seconds.
    TimeWindow([u64; 2]),
    EnclaveMax(u8),
    SourceCidr(String),
}

/// A rule as written in a policy document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRule {
    pub rule_id: String,
    pub effect: Effect,
    pub subjects: OneOrMany,
    pub actions: OneOrMany,
    pub resources: OneOrMany,
    #[serde(default)]
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyDocument {
    version: u32,
    rules: Vec<PolicyRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum SubjectPattern {
    Any,
    Subject(String),
    Project(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ActionPattern {
    Any,
    /// `jobs.*` stored as `jobs.`
    Prefix(String),
    Exact(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum ResourcePattern {
    Any,
    Prefix(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CompiledCondition {
    TimeWindow { start: u64, end: u64 },
    EnclaveMax(EnclaveLevel),
    SourceCidr(Ipv4Net),
}

impl CompiledCondition {
    fn name(&self) -> &'static str {
        match self {
            CompiledCondition::TimeWindow { .. } => "time_window",
            CompiledCondition::EnclaveMax(_) => "enclave_max",
            CompiledCondition::SourceCidr(_) => "source_cidr",
        }
    }

    fn holds(&self, ctx: &RequestCtx) -> bool {
        match self {
            CompiledCondition::TimeWindow { start, end } => *start <= ctx.now && ctx.now < *end,
            CompiledCondition::EnclaveMax(level) => ctx.enclave <= *level,
            CompiledCondition::SourceCidr(net) => match ctx.source_ip {
                IpAddr::V4(ip) => net.contains(&ip),
                IpAddr::V6(ip) => ip.to_ipv4_mapped().is_some_and(|v4| net.contains(&v4)),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CompiledRule {
    source: PolicyRule,
    subjects: Vec<SubjectPattern>,
    actions: Vec<ActionPattern>,
    resources: Vec<ResourcePattern>,
    conditions: Vec<CompiledCondition>,
}

impl CompiledRule {
    fn compile(rule: PolicyRule) -> Result<Self, PolicyError> {
        let id = rule.rule_id.clone();
        let pattern_err = |message: String| PolicyError::InvalidPattern { rule_id: id.clone(), message };

        let subjects = rule
            .subjects
            .clone()
            .into_vec()
            .into_iter()
            .map(|s| match s.as_str() {
                "*" => Ok(SubjectPattern::Any),
                "" => Err(pattern_err("empty subject".into())),
                _ if s.contains('*') => Err(pattern_err(format!("subject {s:?}: only a bare \"*\" is allowed"))),
                _ => Ok(match s.strip_prefix("project:") {
                    Some(p) => SubjectPattern::Project(p.to_string()),
                    None => SubjectPattern::Subject(s),
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;

        let actions = rule
            .actions
            .clone()
            .into_vec()
            .into_iter()
            .map(|a| {
                if a == "*" {
                    return Ok(ActionPattern::Any);
                }
                if let Some(prefix) = a.strip_suffix(".*") {
                    if prefix.is_empty() || prefix.contains('*') {
                        return Err(pattern_err(format!("action {a:?}")));
                    }
                    return Ok(ActionPattern::Prefix(format!("{prefix}.")));
                }
                if a.is_empty() || a.contains('*') {
                    return Err(pattern_err(format!("action {a:?}: wildcard only as trailing segment")));
                }
                Ok(ActionPattern::Exact(a))
            })
            .collect::<Result<Vec<_>, _>>()?;

        let resources = rule
            .resources
            .clone()
            .into_vec()
            .into_iter()
            .map(|r| match r.as_str() {
                "*" => Ok(ResourcePattern::Any),
                _ if !r.starts_with('/') => Err(pattern_err(format!("resource {r:?} must start with '/'"))),
                _ => Ok(ResourcePattern::Prefix(r.trim_end_matches('/').to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;

        if subjects.is_empty() || actions.is_empty() || resources.is_empty() {
            return Err(pattern_err("subjects, actions and resources must be non-empty".into()));
        }

        let cond_err = |message: String| PolicyError::InvalidCondition { rule_id: id.clone(), message };
        let conditions = rule
            .conditions
            .iter()
            .map(|c| match c {
                Condition::TimeWindow([start, end]) => {
                    if start >= end {
                        Err(cond_err(format!("time_window start {start} >= end {end}")))
                    } else {
                        Ok(CompiledCondition::TimeWindow { start: *start, end: *end })
                    }
                }
                Condition::EnclaveMax(level) => EnclaveLevel::from_u8(*level)
                    .map(CompiledCondition::EnclaveMax)
                    .ok_or_else(|| cond_err(format!("enclave_max {level} out of range 0..=3"))),
                Condition::SourceCidr(text) => text
                    .parse::<Ipv4Net>()
                    .map(CompiledCondition::SourceCidr)
                    .map_err(|e| cond_err(format!("source_cidr {text:?}: {e}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;

        Ok(CompiledRule { source: rule, subjects, actions, resources, conditions })
    }

    /// `None` when the rule matches, otherwise the first failing part.
    fn first_failure(&self, ctx: &RequestCtx) -> Option<&'static str> {
        let subject_ok = self.subjects.iter().any(|p| match p {
            SubjectPattern::Any => true,
            SubjectPattern::Subject(s) => *s == ctx.subject,
            SubjectPattern::Project(p) => *p == ctx.project,
        });
        if !subject_ok {
            return Some("subjects");
        }
        let action_ok = self.actions.iter().any(|p| match p {
            ActionPattern::Any => true,
            ActionPattern::Prefix(prefix) => ctx.action.strip_prefix(prefix.as_str()).is_some_and(|rest| !rest.is_empty()),
            ActionPattern::Exact(a) => *a == ctx.action,
        });
        if !action_ok {
            return Some("actions");
        }
        let resource_ok = self.resources.iter().any(|p| match p {
            ResourcePattern::Any => true,
            ResourcePattern::Prefix(prefix) => {
                prefix.is_empty()
                    || ctx.resource == *prefix
                    || ctx.resource.strip_prefix(prefix.as_str()).is_some_and(|rest| rest.starts_with('/'))
            }
        });
        if !resource_ok {
            return Some("resources");
        }
        self.conditions.iter().find(|c| !c.holds(ctx)).map(|c| c.name())
    }
}

/// Immutable, validated rule list in document order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PolicySet {
    rules: Vec<CompiledRule>,
}

/// Everything the engine looks at for one request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestCtx {
    pub subject: String,
    pub project: String,
    pub action: String,
    pub resource: String,
    pub now: u64,
    pub source_ip: IpAddr,
    pub enclave: EnclaveLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub matched_rule: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainEntry {
    pub rule_id: String,
    pub effect: Effect,
    pub matched: bool,
    pub failing_condition: Option<String>,
}

impl PolicySet {
    pub fn empty() -> Self {
        PolicySet::default()
    }

    pub fn from_rules(rules: Vec<PolicyRule>) -> Result<Self, PolicyError> {
        let mut seen = HashSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            if !seen.insert(rule.rule_id.clone()) {
                return Err(PolicyError::DuplicateRuleId(rule.rule_id));
            }
            compiled.push(CompiledRule::compile(rule)?);
        }
        Ok(PolicySet { rules: compiled })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn rules(&self) -> impl Iterator<Item = &PolicyRule> {
        self.rules.iter().map(|r| &r.source)
    }

    pub fn evaluate(&self, ctx: &RequestCtx) -> Decision {
        let mut first_allow = None;
        for rule in &self.rules {
            if rule.first_failure(ctx).is_some() {
                continue;
            }
            match rule.source.effect {
                Effect::Deny => {
                    return Decision {
                        verdict: Verdict::Deny,
                        matched_rule: Some(rule.source.rule_id.clone()),
                        reason: "explicit-deny".into(),
                    }
                }
                Effect::Allow => {
                    first_allow.get_or_insert(&rule.source.rule_id);
                }
            }
        }
        match first_allow {
            Some(id) => Decision { verdict: Verdict::Allow, matched_rule: Some(id.clone()), reason: "allow".into() },
            None => Decision { verdict: Verdict::Deny, matched_rule: None, reason: "default-deny".into() },
        }
    }

    pub fn explain(&self, ctx: &RequestCtx) -> Vec<ExplainEntry> {
        self.rules
            .iter()
            .map(|rule| {
                let failure = rule.first_failure(ctx);
                ExplainEntry {
                    rule_id: rule.source.rule_id.clone(),
                    effect: rule.source.effect,
                    matched: failure.is_none(),
                    failing_condition: failure.map(str::to_string),
                }
            })
            .collect()
    }
}

/// Parses and validates a policy document.
pub fn load_policies(document: &str) -> Result<PolicySet, PolicyError> {
    let doc: PolicyDocument = serde_json::from_str(document).map_err(|e| PolicyError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.version != 1 {
        return Err(PolicyError::Parse { line: 0, column: 0, message: format!("unsupported version {}", doc.version) });
    }
    PolicySet::from_rules(doc.rules)
}
