use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("QOS_NOT_ENTITLED: project {project} may not use tier {tier}")]
    QosNotEntitled { project: String, tier: Tier },
    #[error("NODES_EXCEED_CLUSTER: {requested} nodes requested, cluster has {available}")]
    NodesExceedCluster { requested: u32, available: u32 },
    #[error("DEPENDENCY_UNKNOWN: {0}")]
    DependencyUnknown(String),
    #[error("CYCLE_DETECTED: {0}")]
    CycleDetected(String),
    #[error("INVALID_JOB: {0}")]
    InvalidJob(String),
    #[error("UNKNOWN_JOB: {0}")]
    UnknownJob(u64),
    #[error("FORBIDDEN: {0}")]
    Forbidden(String),
    #[error("INVALID_WINDOW: {0}")]
    InvalidWindow(String),
    #[error("INVALID_CONFIG: {0}")]
    InvalidConfig(String),
    #[error("CLOCK_REGRESSION: step at {now} after {last}")]
    ClockRegression { now: u64, last: u64 },
    #[error("SCHEDULER_UNAVAILABLE")]
    Unavailable,
}

impl SchedError {
    pub fn code(&self) -> &'static str {
        match self {
            SchedError::QosNotEntitled { .. } => "QOS_NOT_ENTITLED",
            SchedError::NodesExceedCluster { .. } => "NODES_EXCEED_CLUSTER",
            SchedError::DependencyUnknown(_) => "DEPENDENCY_UNKNOWN",
            SchedError::CycleDetected(_) => "CYCLE_DETECTED",
            SchedError::InvalidJob(_) => "INVALID_JOB",
            SchedError::UnknownJob(_) => "UNKNOWN_JOB",
            SchedError::Forbidden(_) => "FORBIDDEN",
            SchedError::InvalidWindow(_) => "INVALID_WINDOW",
            SchedError::InvalidConfig(_) => "INVALID_CONFIG",
            SchedError::ClockRegression { .. } => "CLOCK_REGRESSION",
            SchedError::Unavailable => "SCHEDULER_UNAVAILABLE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Batch,
    Interactive,
    Urgent,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Batch, Tier::Interactive, Tier::Urgent];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Batch => "batch",
            Tier::Interactive => "interactive",
            Tier::Urgent => "urgent",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tier {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown tier {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QosTier {
    pub name: Tier,
    pub priority: u32,
    pub may_preempt: BTreeSet<Tier>,
    #[serde(default = "default_grace")]
    pub grace_seconds: u64,
}

fn default_grace() -> u64 {
    30
}

/// The three tiers with their priorities and preemption rights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierTable {
    tiers: BTreeMap<Tier, QosTier>,
}

impl Default for TierTable {
    fn default() -> Self {
        Self::with_grace(default_grace())
    }
}

impl TierTable {
    pub fn with_grace(grace_seconds: u64) -> Self {
        let t = |name, priority, may: &[Tier]| QosTier {
            name,
            priority,
            may_preempt: may.iter().copied().collect(),
            grace_seconds,
        };
        let tiers = [
            t(Tier::Batch, 100, &[]),
            t(Tier::Interactive, 500, &[Tier::Batch]),
            t(Tier::Urgent, 900, &[Tier::Batch, Tier::Interactive]),
        ];
        TierTable { tiers: tiers.into_iter().map(|q| (q.name, q)).collect() }
    }

    pub fn from_tiers(tiers: Vec<QosTier>) -> Result<Self, SchedError> {
        let map: BTreeMap<_, _> = tiers.into_iter().map(|q| (q.name, q)).collect();
        let table = TierTable { tiers: map };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        for t in Tier::ALL {
            if !self.tiers.contains_key(&t) {
                return Err(SchedError::InvalidConfig(format!("tier {t} missing")));
            }
        }
        let p = |t| self.priority(t);
        if !(p(Tier::Batch) < p(Tier::Interactive) && p(Tier::Interactive) < p(Tier::Urgent)) {
            return Err(SchedError::InvalidConfig("priorities must satisfy batch < interactive < urgent".into()));
        }
        for q in self.tiers.values() {
            if let Some(bad) = q.may_preempt.iter().find(|v| p(**v) >= q.priority) {
                return Err(SchedError::InvalidConfig(format!("{} may not preempt {bad}", q.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, tier: Tier) -> &QosTier {
        &self.tiers[&tier]
    }

    pub fn priority(&self, tier: Tier) -> u32 {
        self.get(tier).priority
    }

    /// Whether `requester` may preempt a job running at `victim` tier.
    pub fn may_preempt(&self, requester: Tier, victim: Tier) -> bool {
        self.get(requester).may_preempt.contains(&victim) && self.priority(victim) < self.priority(requester)
    }
}

/// Which tiers each project may request. Unlisted projects get `default`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entitlements {
    #[serde(default)]
    pub projects: BTreeMap<String, BTreeSet<Tier>>,
    #[serde(default = "default_entitlement")]
    pub default: BTreeSet<Tier>,
}

fn default_entitlement() -> BTreeSet<Tier> {
    [Tier::Batch].into_iter().collect()
}

impl Default for Entitlements {
    fn default() -> Self {
        Entitlements { projects: BTreeMap::new(), default: default_entitlement() }
    }
}

impl Entitlements {
    pub fn grant(mut self, project: &str, tiers: &[Tier]) -> Self {
        self.projects.insert(project.to_string(), tiers.iter().copied().collect());
        self
    }

    pub fn allows(&self, project: &str, tier: Tier) -> bool {
        self.projects.get(project).unwrap_or(&self.default).contains(&tier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub u64);

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A job as submitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobSpec {
    /// Empty means the submitting token's project.
    #[serde(default)]
    pub project: String,
    #[serde(default)]
    pub subject: String,
    pub nodes_requested: u32,
    pub walltime_seconds: u64,
    pub qos_requested: Tier,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<JobId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

/// One entry of a workflow; `after` names other entries by `key`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowJob {
    pub key: String,
    #[serde(flatten)]
    pub spec: JobSpec,
    #[serde(default)]
    pub after: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pending,
    Running,
    Preempted,
    Completed,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobState {
    pub phase: Phase,
    pub assigned_nodes: Vec<u32>,
    pub started_at: Option<u64>,
    pub ended_at: Option<u64>,
    pub remaining_seconds: u64,
    pub preempt_count: u32,
}

/// Snapshot of a job for queries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobInfo {
    pub job_id: JobId,
    pub spec: JobSpec,
    pub submit_time: u64,
    pub first_started_at: Option<u64>,
    pub state: JobState,
}

/// Scheduled priority elevation for one project, half-open `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationWindow {
    #[serde(default)]
    pub window_id: u64,
    pub project: String,
    pub start: u64,
    pub end: u64,
    pub elevated_tier: Tier,
    pub node_cap: u32,
}

impl ReservationWindow {
    pub fn active_at(&self, now: u64) -> bool {
        self.start <= now && now < self.end
    }
}

/// A traditional reservation: `nodes` are withheld from every other project
/// for the whole window, whether or not the owner uses them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardReservation {
    pub project: String,
    pub start: u64,
    pub end: u64,
    pub nodes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationListing {
    #[serde(flatten)]
    pub window: ReservationWindow,
    pub active: bool,
    /// Set when overlapping windows of different projects together claim
    /// more nodes than the cluster has.
    pub overcommitted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Start { job: JobId, nodes: Vec<u32> },
    PreemptWarn { job: JobId, by: JobId },
    Kill { job: JobId },
    Requeue { job: JobId },
    Complete { job: JobId },
    Cancel { job: JobId },
}

impl Action {
    pub fn job(&self) -> JobId {
        match self {
            Action::Start { job, .. }
            | Action::PreemptWarn { job, .. }
            | Action::Kill { job }
            | Action::Requeue { job }
            | Action::Complete { job }
            | Action::Cancel { job } => *job,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedAction {
    pub t: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub now: u64,
    pub elapsed_seconds: u64,
    pub utilization_busy: f64,
    pub utilization_useful: f64,
    pub mean_wait_by_tier: BTreeMap<Tier, f64>,
    pub preemption_count: u64,
    pub lost_node_seconds: u64,
    pub busy_node_seconds: u64,
    pub useful_node_seconds: u64,
}
