//! Timed scenarios against a fresh in-process stack.
//!
//! ```json
//! {"name": "demo",
//!  "stack": {"node_count": 8},
//!  "steps": [
//!    {"at": 0, "action": "issue_token",
//!     "args": {"name": "u", "subject": "alice", "project": "p", "scopes": ["jobs.submit"]}},
//!    {"at": 0, "action": "submit_jobs",
//!     "args": {"name": "j", "token": "u", "nodes_requested": 2, "walltime_seconds": 60}},
//!    {"at": 5, "action": "checkpoint", "assert": {"job.j.started": true, "scheduler.busy_nodes": {"min": 2}}}
//!  ]}
//! ```
//!
//! `at` is seconds from the scenario origin. Assertions run after the
//! step's action and accept a literal, `{"min": x, "max": y}`, or
//! `{"eq_metric": "other.metric"}`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    Consumer, ConsumerConfig, ConsumerSummary, FacilityError, GatewayApi, ProducerConfig, ProducerSummary,
};
use crate::auth::IssueRequest;
use crate::clock::{ClockMode, Pacer, SharedClock, SimClock, SystemClock};
use crate::dsn::{ChannelTemplate, Counters};
use crate::gateway::{AuditFilter, Gateway, GatewayConfig, MemoryAuditSink, RateTable};
use crate::ids::Id128;
use crate::profiles::EnclaveLevel;
use crate::scheduler::{Entitlements, JobId, Phase, SchedulerConfig, Tier, TierTable};

pub const LCLSTREAM_SMALL: &str = include_str!("../../scenarios/lclstream_small.json");

const DEFAULT_ORIGIN: u64 = 1_700_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackSpec {
    #[serde(default = "default_nodes")]
    pub node_count: u32,
    #[serde(default)]
    pub entitlements: Entitlements,
    #[serde(default)]
    pub grace_seconds: Option<u64>,
    #[serde(default = "default_profile")]
    pub profile: EnclaveLevel,
    #[serde(default)]
    pub templates: Vec<ChannelTemplate>,
    #[serde(default)]
    pub rate_limits: Option<RateTable>,
}

fn default_nodes() -> u32 {
    32
}

fn default_profile() -> EnclaveLevel {
    EnclaveLevel::Development
}

impl Default for StackSpec {
    fn default() -> Self {
        serde_json::from_value(json!({})).expect("defaults")
    }
}

fn default_ttl() -> u64 {
    3600
}

fn yes() -> bool {
    true
}

fn one() -> u32 {
    1
}

fn batch() -> Tier {
    Tier::Batch
}

fn leadership() -> EnclaveLevel {
    EnclaveLevel::Leadership
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    IssueToken {
        name: String,
        subject: String,
        project: String,
        scopes: Vec<String>,
        #[serde(default = "default_ttl")]
        ttl_seconds: u64,
        #[serde(default = "yes")]
        mfa: bool,
        #[serde(default = "leadership")]
        max_enclave: EnclaveLevel,
    },
    SetProfile {
        profile: EnclaveLevel,
    },
    /// `start` and `end` are offsets from the origin.
    AddReservation {
        project: String,
        start: u64,
        end: u64,
        elevated_tier: Tier,
        node_cap: u32,
        #[serde(default = "yes")]
        approve: bool,
    },
    SubmitJobs {
        #[serde(default)]
        name: Option<String>,
        token: String,
        #[serde(default = "one")]
        count: u32,
        nodes_requested: u32,
        walltime_seconds: u64,
        #[serde(default = "batch")]
        qos_requested: Tier,
    },
    ProvisionStream {
        name: String,
        token: String,
        template_id: String,
        internal_target: String,
    },
    StartConsumer {
        name: String,
        token: String,
        stream: String,
        topic: String,
        expected_count: u64,
    },
    RunProducer {
        name: String,
        token: String,
        stream: String,
        topic: String,
        message_bytes: u64,
        rate: f64,
        duration_seconds: f64,
        #[serde(default)]
        seed: u64,
    },
    WaitConsumer {
        name: String,
    },
    TeardownStream {
        name: String,
        token: String,
    },
    Checkpoint,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::IssueToken { .. } => "issue_token",
            Action::SetProfile { .. } => "set_profile",
            Action::AddReservation { .. } => "add_reservation",
            Action::SubmitJobs { .. } => "submit_jobs",
            Action::ProvisionStream { .. } => "provision_stream",
            Action::StartConsumer { .. } => "start_consumer",
            Action::RunProducer { .. } => "run_producer",
            Action::WaitConsumer { .. } => "wait_consumer",
            Action::TeardownStream { .. } => "teardown_stream",
            Action::Checkpoint => "checkpoint",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Expectation {
    Range { min: Option<f64>, max: Option<f64> },
    EqMetric { eq_metric: String },
    Equals(Value),
}

impl Expectation {
    fn parse(v: Value) -> Self {
        if let Value::Object(m) = &v {
            if !m.is_empty() && m.keys().all(|k| k == "min" || k == "max") && m.values().all(Value::is_number) {
                let n = |k: &str| m.get(k).and_then(Value::as_f64);
                return Expectation::Range { min: n("min"), max: n("max") };
            }
            if let (1, Some(Value::String(s))) = (m.len(), m.get("eq_metric")) {
                return Expectation::EqMetric { eq_metric: s.clone() };
            }
        }
        Expectation::Equals(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Step {
    pub at: u64,
    #[serde(flatten)]
    pub action: Action,
    pub assert: Vec<(String, Expectation)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Scenario {
    pub name: String,
    pub origin: u64,
    pub stack: StackSpec,
    pub steps: Vec<Step>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default)]
    name: String,
    #[serde(default)]
    origin: Option<u64>,
    #[serde(default)]
    stack: StackSpec,
    steps: Vec<RawStep>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    at: u64,
    action: String,
    #[serde(default)]
    args: Value,
    #[serde(default, rename = "assert")]
    assertions: BTreeMap<String, Value>,
}

const SCHEDULER_FIELDS: &[&str] =
    &["utilization_busy", "utilization_useful", "preemption_count", "lost_node_seconds", "busy_nodes", "running_jobs", "pending_jobs"];
const AUDIT_FIELDS: &[&str] = &["records", "control_calls", "missing_control_calls"];
const JOB_FIELDS: &[&str] = &["wait_seconds", "started", "phase", "preempt_count"];
const STREAM_FIELDS: &[&str] =
    &["bytes_in", "bytes_out", "messages", "drops", "dropped_bytes", "buffered_bytes", "rejected_connections"];
const PRODUCER_FIELDS: &[&str] = &["sent", "rejected", "bytes", "checksum", "achieved_rate"];
const CONSUMER_FIELDS: &[&str] = &["expected", "received", "bytes", "checksum", "closed_early"];

/// Splits a metric name into `(kind, entity, field)`.
fn parse_metric(name: &str) -> Result<(&str, &str, &str), FacilityError> {
    let unknown = || FacilityError::ScenarioParse(format!("unknown metric {name:?}"));
    let (kind, rest) = name.split_once('.').ok_or_else(unknown)?;
    let (fields, entity, field) = match kind {
        "scheduler" => (SCHEDULER_FIELDS, "", rest),
        "audit" => (AUDIT_FIELDS, "", rest),
        _ => {
            let (entity, field) = rest.rsplit_once('.').ok_or_else(unknown)?;
            let fields = match kind {
                "job" => JOB_FIELDS,
                "stream" => STREAM_FIELDS,
                "producer" => PRODUCER_FIELDS,
                "consumer" => CONSUMER_FIELDS,
                _ => return Err(unknown()),
            };
            if entity.is_empty() {
                return Err(unknown());
            }
            (fields, entity, field)
        }
    };
    if !fields.contains(&field) {
        return Err(unknown());
    }
    Ok((kind, entity, field))
}

/// Parses and validates a scenario document.
pub fn load_scenario(text: &str) -> Result<Scenario, FacilityError> {
    let parse_err = |e: serde_json::Error| FacilityError::ScenarioParse(e.to_string());
    let raw: RawScenario = serde_json::from_str(text).map_err(parse_err)?;
    let mut steps = Vec::with_capacity(raw.steps.len());
    for (i, s) in raw.steps.into_iter().enumerate() {
        let mut tagged = serde_json::Map::new();
        tagged.insert("action".into(), Value::String(s.action.clone()));
        if !s.args.is_null() {
            tagged.insert("args".into(), s.args);
        }
        let action: Action = serde_json::from_value(Value::Object(tagged))
            .map_err(|e| FacilityError::ScenarioParse(format!("step {i} ({}): {e}", s.action)))?;
        let mut assert = Vec::new();
        for (metric, expected) in s.assertions {
            parse_metric(&metric)?;
            let expected = Expectation::parse(expected);
            if let Expectation::EqMetric { eq_metric } = &expected {
                parse_metric(eq_metric)?;
            }
            assert.push((metric, expected));
        }
        steps.push(Step { at: s.at, action, assert });
    }
    Ok(Scenario { name: raw.name, origin: raw.origin.unwrap_or(DEFAULT_ORIGIN), stack: raw.stack, steps })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionResult {
    pub metric: String,
    pub expected: Value,
    pub observed: Value,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub index: usize,
    pub at: u64,
    pub action: String,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub assertions: Vec<AssertionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub pass: bool,
    pub steps: Vec<StepReport>,
}

impl ScenarioReport {
    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        for s in &self.steps {
            if let Some(e) = &s.error {
                out.push(format!("step {} {}: {e}", s.index, s.action));
            }
            for a in s.assertions.iter().filter(|a| !a.pass) {
                out.push(format!("step {} {}: expected {} observed {}", s.index, a.metric, a.expected, a.observed));
            }
        }
        out
    }
}

/// A gateway client that remembers the request id of every call.
struct Tracked {
    gw: Arc<Gateway>,
    ids: Mutex<Vec<Id128>>,
}

impl GatewayApi for Tracked {
    fn call(&self, method: &str, path: &str, token: &str, body: Option<&Value>) -> Result<Value, FacilityError> {
        let body = body.map(|b| b.to_string().into_bytes()).unwrap_or_default();
        let ctx = self.gw.request(method, path, Some(token), body, std::net::Ipv4Addr::LOCALHOST.into());
        self.ids.lock().push(ctx.request_id);
        let r = self.gw.handle_request(ctx);
        super::api_result(r.status, r.body)
    }
}

struct Runner {
    api: Arc<Tracked>,
    pacer: Pacer,
    origin_ms: u64,
    admin: String,
    tokens: HashMap<String, String>,
    jobs: HashMap<String, JobId>,
    streams: HashMap<String, u32>,
    stream_final: HashMap<String, Counters>,
    running_consumers: HashMap<String, JoinHandle<Result<ConsumerSummary, FacilityError>>>,
    consumers: HashMap<String, ConsumerSummary>,
    producers: HashMap<String, ProducerSummary>,
}

fn missing(kind: &str, name: &str) -> FacilityError {
    FacilityError::Scenario(format!("no {kind} named {name:?}"))
}

impl Runner {
    fn start(sc: &Scenario, mode: ClockMode) -> Result<Self, FacilityError> {
        let (clock, pacer): (SharedClock, Pacer) = match mode {
            ClockMode::Simulated => {
                let sim = SimClock::at_secs(sc.origin);
                (Arc::new(sim.clone()), Pacer::Simulated(sim))
            }
            ClockMode::Real => (Arc::new(SystemClock), Pacer::Real(Arc::new(SystemClock))),
        };
        let origin_ms = pacer.now_millis();
        let mut cfg = GatewayConfig::new("scenario-secret");
        cfg.profile = sc.stack.profile;
        let tiers = sc.stack.grace_seconds.map(TierTable::with_grace).unwrap_or_default();
        cfg.scheduler = SchedulerConfig { node_count: sc.stack.node_count, tiers, entitlements: sc.stack.entitlements.clone() };
        cfg.templates = sc.stack.templates.clone();
        if let Some(r) = &sc.stack.rate_limits {
            cfg.rate_limits = r.clone();
        }
        let gw = Gateway::from_config_with_audit(&cfg, clock, Arc::new(MemoryAuditSink::new()))
            .map_err(|e| FacilityError::Scenario(e.to_string()))?;
        let admin = gw
            .authority()
            .issue_token(
                &IssueRequest {
                    subject: "scenario-admin".into(),
                    project: "facility".into(),
                    scopes: vec!["admin.*".into()],
                    ttl_seconds: gw.profile().max_token_ttl_seconds.min(86_400),
                    mfa: true,
                    max_enclave: EnclaveLevel::Leadership,
                },
                origin_ms / 1000,
            )
            .map_err(|e| FacilityError::Scenario(e.to_string()))?;
        Ok(Runner {
            api: Arc::new(Tracked { gw: Arc::new(gw), ids: Mutex::new(Vec::new()) }),
            pacer,
            origin_ms,
            admin,
            tokens: HashMap::new(),
            jobs: HashMap::new(),
            streams: HashMap::new(),
            stream_final: HashMap::new(),
            running_consumers: HashMap::new(),
            consumers: HashMap::new(),
            producers: HashMap::new(),
        })
    }

    fn gw(&self) -> &Gateway {
        &self.api.gw
    }

    fn token(&self, name: &str) -> Result<String, FacilityError> {
        if name == "admin" {
            return Ok(self.admin.clone());
        }
        self.tokens.get(name).cloned().ok_or_else(|| missing("token", name))
    }

    fn stream(&self, name: &str) -> Result<u32, FacilityError> {
        self.streams.get(name).copied().ok_or_else(|| missing("stream", name))
    }

    fn call(&self, method: &str, path: &str, token: &str, body: Option<Value>) -> Result<Value, FacilityError> {
        self.api.call(method, path, token, body.as_ref())
    }

    fn run_action(&mut self, action: &Action) -> Result<(), FacilityError> {
        let origin = self.origin_ms / 1000;
        match action {
            Action::IssueToken { name, subject, project, scopes, ttl_seconds, mfa, max_enclave } => {
                let body = json!({
                    "subject": subject, "project": project, "scopes": scopes,
                    "ttl_seconds": ttl_seconds, "mfa": mfa, "max_enclave": max_enclave,
                });
                let v = self.call("POST", "/v1/tokens", &self.admin, Some(body))?;
                let token = v["token"].as_str().unwrap_or_default().to_string();
                self.tokens.insert(name.clone(), token);
            }
            Action::SetProfile { profile } => {
                self.call("POST", "/v1/profile", &self.admin, Some(json!({"profile": profile})))?;
            }
            Action::AddReservation { project, start, end, elevated_tier, node_cap, approve } => {
                let body = json!({
                    "project": project, "start": origin + start, "end": origin + end,
                    "elevated_tier": elevated_tier, "node_cap": node_cap,
                });
                let v = self.call("POST", "/v1/reservations", &self.admin, Some(body))?;
                if let (true, Some(id)) = (*approve, v.get("reservation_id").and_then(Value::as_u64)) {
                    self.call("POST", &format!("/v1/reservations/{id}/approve"), &self.admin, None)?;
                }
            }
            Action::SubmitJobs { name, token, count, nodes_requested, walltime_seconds, qos_requested } => {
                let token = self.token(token)?;
                for i in 0..*count {
                    let mut body = json!({
                        "nodes_requested": nodes_requested, "walltime_seconds": walltime_seconds,
                        "qos_requested": qos_requested,
                    });
                    if let Some(n) = name {
                        body["name"] = json!(n);
                    }
                    let v = self.call("POST", "/v1/jobs", &token, Some(body))?;
                    if let (Some(n), Some(id)) = (name, v["job_id"].as_u64()) {
                        let key = if *count == 1 { n.clone() } else { format!("{n}.{i}") };
                        self.jobs.insert(key, JobId(id));
                    }
                }
            }
            Action::ProvisionStream { name, token, template_id, internal_target } => {
                let body = json!({"template_id": template_id, "internal_target": internal_target});
                let v = self.call("POST", "/v1/streams", &self.token(token)?, Some(body))?;
                let id = v["channel_id"].as_u64().ok_or_else(|| FacilityError::Scenario("no channel_id".into()))?;
                self.streams.insert(name.clone(), id as u32);
            }
            Action::StartConsumer { name, token, stream, topic, expected_count } => {
                let cfg = ConsumerConfig {
                    token: self.token(token)?,
                    channel_id: self.stream(stream)?,
                    topic: topic.clone(),
                    expected_count: *expected_count,
                    idle_timeout_seconds: 30,
                };
                let consumer = Consumer::connect(self.api.as_ref(), &cfg)?;
                let handle = thread::Builder::new()
                    .name(format!("consumer-{name}"))
                    .spawn(move || consumer.run())
                    .map_err(|e| FacilityError::Scenario(e.to_string()))?;
                self.running_consumers.insert(name.clone(), handle);
            }
            Action::RunProducer { name, token, stream, topic, message_bytes, rate, duration_seconds, seed } => {
                let cfg = ProducerConfig {
                    token: self.token(token)?,
                    template_id: String::new(),
                    internal_target: String::new(),
                    channel_id: Some(self.stream(stream)?),
                    message_bytes: *message_bytes,
                    rate: *rate,
                    duration_seconds: *duration_seconds,
                    topic: topic.clone(),
                    seed: *seed,
                    teardown: false,
                };
                let summary = super::run_producer(self.api.as_ref(), &cfg, &self.pacer)?;
                self.producers.insert(name.clone(), summary);
            }
            Action::WaitConsumer { name } => {
                let handle = self.running_consumers.remove(name).ok_or_else(|| missing("consumer", name))?;
                let summary = handle.join().map_err(|_| FacilityError::Scenario(format!("consumer {name} panicked")))??;
                self.consumers.insert(name.clone(), summary);
            }
            Action::TeardownStream { name, token } => {
                let id = self.stream(name)?;
                let v = self.call("DELETE", &format!("/v1/streams/{id}"), &self.token(token)?, None)?;
                let counters = serde_json::from_value(v["counters"].clone())
                    .map_err(|e| FacilityError::Scenario(format!("bad counters: {e}")))?;
                self.stream_final.insert(name.clone(), counters);
            }
            Action::Checkpoint => {}
        }
        Ok(())
    }

    fn observe(&self, metric: &str) -> Result<Value, FacilityError> {
        let (kind, entity, field) = parse_metric(metric)?;
        let sched = self.gw().scheduler();
        let sched_err = |e: crate::scheduler::SchedError| FacilityError::Scenario(e.to_string());
        Ok(match kind {
            "scheduler" => {
                sched.sync().map_err(sched_err)?;
                match field {
                    "busy_nodes" => json!(sched.call(|s| s.busy_nodes()).map_err(sched_err)?),
                    "running_jobs" | "pending_jobs" => {
                        let phase = if field == "running_jobs" { Phase::Running } else { Phase::Pending };
                        json!(sched.call(move |s| s.jobs().filter(|j| j.state.phase == phase).count()).map_err(sched_err)?)
                    }
                    _ => serde_json::to_value(sched.metrics().map_err(sched_err)?).unwrap_or_default()[field].clone(),
                }
            }
            "audit" => {
                let ids = self.api.ids.lock().clone();
                match field {
                    "records" => json!(self.gw().audit().len()),
                    "control_calls" => json!(ids.len()),
                    _ => {
                        let recorded: HashSet<Id128> = self
                            .gw()
                            .audit()
                            .query(&AuditFilter::default())
                            .map_err(|e| FacilityError::Scenario(e.to_string()))?
                            .into_iter()
                            .map(|r| r.request_id)
                            .collect();
                        json!(ids.iter().filter(|id| !recorded.contains(id)).count())
                    }
                }
            }
            "job" => {
                let id = *self.jobs.get(entity).ok_or_else(|| missing("job", entity))?;
                sched.sync().map_err(sched_err)?;
                let info = sched.call(move |s| s.job(id)).map_err(sched_err)?.ok_or_else(|| missing("job", entity))?;
                match field {
                    "wait_seconds" => json!(info.first_started_at.map(|s| s - info.submit_time)),
                    "started" => json!(info.first_started_at.is_some()),
                    "phase" => json!(info.state.phase),
                    _ => json!(info.state.preempt_count),
                }
            }
            "stream" => {
                let counters = match self.stream_final.get(entity) {
                    Some(c) => *c,
                    None => self.gw().dsn().counters(self.stream(entity)?)?,
                };
                serde_json::to_value(counters).unwrap_or_default()[field].clone()
            }
            "producer" => {
                let p = self.producers.get(entity).ok_or_else(|| missing("producer", entity))?;
                serde_json::to_value(p).unwrap_or_default()[field].clone()
            }
            _ => {
                let c = self.consumers.get(entity).ok_or_else(|| missing("consumer", entity))?;
                serde_json::to_value(c).unwrap_or_default()[field].clone()
            }
        })
    }

    fn check(&self, metric: &str, expected: &Expectation) -> AssertionResult {
        let observed = self.observe(metric).unwrap_or_else(|e| json!({"error": e.to_string()}));
        let pass = match expected {
            Expectation::Equals(v) => match (v.as_f64(), observed.as_f64()) {
                (Some(a), Some(b)) => a == b,
                _ => *v == observed,
            },
            Expectation::Range { min, max } => observed
                .as_f64()
                .is_some_and(|x| min.map_or(true, |m| x >= m) && max.map_or(true, |m| x <= m)),
            Expectation::EqMetric { eq_metric } => {
                self.observe(eq_metric).is_ok_and(|other| other == observed && !observed.is_null())
            }
        };
        AssertionResult {
            metric: metric.to_string(),
            expected: serde_json::to_value(expected).unwrap_or_default(),
            observed,
            pass,
        }
    }
}

/// Runs every step in order on a fresh stack. Simulated mode jumps the
/// clock to each step's `at`; real mode sleeps until it.
pub fn run_scenario(sc: &Scenario, mode: ClockMode) -> Result<ScenarioReport, FacilityError> {
    let mut runner = Runner::start(sc, mode)?;
    let mut steps = Vec::with_capacity(sc.steps.len());
    for (index, step) in sc.steps.iter().enumerate() {
        runner.pacer.wait_until(runner.origin_ms + step.at * 1000);
        let result = runner.run_action(&step.action);
        let assertions = step.assert.iter().map(|(m, e)| runner.check(m, e)).collect::<Vec<_>>();
        steps.push(StepReport {
            index,
            at: step.at,
            action: step.action.name().to_string(),
            ok: result.is_ok(),
            error: result.err().map(|e| e.to_string()),
            assertions,
        });
    }
    for (_, h) in runner.running_consumers.drain() {
        let _ = h.join();
    }
    let pass = steps.iter().all(|s| s.ok && s.assertions.iter().all(|a| a.pass));
    Ok(ScenarioReport { name: sc.name.clone(), pass, steps })
}
