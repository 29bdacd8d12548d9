//! Request pipeline in front of the scheduler and the streaming node.
//!
//! Every request runs the same fixed stages:
//!
//! 1. bearer token validation (401)
//! 2. routing (404)
//! 3. authorization: token scope, enclave ceiling, policy set (403)
//! 4. per-subject token-bucket rate limiting (429)
//! 5. the backend call (its own errors; 502 if it is unreachable)
//!
//! and then exactly one audit record. If the audit store is down no
//! request reaches a backend and the caller sees 503.
//!
//! The gateway is transport-agnostic: an HTTP front end builds a
//! [`RequestContext`] and renders the returned [`Response`].

mod audit;
mod config;
mod ratelimit;
mod routes;

pub use audit::{
    AuditError, AuditFilter, AuditRecord, AuditSink, FailingAuditSink, JsonlAuditSink, MemoryAuditSink, MAX_BATCH,
    MAX_BATCH_DELAY,
};
pub use config::GatewayConfig;
pub use ratelimit::{BucketKey, BucketSpec, BucketStore, RateBucket, RateTable};
pub use routes::{route, table as route_table, Endpoint, EndpointClass, RouteMatch, Service, UNSCOPED_ACTIONS};

use std::collections::BTreeMap;
use std::net::IpAddr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::auth::{AuthError, Claims, IssueRequest, TokenAuthority, TokenLimits};
use crate::clock::SharedClock;
use crate::dsn::{ChannelTemplate, DsnError, DsnService, ProvisionRequest};
use crate::ids::{Id128, IdSource};
use crate::policy::{load_policies, PolicyError, PolicySet, RequestCtx, Verdict};
use crate::profiles::{apply_profile, EnclaveLevel, EnvironmentProfile, PolicyKnobs, ProfileError, ProfileTable};
use crate::scheduler::{JobId, JobSpec, ReservationWindow, SchedError, SchedulerHandle, SchedulerService, WorkflowJob};

/// Policy document used when the configuration names none.
pub const BASELINE_POLICY: &str = include_str!("../../policies/baseline.json");

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("INVALID_CONFIG: {0}")]
    Config(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error(transparent)]
    Scheduler(#[from] SchedError),
    #[error(transparent)]
    Dsn(#[from] DsnError),
}

impl GatewayError {
    pub fn code(&self) -> &str {
        match self {
            GatewayError::Config(_) => "INVALID_CONFIG",
            GatewayError::Policy(e) => e.code(),
            GatewayError::Profile(e) => e.code(),
            GatewayError::Audit(e) => e.code(),
            GatewayError::Auth(e) => e.code(),
            GatewayError::Scheduler(e) => e.code(),
            GatewayError::Dsn(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestContext {
    pub request_id: Id128,
    pub method: String,
    /// Path, optionally followed by `?query`.
    pub path: String,
    pub token: Option<String>,
    pub body: Vec<u8>,
    pub source_ip: IpAddr,
    /// Unix milliseconds.
    pub received_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub body: Value,
}

impl Response {
    fn error(status: u16, code: &str, message: &str) -> Self {
        Response { status, body: json!({"error": code, "message": message}) }
    }

    /// The error code of a failed response.
    pub fn error_code(&self) -> Option<&str> {
        self.body.get("error").and_then(Value::as_str)
    }
}

#[derive(Debug)]
struct Failure {
    status: u16,
    code: String,
    message: String,
}

impl Failure {
    fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Failure { status, code: code.to_string(), message: message.into() }
    }
}

impl From<SchedError> for Failure {
    fn from(e: SchedError) -> Self {
        let status = match &e {
            SchedError::Forbidden(_) | SchedError::QosNotEntitled { .. } => 403,
            SchedError::UnknownJob(_) => 404,
            SchedError::Unavailable => 502,
            SchedError::ClockRegression { .. } => 500,
            _ => 400,
        };
        Failure::new(status, e.code(), e.to_string())
    }
}

impl From<DsnError> for Failure {
    fn from(e: DsnError) -> Self {
        let status = match &e {
            DsnError::Forbidden(_) | DsnError::ModeNotAllowed(_) | DsnError::TargetNotAllowed(_) => 403,
            DsnError::UnknownChannel(_) | DsnError::UnknownTemplate(_) => 404,
            DsnError::Io(_) => 502,
            _ => 400,
        };
        Failure::new(status, e.code(), e.to_string())
    }
}

impl From<AuthError> for Failure {
    fn from(e: AuthError) -> Self {
        let status = match &e {
            AuthError::ScopeEscalation(_)
            | AuthError::TtlEscalation
            | AuthError::DepthExceeded { .. }
            | AuthError::MfaRequired => 403,
            AuthError::UnknownToken(_) => 404,
            AuthError::Io(_) => 503,
            _ => 400,
        };
        Failure::new(status, e.code(), e.to_string())
    }
}

struct Outcome {
    status: u16,
    body: Value,
}

fn ok(status: u16, body: Value) -> Result<Outcome, Failure> {
    Ok(Outcome { status, body })
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure::new(400, "INVALID_REQUEST", e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn path_id<T: std::str::FromStr>(r: &RouteMatch) -> Result<T, Failure> {
    r.id.as_deref()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Failure::new(400, "INVALID_REQUEST", format!("bad id in {}", r.resource)))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DelegateBody {
    scopes: Vec<String>,
    ttl_seconds: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileBody {
    profile: EnclaveLevel,
}

#[derive(Debug, Deserialize)]
struct WorkflowBody {
    jobs: Vec<WorkflowJob>,
}

/// Reservation requests waiting for an admin's approval.
#[derive(Debug, Default)]
struct Approvals {
    next_id: u64,
    pending: BTreeMap<u64, ReservationWindow>,
}

/// The assembled gateway. Shareable across threads.
pub struct Gateway {
    authority: Arc<TokenAuthority>,
    policies: RwLock<Arc<PolicySet>>,
    profiles: ProfileTable,
    profile: RwLock<Arc<EnvironmentProfile>>,
    base_knobs: PolicyKnobs,
    knobs: RwLock<PolicyKnobs>,
    buckets: BucketStore,
    audit: Arc<dyn AuditSink>,
    scheduler: SchedulerHandle,
    _scheduler_service: Option<SchedulerService>,
    dsn: DsnService,
    clock: SharedClock,
    ids: IdSource,
    approvals: Mutex<Approvals>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("profile", &self.profile.read().name).finish_non_exhaustive()
    }
}

/// Parts for [`Gateway::new`].
pub struct GatewayParts {
    pub authority: Arc<TokenAuthority>,
    pub policies: PolicySet,
    pub profiles: ProfileTable,
    pub profile: EnclaveLevel,
    pub rate_limits: RateTable,
    pub audit: Arc<dyn AuditSink>,
    pub scheduler: SchedulerHandle,
    pub dsn: DsnService,
    pub clock: SharedClock,
}

impl Gateway {
    pub fn new(parts: GatewayParts) -> Self {
        let profile = parts.profiles.get(parts.profile).clone();
        let gw = Gateway {
            authority: parts.authority,
            policies: RwLock::new(Arc::new(parts.policies)),
            profiles: parts.profiles,
            profile: RwLock::new(Arc::new(profile.clone())),
            base_knobs: PolicyKnobs::unrestricted(),
            knobs: RwLock::new(PolicyKnobs::unrestricted()),
            buckets: BucketStore::new(parts.rate_limits),
            audit: parts.audit,
            scheduler: parts.scheduler,
            _scheduler_service: None,
            dsn: parts.dsn,
            clock: parts.clock,
            ids: IdSource::random(),
            approvals: Mutex::new(Approvals::default()),
        };
        gw.apply(profile);
        gw
    }

    /// Builds the whole stack from a configuration: token authority,
    /// scheduler thread, streaming node, policies, and audit sink.
    pub fn from_config(config: &GatewayConfig, clock: SharedClock) -> Result<Self, GatewayError> {
        let audit: Arc<dyn AuditSink> = match &config.audit_path {
            Some(p) => Arc::new(JsonlAuditSink::open(p)?),
            None => Arc::new(MemoryAuditSink::new()),
        };
        Self::from_config_with_audit(config, clock, audit)
    }

    pub fn from_config_with_audit(
        config: &GatewayConfig,
        clock: SharedClock,
        audit: Arc<dyn AuditSink>,
    ) -> Result<Self, GatewayError> {
        let read = |p: &std::path::Path| {
            std::fs::read_to_string(p).map_err(|e| GatewayError::Config(format!("{}: {e}", p.display())))
        };
        let profiles = match &config.profile_overrides_path {
            Some(p) => ProfileTable::with_overrides(&read(p)?)?,
            None => ProfileTable::default(),
        };
        let policies = match &config.policy_path {
            Some(p) => load_policies(&read(p)?)?,
            None => load_policies(BASELINE_POLICY)?,
        };
        let limits = TokenLimits::from(profiles.get(config.profile));
        let mut authority = TokenAuthority::new(config.secret.as_bytes(), limits);
        if let Some(j) = &config.token_journal {
            authority = authority.open_journal(j)?;
        }
        let authority = Arc::new(authority);
        let service = SchedulerService::spawn(config.scheduler.clone(), Arc::clone(&clock))?;
        let dsn = DsnService::new(config.dsn.clone(), Arc::clone(&authority), Arc::clone(&clock));
        for t in &config.templates {
            dsn.install_template(t.clone())?;
        }
        let mut gw = Gateway::new(GatewayParts {
            authority,
            policies,
            profiles,
            profile: config.profile,
            rate_limits: config.rate_limits.clone(),
            audit,
            scheduler: service.handle(),
            dsn,
            clock,
        });
        gw._scheduler_service = Some(service);
        Ok(gw)
    }

    pub fn authority(&self) -> &Arc<TokenAuthority> {
        &self.authority
    }

    pub fn scheduler(&self) -> &SchedulerHandle {
        &self.scheduler
    }

    pub fn dsn(&self) -> &DsnService {
        &self.dsn
    }

    pub fn audit(&self) -> &Arc<dyn AuditSink> {
        &self.audit
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn buckets(&self) -> &BucketStore {
        &self.buckets
    }

    pub fn profile(&self) -> Arc<EnvironmentProfile> {
        Arc::clone(&self.profile.read())
    }

    pub fn policies(&self) -> Arc<PolicySet> {
        Arc::clone(&self.policies.read())
    }

    /// Knobs currently in force after the active profile clamped them.
    pub fn effective_knobs(&self) -> PolicyKnobs {
        self.knobs.read().clone()
    }

    /// Atomically replaces the policy set.
    pub fn set_policies(&self, set: PolicySet) {
        *self.policies.write() = Arc::new(set);
    }

    /// Switches the active profile. Tokens already issued keep their
    /// claims; only later issuance and requests see the new limits.
    pub fn set_profile(&self, level: EnclaveLevel) -> Arc<EnvironmentProfile> {
        let profile = self.profiles.get(level).clone();
        self.apply(profile);
        self.profile()
    }

    fn apply(&self, profile: EnvironmentProfile) {
        let knobs = apply_profile(&profile, &self.base_knobs);
        self.authority.set_limits(TokenLimits {
            max_ttl_seconds: knobs.max_token_ttl_seconds,
            max_delegation_depth: knobs.max_delegation_depth,
            mfa_required: knobs.mfa_required,
        });
        self.dsn.set_allowed_modes(knobs.allowed_stream_modes.clone());
        let mut cur = self.profile.write();
        *self.knobs.write() = knobs;
        *cur = Arc::new(profile);
    }

    /// A context stamped with a fresh request id and the current time.
    pub fn request(
        &self,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: impl Into<Vec<u8>>,
        source_ip: IpAddr,
    ) -> RequestContext {
        RequestContext {
            request_id: self.ids.next_id(),
            method: method.to_string(),
            path: path.to_string(),
            token: token.map(str::to_string),
            body: body.into(),
            source_ip,
            received_at: self.clock.now_millis(),
        }
    }

    /// Runs the full pipeline and writes the audit record.
    pub fn handle_request(&self, ctx: RequestContext) -> Response {
        let mut subject = "anonymous".to_string();
        let mut action = "-".to_string();
        let mut resource = ctx.path.split('?').next().unwrap_or_default().to_string();
        let mut matched_rule = None;
        let result = self.pipeline(&ctx, &mut subject, &mut action, &mut resource, &mut matched_rule);
        let (response, reason) = match result {
            Ok(o) => (Response { status: o.status, body: o.body }, matched_rule.unwrap_or_else(|| "ok".into())),
            Err(f) => (Response::error(f.status, &f.code, &f.message), f.code),
        };
        let record = AuditRecord {
            ts: ctx.received_at,
            request_id: ctx.request_id,
            subject,
            action,
            resource,
            verdict: if response.status < 400 { Verdict::Allow } else { Verdict::Deny },
            reason,
            http_status: response.status,
            latency_ms: self.clock.now_millis().saturating_sub(ctx.received_at),
        };
        match self.audit.append(record) {
            Ok(()) => response,
            Err(e) => Response::error(503, e.code(), &e.to_string()),
        }
    }

    fn pipeline(
        &self,
        ctx: &RequestContext,
        subject: &mut String,
        action: &mut String,
        resource: &mut String,
        matched_rule: &mut Option<String>,
    ) -> Result<Outcome, Failure> {
        let now = ctx.received_at / 1000;
        let token = ctx.token.as_deref().ok_or_else(|| Failure::new(401, "UNAUTHENTICATED", "missing bearer token"))?;
        let claims = self.authority.validate_token(token, now).map_err(|e| Failure::new(401, e.code(), e.to_string()))?;
        *subject = claims.subject.clone();

        let r = route(&ctx.method, &ctx.path)
            .ok_or_else(|| Failure::new(404, "NOT_FOUND", format!("{} {}", ctx.method, resource)))?;
        *action = r.action.to_string();
        *resource = r.resource.clone();

        let profile = self.profile();
        if !claims.permits(r.action) && !UNSCOPED_ACTIONS.contains(&r.action) {
            return Err(Failure::new(403, "FORBIDDEN", format!("token does not grant {}", r.action)));
        }
        if claims.max_enclave < profile.name {
            return Err(Failure::new(
                403,
                "ENCLAVE_NOT_PERMITTED",
                format!("token is limited to {}, gateway runs {}", claims.max_enclave, profile.name),
            ));
        }
        let decision = self.policies().evaluate(&RequestCtx {
            subject: claims.subject.clone(),
            project: claims.project.clone(),
            action: r.action.to_string(),
            resource: r.resource.clone(),
            now,
            source_ip: ctx.source_ip,
            enclave: profile.name,
        });
        if decision.verdict == Verdict::Deny {
            return Err(Failure::new(403, "POLICY_DENY", decision.reason));
        }
        *matched_rule = decision.matched_rule;

        if !self.buckets.rate_limit_check(&(claims.subject.clone(), r.class), 1, ctx.received_at) {
            return Err(Failure::new(429, "RATE_LIMITED", format!("{:?} budget exhausted", r.class)));
        }
        if !self.audit.healthy() {
            return Err(Failure::new(503, "STORE_UNAVAILABLE", "audit store unavailable"));
        }
        self.dispatch(&r, &claims, ctx, &profile)
    }

    fn dispatch(
        &self,
        r: &RouteMatch,
        claims: &Claims,
        ctx: &RequestContext,
        profile: &EnvironmentProfile,
    ) -> Result<Outcome, Failure> {
        let now = ctx.received_at / 1000;
        match r.endpoint {
            Endpoint::Status => ok(
                200,
                json!({
                    "status": "ok",
                    "profile": profile.name,
                    "level": profile.level,
                    "now": self.scheduler.sync()?,
                    "nodes": self.scheduler.node_count()?,
                    "subject": claims.subject,
                    "project": claims.project,
                }),
            ),
            Endpoint::SubmitJob => {
                let spec: JobSpec = parse_body(&ctx.body)?;
                let id = self.scheduler.submit_job(spec, claims)?;
                ok(201, json!({"job_id": id}))
            }
            Endpoint::GetJob => ok(200, to_json(&self.scheduler.job(JobId(path_id(r)?), claims)?)),
            Endpoint::CancelJob => {
                let cancelled = self.scheduler.cancel_job(JobId(path_id(r)?), claims)?;
                ok(200, json!({"cancelled": cancelled}))
            }
            Endpoint::SubmitWorkflow => {
                let body: WorkflowBody = parse_body(&ctx.body)?;
                let ids = self.scheduler.submit_workflow(body.jobs, claims)?;
                ok(201, json!({"job_ids": ids}))
            }
            Endpoint::ProvisionStream => {
                let req: ProvisionRequest = parse_body(&ctx.body)?;
                ok(201, to_json(&self.dsn.provision_channel(&req, claims)?))
            }
            Endpoint::GetStream => ok(200, to_json(&self.dsn.channel(path_id(r)?, claims)?)),
            Endpoint::TeardownStream => {
                let counters = self.dsn.teardown_channel(path_id(r)?, claims)?;
                ok(200, json!({"state": "closed", "counters": counters}))
            }
            Endpoint::DelegateToken => {
                let body: DelegateBody = parse_body(&ctx.body)?;
                let token = ctx.token.as_deref().unwrap_or_default();
                let child = self.authority.delegate_token(token, &body.scopes, body.ttl_seconds, now)?;
                ok(201, self.token_body(&child))
            }
            Endpoint::IssueToken => {
                let req: IssueRequest = parse_body(&ctx.body)?;
                let token = self.authority.issue_token(&req, now)?;
                ok(201, self.token_body(&token))
            }
            Endpoint::RevokeToken => {
                let id = r
                    .id
                    .as_deref()
                    .and_then(Id128::from_hex)
                    .ok_or_else(|| Failure::new(400, "INVALID_REQUEST", "token id must be 32 hex digits"))?;
                ok(200, json!({"revoked": self.authority.revoke_token(&id)?}))
            }
            Endpoint::LoadPolicies => {
                let text = std::str::from_utf8(&ctx.body)
                    .map_err(|_| Failure::new(400, "INVALID_REQUEST", "policy document is not UTF-8"))?;
                let set = load_policies(text).map_err(|e| Failure::new(400, e.code(), e.to_string()))?;
                let rules = set.len();
                self.set_policies(set);
                ok(200, json!({"rules": rules}))
            }
            Endpoint::AddReservation => {
                let window: ReservationWindow = parse_body(&ctx.body)?;
                if profile.reservation_requires_approval {
                    if window.start >= window.end {
                        return Err(SchedError::InvalidWindow("start must precede end".into()).into());
                    }
                    let mut a = self.approvals.lock();
                    a.next_id += 1;
                    let id = a.next_id;
                    a.pending.insert(id, window);
                    ok(202, json!({"status": "pending-approval", "reservation_id": id}))
                } else {
                    let w = self.scheduler.add_reservation(window, claims)?;
                    ok(201, json!({"status": "active", "window": w}))
                }
            }
            Endpoint::ApproveReservation => {
                let id: u64 = path_id(r)?;
                let window = self
                    .approvals
                    .lock()
                    .pending
                    .remove(&id)
                    .ok_or_else(|| Failure::new(404, "UNKNOWN_RESERVATION", format!("no pending reservation {id}")))?;
                match self.scheduler.add_reservation(window.clone(), claims) {
                    Ok(w) => ok(201, json!({"status": "active", "window": w})),
                    Err(e) => {
                        self.approvals.lock().pending.insert(id, window);
                        Err(e.into())
                    }
                }
            }
            Endpoint::ListReservations => {
                let pending: Vec<Value> = self
                    .approvals
                    .lock()
                    .pending
                    .iter()
                    .map(|(id, w)| json!({"reservation_id": id, "window": w}))
                    .collect();
                ok(200, json!({"windows": self.scheduler.list_reservations()?, "pending": pending}))
            }
            Endpoint::QueryAudit => {
                let query = ctx.path.split_once('?').map(|(_, q)| q).unwrap_or("");
                let filter: AuditFilter = serde_urlencoded::from_str(query)
                    .map_err(|e| Failure::new(400, "INVALID_REQUEST", e.to_string()))?;
                let records = self.audit.query(&filter).map_err(|e| Failure::new(503, e.code(), e.to_string()))?;
                ok(200, json!({"records": records}))
            }
            Endpoint::Metrics => ok(
                200,
                json!({
                    "scheduler": self.scheduler.metrics()?,
                    "streams": self.dsn.channels(),
                    "audit_records": self.audit.len(),
                }),
            ),
            Endpoint::AddTemplate => {
                let t: ChannelTemplate = parse_body(&ctx.body)?;
                let id = t.template_id.clone();
                self.dsn.add_template(t, claims)?;
                ok(201, json!({"template_id": id}))
            }
            Endpoint::SetProfile => {
                let body: ProfileBody = parse_body(&ctx.body)?;
                let p = self.set_profile(body.profile);
                ok(200, json!({"profile": *p, "effective": self.effective_knobs()}))
            }
        }
    }

    fn token_body(&self, token: &str) -> Value {
        match self.authority.codec().decode(token) {
            Ok(c) => json!({"token": token, "token_id": c.token_id, "expires_at": c.expires_at}),
            Err(_) => json!({"token": token}),
        }
    }
}
