use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Service {
    Status,
    Scheduler,
    Dsn,
    Admin,
}

/// Token-bucket class an endpoint draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointClass {
    Read,
    Submit,
    Admin,
    StreamProvision,
}

impl EndpointClass {
    pub const ALL: [EndpointClass; 4] =
        [EndpointClass::Read, EndpointClass::Submit, EndpointClass::Admin, EndpointClass::StreamProvision];
}

/// Which backend operation a request maps to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Status,
    SubmitJob,
    GetJob,
    CancelJob,
    SubmitWorkflow,
    ProvisionStream,
    GetStream,
    TeardownStream,
    DelegateToken,
    LoadPolicies,
    AddReservation,
    ApproveReservation,
    ListReservations,
    QueryAudit,
    Metrics,
    IssueToken,
    RevokeToken,
    AddTemplate,
    SetProfile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RouteMatch {
    pub service: Service,
    pub endpoint: Endpoint,
    /// Scope-vocabulary action the policy engine sees.
    pub action: &'static str,
    /// Request path without the query string.
    pub resource: String,
    pub class: EndpointClass,
    /// The `{id}` path segment, when the route has one.
    pub id: Option<String>,
}

/// Actions that any valid token may attempt; the policy engine still
/// decides.
pub const UNSCOPED_ACTIONS: &[&str] = &["tokens.delegate"];

struct Row {
    method: &'static str,
    pattern: &'static str,
    service: Service,
    endpoint: Endpoint,
    action: &'static str,
    class: EndpointClass,
}

const fn row(
    method: &'static str,
    pattern: &'static str,
    service: Service,
    endpoint: Endpoint,
    action: &'static str,
    class: EndpointClass,
) -> Row {
    Row { method, pattern, service, endpoint, action, class }
}

use EndpointClass as C;
use Service as S;

const TABLE: &[Row] = &[
    row("GET", "/v1/status", S::Status, Endpoint::Status, "status.read", C::Read),
    row("POST", "/v1/jobs", S::Scheduler, Endpoint::SubmitJob, "jobs.submit", C::Submit),
    row("GET", "/v1/jobs/{id}", S::Scheduler, Endpoint::GetJob, "jobs.read", C::Read),
    row("DELETE", "/v1/jobs/{id}", S::Scheduler, Endpoint::CancelJob, "jobs.cancel", C::Submit),
    row("POST", "/v1/workflows", S::Scheduler, Endpoint::SubmitWorkflow, "jobs.submit", C::Submit),
    row("POST", "/v1/streams", S::Dsn, Endpoint::ProvisionStream, "streams.provision", C::StreamProvision),
    row("GET", "/v1/streams/{id}", S::Dsn, Endpoint::GetStream, "streams.read", C::Read),
    row("DELETE", "/v1/streams/{id}", S::Dsn, Endpoint::TeardownStream, "streams.provision", C::StreamProvision),
    row("POST", "/v1/tokens/delegate", S::Admin, Endpoint::DelegateToken, "tokens.delegate", C::Submit),
    row("POST", "/v1/policies", S::Admin, Endpoint::LoadPolicies, "admin.policies", C::Admin),
    row("POST", "/v1/reservations", S::Admin, Endpoint::AddReservation, "admin.reservations", C::Admin),
    row("GET", "/v1/reservations", S::Admin, Endpoint::ListReservations, "admin.reservations", C::Admin),
    row("POST", "/v1/reservations/{id}/approve", S::Admin, Endpoint::ApproveReservation, "admin.reservations", C::Admin),
    row("GET", "/v1/audit", S::Admin, Endpoint::QueryAudit, "admin.audit", C::Admin),
    row("GET", "/v1/metrics", S::Admin, Endpoint::Metrics, "admin.metrics", C::Admin),
    row("POST", "/v1/tokens", S::Admin, Endpoint::IssueToken, "admin.tokens", C::Admin),
    row("DELETE", "/v1/tokens/{id}", S::Admin, Endpoint::RevokeToken, "admin.tokens", C::Admin),
    row("POST", "/v1/templates", S::Admin, Endpoint::AddTemplate, "admin.templates", C::Admin),
    row("POST", "/v1/profile", S::Admin, Endpoint::SetProfile, "admin.profile", C::Admin),
];

fn match_pattern(pattern: &str, path: &str) -> Option<Option<String>> {
    let mut id = None;
    let mut p = pattern.split('/');
    let mut q = path.split('/');
    loop {
        match (p.next(), q.next()) {
            (None, None) => return Some(id),
            (Some("{id}"), Some(seg)) if !seg.is_empty() => id = Some(seg.to_string()),
            (Some(a), Some(b)) if a == b => {}
            _ => return None,
        }
    }
}

/// Looks up `(method, path)` in the routing table. The query string, if
/// any, is ignored.
pub fn route(method: &str, path: &str) -> Option<RouteMatch> {
    let path = path.split('?').next().unwrap_or(path);
    let path = if path.len() > 1 { path.trim_end_matches('/') } else { path };
    TABLE.iter().find_map(|r| {
        if !r.method.eq_ignore_ascii_case(method) {
            return None;
        }
        let id = match_pattern(r.pattern, path)?;
        Some(RouteMatch {
            service: r.service,
            endpoint: r.endpoint,
            action: r.action,
            resource: path.to_string(),
            class: r.class,
            id,
        })
    })
}

/// Every `(method, pattern, action)` row, for documentation and listings.
pub fn table() -> impl Iterator<Item = (&'static str, &'static str, &'static str)> {
    TABLE.iter().map(|r| (r.method, r.pattern, r.action))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let r = route("POST", "/v1/jobs").unwrap();
        assert_eq!((r.service, r.action, r.resource.as_str()), (Service::Scheduler, "jobs.submit", "/v1/jobs"));
        let r = route("GET", "/v1/streams/7").unwrap();
        assert_eq!((r.service, r.action, r.resource.as_str()), (Service::Dsn, "streams.read", "/v1/streams/7"));
        assert_eq!(r.id.as_deref(), Some("7"));
        assert!(route("GET", "/v1/nope").is_none());
    }

    #[test]
    fn methods_and_queries() {
        assert!(route("PUT", "/v1/jobs").is_none());
        assert_eq!(route("GET", "/v1/audit?subject=alice").unwrap().resource, "/v1/audit");
        assert_eq!(route("POST", "/v1/reservations/3/approve").unwrap().id.as_deref(), Some("3"));
        assert!(route("GET", "/v1/jobs/").is_none());
        assert!(route("GET", "/v1/jobs/1/extra").is_none());
        assert_eq!(route("POST", "/v1/tokens/delegate").unwrap().endpoint, Endpoint::DelegateToken);
        assert_eq!(route("DELETE", "/v1/tokens/abc").unwrap().endpoint, Endpoint::RevokeToken);
    }

    #[test]
    fn every_action_is_in_the_vocabulary() {
        for (_, _, action) in table() {
            let scoped = crate::auth::Scope::ALL.iter().any(|s| s.covers(action));
            assert!(scoped || UNSCOPED_ACTIONS.contains(&action), "{action}");
        }
    }
}
