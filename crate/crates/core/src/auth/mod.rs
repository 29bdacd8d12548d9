//! Time-limited bearer tokens: issue once, delegate attenuated copies to
//! software, revoke whole delegation subtrees.

mod scope;
mod token;

pub use scope::{Scope, UnknownScope};
pub use token::{Claims, TokenCodec};

use std::collections::{BTreeSet, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{Id128, IdSource};
use crate::profiles::{EnclaveLevel, EnvironmentProfile};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AuthError {
    #[error("TTL_EXCEEDS_PROFILE: ttl {requested}s exceeds limit {limit}s")]
    TtlExceedsProfile { requested: u64, limit: u64 },
    #[error("INVALID_TTL: ttl must be positive")]
    InvalidTtl,
    #[error("UNKNOWN_SCOPE: {0}")]
    UnknownScope(String),
    #[error("EMPTY_SCOPES: a token needs at least one scope")]
    EmptyScopes,
    #[error("MFA_REQUIRED: the active profile requires multifactor issuance")]
    MfaRequired,
    #[error("BAD_SIGNATURE")]
    BadSignature,
    #[error("EXPIRED")]
    Expired,
    #[error("REVOKED")]
    Revoked,
    #[error("MALFORMED: {0}")]
    Malformed(String),
    #[error("SCOPE_ESCALATION: {0}")]
    ScopeEscalation(String),
    #[error("TTL_ESCALATION: child would outlive its parent")]
    TtlEscalation,
    #[error("DEPTH_EXCEEDED: delegation depth {depth} exceeds limit {limit}")]
    DepthExceeded { depth: u32, limit: u32 },
    #[error("UNKNOWN_TOKEN: {0}")]
    UnknownToken(String),
    #[error("REGISTRY_IO: {0}")]
    Io(String),
}

impl AuthError {
    pub fn code(&self) -> &'static str {
        match self {
            AuthError::TtlExceedsProfile { .. } => "TTL_EXCEEDS_PROFILE",
            AuthError::InvalidTtl => "INVALID_TTL",
            AuthError::UnknownScope(_) => "UNKNOWN_SCOPE",
            AuthError::EmptyScopes => "EMPTY_SCOPES",
            AuthError::MfaRequired => "MFA_REQUIRED",
            AuthError::BadSignature => "BAD_SIGNATURE",
            AuthError::Expired => "EXPIRED",
            AuthError::Revoked => "REVOKED",
            AuthError::Malformed(_) => "MALFORMED",
            AuthError::ScopeEscalation(_) => "SCOPE_ESCALATION",
            AuthError::TtlEscalation => "TTL_ESCALATION",
            AuthError::DepthExceeded { .. } => "DEPTH_EXCEEDED",
            AuthError::UnknownToken(_) => "UNKNOWN_TOKEN",
            AuthError::Io(_) => "REGISTRY_IO",
        }
    }
}

/// Issuance limits currently in force, normally derived from the active
/// enclave profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLimits {
    pub max_ttl_seconds: u64,
    pub max_delegation_depth: u32,
    pub mfa_required: bool,
}

impl From<&EnvironmentProfile> for TokenLimits {
    fn from(p: &EnvironmentProfile) -> Self {
        TokenLimits {
            max_ttl_seconds: p.max_token_ttl_seconds,
            max_delegation_depth: p.max_delegation_depth,
            mfa_required: p.mfa_required_at_issuance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueRequest {
    pub subject: String,
    pub project: String,
    pub scopes: Vec<String>,
    pub ttl_seconds: u64,
    #[serde(default)]
    pub mfa: bool,
    pub max_enclave: EnclaveLevel,
}

pub fn parse_scopes<S: AsRef<str>>(scopes: &[S]) -> Result<BTreeSet<Scope>, AuthError> {
    let set = scopes
        .iter()
        .map(|s| s.as_ref().parse::<Scope>().map_err(|UnknownScope(s)| AuthError::UnknownScope(s)))
        .collect::<Result<BTreeSet<_>, _>>()?;
    if set.is_empty() {
        return Err(AuthError::EmptyScopes);
    }
    Ok(set)
}

#[derive(Debug, Clone)]
struct Entry {
    claims: Claims,
    depth: u32,
    revoked: bool,
    children: Vec<Id128>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum JournalRecord {
    Issue { claims: Claims },
    Revoke { token_id: Id128 },
}

#[derive(Debug, Default)]
struct Registry {
    entries: HashMap<Id128, Entry>,
}

impl Registry {
    fn insert(&mut self, claims: Claims) {
        let depth = match claims.parent_id {
            Some(parent) => match self.entries.get_mut(&parent) {
                Some(p) => {
                    p.children.push(claims.token_id);
                    p.depth + 1
                }
                None => 0,
            },
            None => 0,
        };
        self.entries.insert(claims.token_id, Entry { claims, depth, revoked: false, children: Vec::new() });
    }

    /// Marks `root` and every descendant revoked. Returns how many were live.
    fn revoke_subtree(&mut self, root: Id128) -> usize {
        let mut stack = vec![root];
        let mut count = 0;
        while let Some(id) = stack.pop() {
            if let Some(e) = self.entries.get_mut(&id) {
                if !e.revoked {
                    e.revoked = true;
                    count += 1;
                }
                stack.extend(e.children.iter().copied());
            }
        }
        count
    }
}

/// Issues and checks tokens against a shared registry.
///
/// Validation takes a read lock only; issue and revoke serialize on the
/// write lock, and the journal is appended while that lock is held so the
/// file order matches the linearization order.
#[derive(Debug)]
pub struct TokenAuthority {
    codec: TokenCodec,
    limits: RwLock<TokenLimits>,
    registry: RwLock<Registry>,
    journal: Option<Mutex<File>>,
    ids: IdSource,
}

impl TokenAuthority {
    pub fn new(secret: &[u8], limits: TokenLimits) -> Self {
        Self::with_ids(secret, limits, IdSource::random())
    }

    pub fn with_ids(secret: &[u8], limits: TokenLimits, ids: IdSource) -> Self {
        TokenAuthority {
            codec: TokenCodec::new(secret),
            limits: RwLock::new(limits),
            registry: RwLock::new(Registry::default()),
            journal: None,
            ids,
        }
    }

    /// Opens (or creates) a journal at `path`, replays it into the registry
    /// and appends all further events to it.
    pub fn open_journal(mut self, path: &Path) -> Result<Self, AuthError> {
        let io = |e: std::io::Error| AuthError::Io(e.to_string());
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io)?);
            let mut reg = self.registry.write();
            for (n, line) in reader.lines().enumerate() {
                let line = line.map_err(io)?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: JournalRecord = serde_json::from_str(&line)
                    .map_err(|e| AuthError::Io(format!("journal line {}: {e}", n + 1)))?;
                match rec {
                    JournalRecord::Issue { claims } => reg.insert(claims),
                    JournalRecord::Revoke { token_id } => {
                        reg.revoke_subtree(token_id);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        self.journal = Some(Mutex::new(file));
        Ok(self)
    }

    fn journal_append(&self, rec: &JournalRecord) -> Result<(), AuthError> {
        if let Some(j) = &self.journal {
            let mut line = serde_json::to_vec(rec).expect("journal record serializes");
            line.push(b'\n');
            let mut f = j.lock();
            f.write_all(&line).and_then(|_| f.sync_data()).map_err(|e| AuthError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn limits(&self) -> TokenLimits {
        *self.limits.read()
    }

    /// Swaps the issuance limits. Tokens already issued keep their claims.
    pub fn set_limits(&self, limits: TokenLimits) {
        *self.limits.write() = limits;
    }

    pub fn codec(&self) -> &TokenCodec {
        &self.codec
    }

    pub fn issue_token(&self, req: &IssueRequest, now: u64) -> Result<String, AuthError> {
        let limits = self.limits();
        if req.ttl_seconds == 0 {
            return Err(AuthError::InvalidTtl);
        }
        if req.ttl_seconds > limits.max_ttl_seconds {
            return Err(AuthError::TtlExceedsProfile { requested: req.ttl_seconds, limit: limits.max_ttl_seconds });
        }
        let scopes = parse_scopes(&req.scopes)?;
        if limits.mfa_required && !req.mfa {
            return Err(AuthError::MfaRequired);
        }
        let claims = Claims {
            expires_at: now + req.ttl_seconds,
            issued_at: now,
            max_enclave: req.max_enclave,
            mfa: req.mfa,
            parent_id: None,
            project: req.project.clone(),
            scopes,
            subject: req.subject.clone(),
            token_id: self.ids.next_id(),
        };
        self.record(claims)
    }

    fn record(&self, claims: Claims) -> Result<String, AuthError> {
        let token = self.codec.encode(&claims);
        let mut reg = self.registry.write();
        self.journal_append(&JournalRecord::Issue { claims: claims.clone() })?;
        reg.insert(claims);
        Ok(token)
    }

    /// Returns the claims iff the signature verifies, `now < expires_at`, and
    /// the token and all its ancestors are live.
    pub fn validate_token(&self, token: &str, now: u64) -> Result<Claims, AuthError> {
        let claims = self.codec.decode(token)?;
        if now >= claims.expires_at {
            return Err(AuthError::Expired);
        }
        let reg = self.registry.read();
        let mut cursor = Some(claims.token_id);
        while let Some(id) = cursor {
            // A token this registry never issued is not live.
            let entry = reg.entries.get(&id).ok_or(AuthError::Revoked)?;
            if entry.revoked {
                return Err(AuthError::Revoked);
            }
            if now >= entry.claims.expires_at {
                return Err(AuthError::Expired);
            }
            cursor = entry.claims.parent_id;
        }
        Ok(claims)
    }

    /// Delegation depth of a live token (0 for a root token).
    pub fn depth_of(&self, token_id: &Id128) -> Option<u32> {
        self.registry.read().entries.get(token_id).map(|e| e.depth)
    }

    /// Mints a child of `parent_token` carrying a subset of its scopes.
    /// Subject, project, mfa, and enclave ceiling are inherited unchanged.
    pub fn delegate_token<S: AsRef<str>>(
        &self,
        parent_token: &str,
        narrowed_scopes: &[S],
        ttl_seconds: u64,
        now: u64,
    ) -> Result<String, AuthError> {
        let parent = self.validate_token(parent_token, now)?;
        let scopes = parse_scopes(narrowed_scopes)?;
        if let Some(extra) = scopes.iter().find(|s| !parent.scopes.contains(s)) {
            return Err(AuthError::ScopeEscalation(format!("{extra} not held by parent")));
        }
        if ttl_seconds == 0 {
            return Err(AuthError::InvalidTtl);
        }
        let limits = self.limits();
        if ttl_seconds > limits.max_ttl_seconds {
            return Err(AuthError::TtlExceedsProfile { requested: ttl_seconds, limit: limits.max_ttl_seconds });
        }
        let expires_at = now + ttl_seconds;
        if expires_at > parent.expires_at {
            return Err(AuthError::TtlEscalation);
        }
        let parent_depth = self.depth_of(&parent.token_id).ok_or(AuthError::Revoked)?;
        let depth = parent_depth + 1;
        if depth > limits.max_delegation_depth {
            return Err(AuthError::DepthExceeded { depth, limit: limits.max_delegation_depth });
        }
        let claims = Claims {
            expires_at,
            issued_at: now,
            max_enclave: parent.max_enclave,
            mfa: parent.mfa,
            parent_id: Some(parent.token_id),
            project: parent.project.clone(),
            scopes,
            subject: parent.subject.clone(),
            token_id: self.ids.next_id(),
        };
        self.record(claims)
    }

    /// Revokes a token and its whole delegation subtree. Returns the number
    /// of tokens that were live and are now invalid.
    pub fn revoke_token(&self, token_id: &Id128) -> Result<usize, AuthError> {
        let mut reg = self.registry.write();
        if !reg.entries.contains_key(token_id) {
            return Err(AuthError::UnknownToken(token_id.to_hex()));
        }
        self.journal_append(&JournalRecord::Revoke { token_id: *token_id })?;
        Ok(reg.revoke_subtree(*token_id))
    }

    pub fn registry_len(&self) -> usize {
        self.registry.read().entries.len()
    }
}
