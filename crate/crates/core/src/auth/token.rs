//! Bearer token wire form: `base64url(canonical claims JSON) "." base64url(HMAC-SHA256)`.

use std::collections::BTreeSet;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use super::{AuthError, Scope};
use crate::ids::Id128;
use crate::profiles::EnclaveLevel;

type HmacSha256 = Hmac<Sha256>;

/// Signed claims. Fields are declared in sorted order so the serialized
/// object has sorted keys whichever map type serde_json is built with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Claims {
    pub expires_at: u64,
    pub issued_at: u64,
    #[serde(with = "enclave_level_number")]
    pub max_enclave: EnclaveLevel,
    pub mfa: bool,
    pub parent_id: Option<Id128>,
    pub project: String,
    pub scopes: BTreeSet<Scope>,
    pub subject: String,
    pub token_id: Id128,
}

impl Claims {
    pub fn has_scope(&self, scope: Scope) -> bool {
        self.scopes.contains(&scope)
    }

    /// Whether any held scope permits `action`.
    pub fn permits(&self, action: &str) -> bool {
        self.scopes.iter().any(|s| s.covers(action))
    }

    pub fn is_admin(&self) -> bool {
        self.has_scope(Scope::AdminAll)
    }

    pub(crate) fn check_shape(&self) -> Result<(), AuthError> {
        if self.expires_at <= self.issued_at {
            return Err(AuthError::Malformed("expires_at must follow issued_at".into()));
        }
        if self.scopes.is_empty() {
            return Err(AuthError::Malformed("empty scope set".into()));
        }
        Ok(())
    }

    /// Canonical JSON bytes: sorted keys, no insignificant whitespace.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let value = serde_json::to_value(self).expect("claims serialize");
        serde_json::to_vec(&value).expect("value serializes")
    }
}

mod enclave_level_number {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::profiles::EnclaveLevel;

    pub fn serialize<S: Serializer>(level: &EnclaveLevel, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(level.as_u8())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<EnclaveLevel, D::Error> {
        let n = u8::deserialize(d)?;
        EnclaveLevel::from_u8(n).ok_or_else(|| serde::de::Error::custom(format!("enclave level {n} out of range")))
    }
}

#[derive(Clone)]
pub struct TokenCodec {
    key: Vec<u8>,
}

impl std::fmt::Debug for TokenCodec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TokenCodec { .. }")
    }
}

impl TokenCodec {
    pub fn new(secret: &[u8]) -> Self {
        TokenCodec { key: secret.to_vec() }
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.key).expect("hmac accepts any key length")
    }

    pub fn encode(&self, claims: &Claims) -> String {
        let body = claims.canonical_bytes();
        let mut mac = self.mac();
        mac.update(&body);
        let tag = mac.finalize().into_bytes();
        format!("{}.{}", URL_SAFE_NO_PAD.encode(&body), URL_SAFE_NO_PAD.encode(tag))
    }

    /// Verifies the signature and parses the claims. Does not look at time
    /// or revocation.
    pub fn decode(&self, token: &str) -> Result<Claims, AuthError> {
        let (body_b64, tag_b64) = token
            .split_once('.')
            .ok_or_else(|| AuthError::Malformed("missing separator".into()))?;
        let body = URL_SAFE_NO_PAD
            .decode(body_b64)
            .map_err(|e| AuthError::Malformed(format!("claims encoding: {e}")))?;
        let tag = URL_SAFE_NO_PAD
            .decode(tag_b64)
            .map_err(|e| AuthError::Malformed(format!("signature encoding: {e}")))?;
        let mut mac = self.mac();
        mac.update(&body);
        mac.verify_slice(&tag).map_err(|_| AuthError::BadSignature)?;

        let claims: Claims =
            serde_json::from_slice(&body).map_err(|e| AuthError::Malformed(format!("claims json: {e}")))?;
        if claims.canonical_bytes() != body {
            return Err(AuthError::Malformed("claims are not canonically encoded".into()));
        }
        claims.check_shape()?;
        Ok(claims)
    }
}
