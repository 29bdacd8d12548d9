use std::time::Duration;

use meshgate::facility::{api_result, FacilityError, GatewayApi};
use reqwest::blocking::{Client, RequestBuilder};
use reqwest::Method;
use serde_json::Value;

/// Blocking HTTP client for a running gateway.
#[derive(Debug, Clone)]
pub struct HttpGateway {
    base: String,
    client: Client,
}

impl HttpGateway {
    pub fn new(base: &str) -> Result<Self, FacilityError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(60))
            .build()
            .map_err(|e| FacilityError::Config(format!("http client: {e}")))?;
        Ok(HttpGateway { base: base.trim_end_matches('/').to_string(), client })
    }

    fn builder(&self, method: &str, path: &str, token: &str) -> Result<RequestBuilder, FacilityError> {
        let m = Method::from_bytes(method.as_bytes()).map_err(|e| FacilityError::Config(e.to_string()))?;
        Ok(self.client.request(m, format!("{}{path}", self.base)).bearer_auth(token))
    }

    fn send(&self, rb: RequestBuilder) -> Result<Value, FacilityError> {
        let resp = rb.send().map_err(|e| FacilityError::Api {
            status: 0,
            code: "GATEWAY_UNREACHABLE".into(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let body = resp.json().unwrap_or(Value::Null);
        api_result(status, body)
    }

    /// GET with `query` encoded into the query string.
    pub fn get_query(&self, path: &str, token: &str, query: &impl serde::Serialize) -> Result<Value, FacilityError> {
        self.send(self.builder("GET", path, token)?.query(query))
    }

    /// Sends `body` as-is instead of JSON-encoding it.
    pub fn call_raw(&self, method: &str, path: &str, token: &str, body: Vec<u8>) -> Result<Value, FacilityError> {
        self.send(self.builder(method, path, token)?.body(body))
    }
}

impl GatewayApi for HttpGateway {
    fn call(&self, method: &str, path: &str, token: &str, body: Option<&Value>) -> Result<Value, FacilityError> {
        let mut rb = self.builder(method, path, token)?;
        if let Some(b) = body {
            rb = rb.json(b);
        }
        self.send(rb)
    }
}
