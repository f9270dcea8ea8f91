//! Service invocation over `POST {endpoint}/invoke`.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use llm_gateway_core::calc;
use llm_gateway_core::services::{InvokeRequest, InvokeResponse, ServiceDescriptor, ServiceError, ServiceInvoker};
use serde_json::Value;

/// Endpoints with this scheme are served in-process.
pub const BUILTIN_SCHEME: &str = "builtin://";

pub struct HttpInvoker {
    agent: ureq::Agent,
    invocations: AtomicU64,
}

impl HttpInvoker {
    pub fn new(timeout: Duration) -> Self {
        HttpInvoker {
            agent: ureq::Agent::config_builder()
                .timeout_global(Some(timeout))
                .http_status_as_error(false)
                .build()
                .into(),
            invocations: AtomicU64::new(0),
        }
    }

    /// Requests that reached a service, cached calls excluded.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    fn post(&self, endpoint: &str, request: &InvokeRequest) -> Result<Value, ServiceError> {
        let url = format!("{}/invoke", endpoint.trim_end_matches('/'));
        let body = serde_json::to_string(request).map_err(|e| ServiceError::Transport(e.to_string()))?;
        let mut resp = self
            .agent
            .post(&url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| ServiceError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| ServiceError::Transport(e.to_string()))?;
        match serde_json::from_str::<InvokeResponse>(&text) {
            Ok(r) => r.into_result(),
            Err(_) if !status.is_success() => Err(ServiceError::Transport(format!("HTTP {status} from {url}"))),
            Err(e) => Err(ServiceError::Transport(format!("malformed response from {url}: {e}"))),
        }
    }
}

impl ServiceInvoker for HttpInvoker {
    fn invoke(&self, service: &ServiceDescriptor, request: &InvokeRequest) -> Result<Value, ServiceError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        match service.endpoint.strip_prefix(BUILTIN_SCHEME) {
            Some("calculator") => calc::handle(request).into_result(),
            Some(other) => Err(ServiceError::Transport(format!("no built-in service {other}"))),
            None => self.post(&service.endpoint, request),
        }
    }
}
