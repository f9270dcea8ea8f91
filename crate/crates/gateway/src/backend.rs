//! LLM backends behind an admission limit.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use llm_gateway_core::llm::{validate_messages, BackendError, ChatMessage, LlmBackend};
use llm_gateway_core::mock::MockBackend;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{BackendConfig, BackendKind};

/// Counting semaphore bounding in-flight completions.
#[derive(Debug)]
pub struct Admission {
    limit: usize,
    state: Mutex<AdmissionStats>,
    freed: Condvar,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdmissionStats {
    pub limit: usize,
    pub in_flight: usize,
    pub peak_in_flight: usize,
    pub admitted: u64,
    /// Admissions that had to wait for a free slot.
    pub queued: u64,
    pub timed_out: u64,
}

pub struct Permit<'a> {
    admission: &'a Admission,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut s = self.admission.state.lock().unwrap_or_else(|e| e.into_inner());
        s.in_flight -= 1;
        drop(s);
        self.admission.freed.notify_one();
    }
}

impl Admission {
    pub fn new(limit: usize) -> Self {
        let limit = limit.max(1);
        Admission {
            limit,
            state: Mutex::new(AdmissionStats {
                limit,
                ..Default::default()
            }),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self, timeout: Duration) -> Result<Permit<'_>, BackendError> {
        let deadline = Instant::now() + timeout;
        let mut s = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if s.in_flight >= self.limit {
            s.queued += 1;
        }
        while s.in_flight >= self.limit {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                s.timed_out += 1;
                return Err(BackendError::Timeout);
            }
            s = self.freed.wait_timeout(s, left).unwrap_or_else(|e| e.into_inner()).0;
        }
        s.in_flight += 1;
        s.admitted += 1;
        s.peak_in_flight = s.peak_in_flight.max(s.in_flight);
        Ok(Permit { admission: self })
    }

    pub fn stats(&self) -> AdmissionStats {
        *self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Client for an OLLAMA-compatible `/api/chat` endpoint.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
}

#[derive(Deserialize)]
struct ChatReply {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    content: String,
}

impl HttpBackend {
    pub fn new(base_url: &str, model: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            url: format!("{}/api/chat", base_url.trim_end_matches('/')),
            model: model.into(),
        }
    }
}

pub(crate) fn transport_error(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) => BackendError::Timeout,
        other => BackendError::Transport(other.to_string()),
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let body = json!({"model": self.model, "messages": messages, "stream": false});
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body.to_string())
            .map_err(transport_error)?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(transport_error)?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("HTTP {status}: {text}")));
        }
        let reply: ChatReply =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(format!("{e}: {text}")))?;
        Ok(reply.message.content)
    }
}

enum Inner {
    Mock(MockBackend),
    Http(HttpBackend),
}

/// The configured backend with admission control and call accounting.
pub struct GatewayBackend {
    inner: Inner,
    admission: Admission,
    timeout: Duration,
    mock_latency: Duration,
    calls: AtomicU64,
    busy_micros: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendStats {
    pub calls: u64,
    pub busy_micros: u64,
    pub admission: AdmissionStats,
}

impl GatewayBackend {
    pub fn from_config(cfg: &BackendConfig) -> Self {
        let timeout = Duration::from_millis(cfg.timeout_ms);
        let inner = match cfg.kind {
            BackendKind::Mock => Inner::Mock(MockBackend::new(cfg.mock.clone())),
            BackendKind::Http => Inner::Http(HttpBackend::new(
                cfg.base_url.as_deref().unwrap_or_default(),
                &cfg.model_name,
                timeout,
            )),
        };
        GatewayBackend {
            inner,
            admission: Admission::new(cfg.max_concurrent),
            timeout,
            mock_latency: Duration::from_millis(cfg.mock_latency_ms),
            calls: AtomicU64::new(0),
            busy_micros: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> BackendStats {
        BackendStats {
            calls: self.calls.load(Ordering::Relaxed),
            busy_micros: self.busy_micros.load(Ordering::Relaxed),
            admission: self.admission.stats(),
        }
    }
}

impl LlmBackend for GatewayBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        validate_messages(messages)?;
        let _permit = self.admission.acquire(self.timeout)?;
        let start = Instant::now();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = match &self.inner {
            Inner::Mock(m) => {
                if !self.mock_latency.is_zero() {
                    std::thread::sleep(self.mock_latency);
                }
                m.complete(messages)
            }
            Inner::Http(h) => h.complete(messages),
        };
        self.busy_micros
            .fetch_add(start.elapsed().as_micros() as u64, Ordering::Relaxed);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn admission_bounds_in_flight() {
        let a = Arc::new(Admission::new(2));
        let handles: Vec<_> = (0..6)
            .map(|_| {
                let a = a.clone();
                std::thread::spawn(move || {
                    let _p = a.acquire(Duration::from_secs(5)).unwrap();
                    std::thread::sleep(Duration::from_millis(20));
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let s = a.stats();
        assert_eq!(s.peak_in_flight, 2);
        assert_eq!(s.admitted, 6);
        assert_eq!(s.in_flight, 0);
        assert!(s.queued >= 1);
    }

    #[test]
    fn third_call_queues_then_times_out() {
        let a = Admission::new(2);
        let _p1 = a.acquire(Duration::ZERO).unwrap();
        let _p2 = a.acquire(Duration::ZERO).unwrap();
        assert_eq!(a.acquire(Duration::from_millis(10)).err(), Some(BackendError::Timeout));
        drop(_p1);
        assert!(a.acquire(Duration::ZERO).is_ok());
    }

    #[test]
    fn mock_backend_counts_calls() {
        let b = GatewayBackend::from_config(&BackendConfig::default());
        let out = b.complete(&[ChatMessage::user("add 2 and 3")]).unwrap();
        assert_eq!(out, "The answer is 5.");
        assert_eq!(b.stats().calls, 1);
        assert!(matches!(b.complete(&[]), Err(BackendError::InvalidRequest(_))));
    }

    #[test]
    fn http_backend_reports_transport_errors() {
        // Nothing listens on port 9 of the loopback interface.
        let b = HttpBackend::new("http://127.0.0.1:9", "m", Duration::from_secs(2));
        assert!(matches!(
            b.complete(&[ChatMessage::user("hi")]),
            Err(BackendError::Transport(_) | BackendError::Timeout)
        ));
    }
}
