use std::fmt;
use std::path::{Path, PathBuf};

use llm_gateway_core::cache::{PromptCacheConfig, DEFAULT_SESSION_BUDGET};
use llm_gateway_core::drift::DriftConfig;
use llm_gateway_core::graph::DEFAULT_MAX_ITERATIONS;
use llm_gateway_core::mock::MockConfig;
use llm_gateway_core::router::RouteConfig;
use llm_gateway_core::scheduler::WorkerSpec;
use llm_gateway_core::trace::TraceStoreConfig;
use llm_gateway_core::users::WorkerClass;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PORT: &str = "GATEWAY_PORT";
pub const ENV_BACKEND_URL: &str = "GATEWAY_BACKEND_URL";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub server: ServerConfig,
    pub backend: BackendConfig,
    pub router: RouteConfig,
    pub cache: CacheConfig,
    pub drift: DriftConfig,
    pub graph: GraphConfig,
    pub traces: TraceStoreConfig,
    pub services: ServicesConfig,
    pub scheduler: SchedulerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub port: u16,
    /// Required by admin routes. A random key is generated when unset.
    pub admin_key: Option<String>,
    /// Users and services persist here when set.
    pub state_file: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            admin_key: None,
            state_file: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub base_url: Option<String>,
    pub model_name: String,
    pub timeout_ms: u64,
    /// Admission limit on in-flight completions.
    pub max_concurrent: usize,
    /// Artificial service time per mock completion.
    pub mock_latency_ms: u64,
    pub mock: MockConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            base_url: None,
            model_name: "llama3".into(),
            timeout_ms: 60_000,
            max_concurrent: 4,
            mock_latency_ms: 0,
            mock: MockConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub enabled: bool,
    pub capacity: usize,
    pub similarity_threshold: f64,
    pub numeric_guard: bool,
    pub session_budget_bytes: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        let p = PromptCacheConfig::default();
        CacheConfig {
            enabled: true,
            capacity: p.capacity,
            similarity_threshold: p.similarity_threshold,
            numeric_guard: p.numeric_guard,
            session_budget_bytes: DEFAULT_SESSION_BUDGET,
        }
    }
}

impl CacheConfig {
    pub fn prompt(&self) -> PromptCacheConfig {
        PromptCacheConfig {
            capacity: self.capacity,
            similarity_threshold: self.similarity_threshold,
            numeric_guard: self.numeric_guard,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerKind {
    Jaccard,
    /// Ask the LLM backend which service fits, then score by Jaccard.
    Discovery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub max_iterations: u32,
    pub awaiting_ttl_secs: u64,
    pub reranker: RerankerKind,
    /// Finished graphs kept for inspection.
    pub retained_requests: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            max_iterations: DEFAULT_MAX_ITERATIONS,
            awaiting_ttl_secs: 30 * 60,
            reranker: RerankerKind::Jaccard,
            retained_requests: 10_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServicesConfig {
    pub invoke_timeout_ms: u64,
}

impl Default for ServicesConfig {
    fn default() -> Self {
        ServicesConfig {
            invoke_timeout_ms: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub workers: Vec<WorkerSpec>,
    /// Resident size of the configured model.
    pub model_bytes: u64,
    /// Classes tried in order for a user's workloads.
    pub class_preference: Vec<WorkerClass>,
    pub dispatch_timeout_ms: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            workers: vec![
                WorkerSpec {
                    id: "cpu-1".into(),
                    class: WorkerClass::Cpu,
                    capacity_bytes: 64_000_000_000,
                },
                WorkerSpec {
                    id: "gpu-1".into(),
                    class: WorkerClass::Gpu,
                    capacity_bytes: 48_000_000_000,
                },
            ],
            model_bytes: 16_000_000_000,
            class_preference: vec![WorkerClass::Gpu, WorkerClass::Cpu],
            dispatch_timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", .0)]
    Parse(ParseDiagnostic),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub path: Option<PathBuf>,
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = self
            .path
            .as_deref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<config>".into());
        write!(f, "{path}:{}:{}: {}", self.line, self.column, self.message)
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |nl| before.len() - nl - 1) + 1;
    (line, column)
}

impl GatewayConfig {
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self, ConfigError> {
        let cfg: GatewayConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| line_col(text, s.start));
            ConfigError::Parse(ParseDiagnostic {
                path: path.map(Path::to_path_buf),
                line,
                column,
                message: e.message().trim().to_string(),
            })
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, Some(path))
    }

    /// Applies `GATEWAY_PORT` and `GATEWAY_BACKEND_URL`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(port) = get(ENV_PORT) {
            self.server.port = port
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{ENV_PORT}={port} is not a port")))?;
        }
        if let Some(url) = get(ENV_BACKEND_URL) {
            self.backend.base_url = Some(url);
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.backend.kind == BackendKind::Http {
            if self.backend.base_url.as_deref().is_none_or(str::is_empty) {
                return bad("backend.kind = \"http\" requires backend.base_url");
            }
            if self.backend.model_name.is_empty() {
                return bad("backend.kind = \"http\" requires backend.model_name");
            }
        }
        if self.backend.max_concurrent == 0 {
            return bad("backend.max_concurrent must be at least 1");
        }
        if self.router.dimension == 0 || self.router.top_k == 0 {
            return bad("router.dimension and router.top_k must be positive");
        }
        if !(0.0..=1.0).contains(&self.router.abstain_threshold) {
            return bad("router.abstain_threshold must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.cache.similarity_threshold) {
            return bad("cache.similarity_threshold must be in [0, 1]");
        }
        if self.cache.capacity == 0 {
            return bad("cache.capacity must be positive");
        }
        if self.drift.window == 0 {
            return bad("drift.window must be positive");
        }
        if self.drift.min_live > self.drift.window {
            return bad("drift.min_live cannot exceed drift.window");
        }
        if self.graph.max_iterations == 0 {
            return bad("graph.max_iterations must be positive");
        }
        if self.scheduler.workers.is_empty() {
            return bad("scheduler.workers must list at least one worker");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(GatewayConfig::parse("", None).unwrap(), GatewayConfig::default());
    }

    #[test]
    fn full_file() {
        let cfg = GatewayConfig::parse(
            r#"
[server]
port = 9000
admin_key = "k"

[backend]
kind = "http"
base_url = "http://localhost:11434"
model_name = "llama3.1:8b"
max_concurrent = 1

[router]
abstain_threshold = 0.4
top_k = 3

[cache]
similarity_threshold = 0.9

[drift]
threshold = 0.25

[graph]
max_iterations = 4

[[scheduler.workers]]
id = "gpu-a"
class = "gpu"
capacity_bytes = 48000000000
"#,
            None,
        )
        .unwrap();
        assert_eq!(cfg.server.port, 9000);
        assert_eq!(cfg.backend.kind, BackendKind::Http);
        assert_eq!(cfg.router.top_k, 3);
        assert_eq!(cfg.router.dimension, 256);
        assert_eq!(cfg.cache.similarity_threshold, 0.9);
        assert_eq!(cfg.drift.threshold, 0.25);
        assert_eq!(cfg.drift.window, 200);
        assert_eq!(cfg.graph.max_iterations, 4);
        assert_eq!(cfg.scheduler.workers.len(), 1);
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let text = "[server]\nport = 80\n\n[router]\ntop_k = \"five\"\n";
        let Err(ConfigError::Parse(d)) = GatewayConfig::parse(text, Some(Path::new("gw.toml"))) else {
            panic!()
        };
        assert_eq!((d.line, d.column), (5, 9));
        assert!(d.to_string().starts_with("gw.toml:5:9: "), "{d}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let Err(ConfigError::Parse(d)) = GatewayConfig::parse("[cache]\nthreshold = 0.9\n", None) else {
            panic!()
        };
        assert_eq!(d.line, 2);
    }

    #[test]
    fn http_backend_needs_url() {
        assert!(matches!(
            GatewayConfig::parse("[backend]\nkind = \"http\"\n", None),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn env_overrides() {
        let mut cfg = GatewayConfig::default();
        cfg.apply_env(|k| match k {
            ENV_PORT => Some("7777".into()),
            ENV_BACKEND_URL => Some("http://gpu-box:11434".into()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.server.port, 7777);
        assert_eq!(cfg.backend.base_url.as_deref(), Some("http://gpu-box:11434"));
        assert!(cfg.apply_env(|k| (k == ENV_PORT).then(|| "x".into())).is_err());
    }
}
