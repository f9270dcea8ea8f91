//! The request pipeline tying the core components together.
//!
//! `handle_chat` runs: authenticate, append to the session, prompt-cache
//! lookup, scheduler admission, routing, graph planning and execution,
//! cache store, respond. Every stage is traced under the request id.
//! Graphs that need user input are parked until `resume` claims them.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use llm_gateway_core::cache::{CacheStats, PromptCache, ScopeKey, SessionCache, SessionStats};
use llm_gateway_core::drift::{DriftDetector, DriftReport, DriftStatus};
use llm_gateway_core::graph::{
    self, CallCache, ExecContext, ExecGraph, GraphStatus, Interceptor, PlanInput, ResumeError, RunOutcome,
};
use llm_gateway_core::llm::Role;
use llm_gateway_core::rerank::{DiscoveryReranker, JaccardReranker, Reranker};
use llm_gateway_core::router::{IndexDumpEntry, Ranking, Router};
use llm_gateway_core::scheduler::{Assignment, LoadOutcome, Scheduler, SchedulerSnapshot, Workload};
use llm_gateway_core::services::{ServiceDescriptor, ServiceError, ServiceRegistry};
use llm_gateway_core::time::{Clock, Timestamp};
use llm_gateway_core::trace::{Telemetry, TraceEvent, TraceSink, TraceStore};
use llm_gateway_core::users::{AccessCertificate, UserError, UserRecord, UserRegistry, WorkerClass};
use llm_gateway_core::Embedder;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{BackendStats, GatewayBackend};
use crate::config::{GatewayConfig, RerankerKind};
use crate::invoker::HttpInvoker;
use crate::store::{PersistedState, StateFile, StoreError};

/// Wall clock in microseconds since the Unix epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        Timestamp(d.as_micros() as u64)
    }
}

struct StoreSink<'a>(&'a Mutex<TraceStore>);

impl TraceSink for StoreSink<'_> {
    fn record(&self, event: TraceEvent) {
        lock(self.0).record(event);
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Authentication,
    Forbidden,
    NotFound,
    Conflict,
    InvalidRequest,
    NotAwaiting,
    Expired,
    Unresolved,
    Execution,
    Unavailable,
    Internal,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Authentication => "authentication",
            ErrorKind::Forbidden => "forbidden",
            ErrorKind::NotFound => "not_found",
            ErrorKind::Conflict => "conflict",
            ErrorKind::InvalidRequest => "invalid_request",
            ErrorKind::NotAwaiting => "not_awaiting",
            ErrorKind::Expired => "expired",
            ErrorKind::Unresolved => "unresolved",
            ErrorKind::Execution => "execution",
            ErrorKind::Unavailable => "unavailable",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatewayError {
    pub kind: ErrorKind,
    pub message: String,
}

impl GatewayError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        GatewayError {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for GatewayError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind.as_str(), self.message)
    }
}

impl std::error::Error for GatewayError {}

impl From<UserError> for GatewayError {
    fn from(e: UserError) -> Self {
        let kind = match e {
            UserError::Conflict(_) => ErrorKind::Conflict,
            UserError::UnknownUser(_) => ErrorKind::NotFound,
            UserError::Authentication => ErrorKind::Authentication,
        };
        GatewayError::new(kind, e.to_string())
    }
}

impl From<ServiceError> for GatewayError {
    fn from(e: ServiceError) -> Self {
        let kind = match e {
            ServiceError::Duplicate(_) => ErrorKind::Conflict,
            ServiceError::UnknownService(_) | ServiceError::UnknownProcedure { .. } => ErrorKind::NotFound,
            ServiceError::Transport(_) | ServiceError::Remote(_) => ErrorKind::Execution,
            _ => ErrorKind::InvalidRequest,
        };
        GatewayError::new(kind, e.to_string())
    }
}

impl From<StoreError> for GatewayError {
    fn from(e: StoreError) -> Self {
        GatewayError::new(ErrorKind::Internal, e.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub session_id: String,
    #[serde(default)]
    pub auth_key: String,
    pub prompt: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Answer,
    Clarification,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub kind: ResponseKind,
    pub text: String,
    pub request_id: String,
    /// The service that answered, or `direct`.
    pub routing: String,
    pub cache_hit: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_kind: Option<ErrorKind>,
}

pub const DIRECT: &str = "direct";

impl ChatResponse {
    fn error(request_id: &str, e: &GatewayError) -> Self {
        ChatResponse {
            kind: ResponseKind::Error,
            text: e.message.clone(),
            request_id: request_id.into(),
            routing: DIRECT.into(),
            cache_hit: false,
            error_kind: Some(e.kind),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CachedAnswer {
    text: String,
    routing: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct RequestView {
    pub request_id: String,
    pub session_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<ChatResponse>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph: Option<ExecGraph>,
    /// A resume is executing the graph right now.
    pub claimed: bool,
}

struct RequestEntry {
    user_id: String,
    session_id: String,
    response: Option<ChatResponse>,
    graph: Option<ExecGraph>,
    parked_at: Option<Instant>,
    claimed: bool,
}

#[derive(Default)]
struct RequestTable {
    entries: HashMap<String, RequestEntry>,
    order: VecDeque<String>,
}

impl RequestTable {
    fn insert(&mut self, id: String, entry: RequestEntry, retain: usize, ttl: Duration) {
        if self.entries.insert(id.clone(), entry).is_none() {
            self.order.push_back(id);
        }
        let now = Instant::now();
        // Drop expired parked graphs and, beyond the retention bound, the
        // oldest entries that are not parked.
        for e in self.entries.values_mut() {
            if !e.claimed && e.parked_at.is_some_and(|t| now.duration_since(t) > ttl) {
                e.parked_at = None;
                e.graph = None;
            }
        }
        let mut scanned = 0;
        while self.order.len() > retain && scanned < self.order.len() {
            let id = self.order.pop_front().expect("non-empty");
            let parked = self
                .entries
                .get(&id)
                .is_some_and(|e| e.parked_at.is_some() || e.claimed);
            if parked {
                self.order.push_back(id);
                scanned += 1;
            } else {
                self.entries.remove(&id);
            }
        }
    }
}

#[derive(Default)]
struct SchedState {
    scheduler: Scheduler,
    assigned: HashMap<String, Assignment>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CacheReport {
    pub enabled: bool,
    pub prompt: CacheStats,
    pub service_calls: CacheStats,
    pub sessions: SessionStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftView {
    pub alarm: bool,
    pub distance: Option<f64>,
    #[serde(flatten)]
    pub report: DriftReport,
}

pub struct Gateway {
    config: GatewayConfig,
    admin_key: String,
    backend: GatewayBackend,
    invoker: HttpInvoker,
    interceptors: Vec<Box<dyn Interceptor + Send + Sync>>,
    users: RwLock<UserRegistry>,
    services: RwLock<ServiceRegistry>,
    router: RwLock<Arc<Router>>,
    prompt_cache: Mutex<PromptCache>,
    call_cache: Mutex<PromptCache>,
    sessions: Mutex<SessionCache>,
    sched: Mutex<SchedState>,
    sched_cv: Condvar,
    traces: Mutex<TraceStore>,
    drift: Mutex<DriftDetector>,
    requests: Mutex<RequestTable>,
    state_file: Option<StateFile>,
    next_request: AtomicU64,
    next_workload: AtomicU64,
}

/// Releases the scheduler slot when a request finishes, however it ends.
struct Slot<'a> {
    gw: &'a Gateway,
    workload_id: String,
}

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        let mut s = lock(&self.gw.sched);
        let _ = s.scheduler.complete(&self.workload_id);
        drop(s);
        self.gw.sched_cv.notify_all();
    }
}

struct GatewayCallCache<'a> {
    cache: &'a Mutex<PromptCache>,
    user_id: &'a str,
}

impl GatewayCallCache<'_> {
    fn scope(&self, service: &ServiceDescriptor) -> ScopeKey {
        if service.shared_cache {
            ScopeKey::shared(service.config_hash())
        } else {
            ScopeKey::user(self.user_id, service.config_hash())
        }
    }
}

impl CallCache for GatewayCallCache<'_> {
    fn get(&self, service: &ServiceDescriptor, key: &str) -> Option<Value> {
        let hit = lock(self.cache).lookup_exact(&self.scope(service), key, SystemClock.now())?;
        serde_json::from_str(&hit.response).ok()
    }

    fn put(&self, service: &ServiceDescriptor, key: &str, value: &Value) {
        let _ = lock(self.cache).store(self.scope(service), key, value.to_string(), SystemClock.now());
    }
}

fn mix(h: u64, x: u64) -> u64 {
    (h ^ x).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(29)
}

impl Gateway {
    pub fn new(config: GatewayConfig) -> Result<Self, GatewayError> {
        config
            .validate()
            .map_err(|e| GatewayError::new(ErrorKind::InvalidRequest, e.to_string()))?;
        let mut scheduler = Scheduler::new(config.scheduler.workers.clone())
            .map_err(|e| GatewayError::new(ErrorKind::InvalidRequest, e.to_string()))?;
        scheduler.set_model_size(config.backend.model_name.clone(), config.scheduler.model_bytes);
        let admin_key = config.server.admin_key.clone().unwrap_or_else(random_key);
        let embedder = Embedder::new(config.router.dimension);
        let state_file = config.server.state_file.clone().map(StateFile::new);
        let (users, services) = match &state_file {
            Some(f) => {
                let PersistedState { users, services } = f.load()?;
                let mut reg = ServiceRegistry::new();
                for s in services {
                    let at = s.registered_at;
                    reg.register_service(s, at)?;
                }
                (UserRegistry::from_records(users), reg)
            }
            None => (UserRegistry::new(), ServiceRegistry::new()),
        };
        let router = Router::build(&services, config.router);
        Ok(Gateway {
            admin_key,
            backend: GatewayBackend::from_config(&config.backend),
            invoker: HttpInvoker::new(Duration::from_millis(config.services.invoke_timeout_ms)),
            interceptors: Vec::new(),
            users: RwLock::new(users),
            services: RwLock::new(services),
            router: RwLock::new(Arc::new(router)),
            prompt_cache: Mutex::new(PromptCache::new(config.cache.prompt(), embedder)),
            call_cache: Mutex::new(PromptCache::new(config.cache.prompt(), embedder)),
            sessions: Mutex::new(SessionCache::new(config.cache.session_budget_bytes)),
            sched: Mutex::new(SchedState {
                scheduler,
                assigned: HashMap::new(),
            }),
            sched_cv: Condvar::new(),
            traces: Mutex::new(TraceStore::new(config.traces)),
            drift: Mutex::new(DriftDetector::new(config.drift, config.router.dimension)),
            requests: Mutex::new(RequestTable::default()),
            state_file,
            next_request: AtomicU64::new(1),
            next_workload: AtomicU64::new(1),
            config,
        })
    }

    pub fn add_interceptor(&mut self, interceptor: Box<dyn Interceptor + Send + Sync>) {
        self.interceptors.push(interceptor);
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn admin_key(&self) -> &str {
        &self.admin_key
    }

    pub fn check_admin(&self, key: Option<&str>) -> Result<(), GatewayError> {
        match key {
            Some(k) if k == self.admin_key => Ok(()),
            _ => Err(GatewayError::new(ErrorKind::Authentication, "admin key required")),
        }
    }

    pub fn backend(&self) -> &GatewayBackend {
        &self.backend
    }

    pub fn backend_stats(&self) -> BackendStats {
        self.backend.stats()
    }

    /// Service requests that left the gateway (cache hits excluded).
    pub fn invocations(&self) -> u64 {
        self.invoker.invocations()
    }

    fn persist(&self) -> Result<(), GatewayError> {
        let Some(f) = &self.state_file else { return Ok(()) };
        let state = PersistedState {
            users: self.users.read().unwrap().records().cloned().collect(),
            services: self.services.read().unwrap().all().to_vec(),
        };
        Ok(f.save(&state)?)
    }

    pub fn register_user(&self, user_id: &str, certificate: AccessCertificate) -> Result<UserRecord, GatewayError> {
        if user_id.trim().is_empty() {
            return Err(GatewayError::new(ErrorKind::InvalidRequest, "user_id is empty"));
        }
        let rec = self
            .users
            .write()
            .unwrap()
            .register_user(user_id, certificate, SystemClock.now(), &mut rand::rng())?;
        self.persist()?;
        Ok(rec)
    }

    pub fn revoke_user(&self, user_id: &str) -> Result<(), GatewayError> {
        self.users.write().unwrap().revoke(user_id)?;
        self.persist()
    }

    /// Registers a service and swaps in a rebuilt router.
    pub fn register_service(&self, descriptor: ServiceDescriptor) -> Result<(), GatewayError> {
        let mut services = self.services.write().unwrap();
        services.register_service(descriptor, SystemClock.now())?;
        let router = Router::build(&services, self.config.router);
        *self.router.write().unwrap() = Arc::new(router);
        drop(services);
        self.persist()
    }

    pub fn authenticate(&self, auth_key: &str) -> Result<UserRecord, GatewayError> {
        Ok(self.users.read().unwrap().authenticate(auth_key)?.clone())
    }

    pub fn services(&self) -> Vec<ServiceDescriptor> {
        self.services.read().unwrap().all().to_vec()
    }

    pub fn services_for(&self, auth_key: &str) -> Result<Vec<ServiceDescriptor>, GatewayError> {
        let user = self.authenticate(auth_key)?;
        Ok(self
            .services
            .read()
            .unwrap()
            .get_available_services(&user.certificate)
            .into_iter()
            .cloned()
            .collect())
    }

    pub fn router(&self) -> Arc<Router> {
        self.router.read().unwrap().clone()
    }

    pub fn index_dump(&self) -> Vec<IndexDumpEntry> {
        self.router().dump()
    }

    pub fn scheduler_snapshot(&self) -> SchedulerSnapshot {
        lock(&self.sched).scheduler.snapshot()
    }

    pub fn cache_report(&self) -> CacheReport {
        CacheReport {
            enabled: self.config.cache.enabled,
            prompt: lock(&self.prompt_cache).stats(),
            service_calls: lock(&self.call_cache).stats(),
            sessions: lock(&self.sessions).stats(),
        }
    }

    pub fn drift_view(&self) -> DriftView {
        let report = lock(&self.drift).report();
        let (alarm, distance) = match report.last {
            Some(DriftStatus::Alarm { distance }) => (true, Some(distance)),
            Some(DriftStatus::Ok { distance }) => (false, Some(distance)),
            _ => (false, None),
        };
        DriftView {
            alarm,
            distance,
            report,
        }
    }

    pub fn session_history(&self, user_id: &str, session_id: &str) -> Vec<llm_gateway_core::cache::Turn> {
        lock(&self.sessions).history(&session_key(user_id, session_id))
    }

    /// Traces are visible to the admin and to the user who made the request.
    pub fn traces(&self, request_id: &str, auth_key: Option<&str>, admin_key: Option<&str>) -> Result<Vec<TraceEvent>, GatewayError> {
        self.authorize_request(request_id, auth_key, admin_key)?;
        lock(&self.traces)
            .get(request_id)
            .map(<[TraceEvent]>::to_vec)
            .ok_or_else(|| GatewayError::new(ErrorKind::NotFound, format!("no trace for {request_id}")))
    }

    pub fn request(&self, request_id: &str, auth_key: Option<&str>, admin_key: Option<&str>) -> Result<RequestView, GatewayError> {
        self.authorize_request(request_id, auth_key, admin_key)?;
        let table = lock(&self.requests);
        let e = table
            .entries
            .get(request_id)
            .ok_or_else(|| GatewayError::new(ErrorKind::NotFound, format!("unknown request {request_id}")))?;
        Ok(RequestView {
            request_id: request_id.into(),
            session_id: e.session_id.clone(),
            response: e.response.clone(),
            graph: e.graph.clone(),
            claimed: e.claimed,
        })
    }

    fn authorize_request(&self, request_id: &str, auth_key: Option<&str>, admin_key: Option<&str>) -> Result<(), GatewayError> {
        if self.check_admin(admin_key).is_ok() {
            return Ok(());
        }
        let user = self.authenticate(auth_key.unwrap_or_default())?;
        let owner = lock(&self.requests).entries.get(request_id).map(|e| e.user_id.clone());
        // Other users' requests look absent rather than forbidden.
        match owner {
            Some(o) if o == user.user_id => Ok(()),
            _ => Err(GatewayError::new(ErrorKind::NotFound, format!("unknown request {request_id}"))),
        }
    }

    fn new_request_id(&self) -> String {
        format!("req-{:06}", self.next_request.fetch_add(1, Ordering::Relaxed))
    }

    pub fn handle_chat(&self, req: &ChatRequest) -> ChatResponse {
        let request_id = self.new_request_id();
        let sink = StoreSink(&self.traces);
        let clock = SystemClock;
        let t = Telemetry::new(&request_id, &sink, &clock);
        let started = t.now();
        let resp = self
            .chat(&request_id, req, &t)
            .unwrap_or_else(|e| ChatResponse::error(&request_id, &e));
        self.finish_request(&t, started, resp)
    }

    fn finish_request(&self, t: &Telemetry<'_>, started: Timestamp, resp: ChatResponse) -> ChatResponse {
        let mut ev = t
            .event("gateway", "respond", started)
            .with("kind", format!("{:?}", resp.kind).to_lowercase())
            .with("routing", resp.routing.clone())
            .with("cache_hit", resp.cache_hit.to_string());
        if let Some(k) = resp.error_kind {
            ev = ev.with("error_kind", k.as_str());
        }
        t.emit(ev);
        let mut table = lock(&self.requests);
        if let Some(e) = table.entries.get_mut(&resp.request_id) {
            e.response = Some(resp.clone());
        }
        resp
    }

    fn chat(&self, request_id: &str, req: &ChatRequest, t: &Telemetry<'_>) -> Result<ChatResponse, GatewayError> {
        let user = t.span("user-registry", "authenticate", |ev| {
            let r = self.authenticate(&req.auth_key);
            ev.attributes
                .insert("outcome".into(), if r.is_ok() { "ok" } else { "rejected" }.into());
            if let Ok(u) = &r {
                ev.attributes.insert("user_id".into(), u.user_id.clone());
            }
            r
        })?;
        let prompt = req.prompt.trim();
        if prompt.is_empty() {
            return Err(GatewayError::new(ErrorKind::InvalidRequest, "prompt is empty"));
        }
        let session_id = if req.session_id.trim().is_empty() {
            request_id.to_string()
        } else {
            req.session_id.trim().to_string()
        };
        let skey = session_key(&user.user_id, &session_id);
        self.track(request_id, &user.user_id, &session_id);

        let history = t.span("cache", "session-append", |_| {
            let mut s = lock(&self.sessions);
            let h = s.messages(&skey);
            s.append(&skey, Role::User, prompt, SystemClock.now());
            h
        });

        let router = self.router();
        self.check_drift(&router, prompt, t);

        let scope = ScopeKey::user(user.user_id.clone(), self.scope_fingerprint(&user.certificate));
        if self.config.cache.enabled {
            let hit = t.span("cache", "prompt-lookup", |ev| {
                let hit = lock(&self.prompt_cache).lookup(&scope, prompt, SystemClock.now());
                ev.attributes.insert("hit".into(), hit.is_some().to_string());
                if let Some(h) = &hit {
                    ev.attributes.insert("similarity".into(), format!("{:.6}", h.similarity));
                }
                hit
            });
            if let Some(cached) = hit.and_then(|h| serde_json::from_str::<CachedAnswer>(&h.response).ok()) {
                lock(&self.sessions).append(&skey, Role::Assistant, &cached.text, SystemClock.now());
                return Ok(ChatResponse {
                    kind: ResponseKind::Answer,
                    text: cached.text,
                    request_id: request_id.into(),
                    routing: cached.routing,
                    cache_hit: true,
                    error_kind: None,
                });
            }
        }

        let prospective = match router.rank(prompt, &user.certificate, &JaccardReranker) {
            Ranking::Ranked(r) if r[0].1 >= router.config().abstain_threshold => router
                .index()
                .get(r[0].0)
                .map(|e| e.service_name.clone())
                .unwrap_or_else(|| DIRECT.into()),
            _ => DIRECT.into(),
        };
        let _slot = self.schedule(request_id, &skey, &prospective, &user.certificate, t)?;

        let decision = {
            let discovery;
            let reranker: &dyn Reranker = match self.config.graph.reranker {
                RerankerKind::Jaccard => &JaccardReranker,
                RerankerKind::Discovery => {
                    discovery = DiscoveryReranker::new(&self.backend);
                    &discovery
                }
            };
            let started = t.now();
            let d = router.route(prompt, &user.certificate, reranker, &self.backend, t);
            let mut ev = t
                .event("router", "route", started)
                .with("score", format!("{:.6}", d.score))
                .with("margin", format!("{:.6}", d.margin))
                .with("abstained", d.abstained.to_string());
            if d.abstained {
                ev = ev.with("reason", d.abstain_reason.clone().unwrap_or_default());
            } else {
                ev = ev
                    .with("service", d.service_name.clone())
                    .with("procedure", d.procedure_name.clone());
            }
            t.emit(ev);
            d
        };

        let services = self.services.read().unwrap();
        let mut graph = t
            .span("execution-graph", "plan", |_| {
                graph::plan(
                    PlanInput {
                        request_id,
                        session_id: &session_id,
                        prompt,
                        decision: &decision,
                        history: &history,
                        max_iterations: self.config.graph.max_iterations,
                    },
                    &services,
                )
            })
            .map_err(|e| GatewayError::new(ErrorKind::Execution, e.to_string()))?;
        let outcome = self.run_graph(&mut graph, &services, &user, t);
        drop(services);
        Ok(self.conclude(request_id, &user, &skey, &scope, graph, outcome, true))
    }

    fn track(&self, request_id: &str, user_id: &str, session_id: &str) {
        lock(&self.requests).insert(
            request_id.into(),
            RequestEntry {
                user_id: user_id.into(),
                session_id: session_id.into(),
                response: None,
                graph: None,
                parked_at: None,
                claimed: false,
            },
            self.config.graph.retained_requests,
            Duration::from_secs(self.config.graph.awaiting_ttl_secs),
        );
    }

    fn check_drift(&self, router: &Router, prompt: &str, t: &Telemetry<'_>) {
        let v = router.embedder().embed(prompt);
        let status = t.span("observability", "drift-check", |ev| {
            let s = lock(&self.drift).drift_check(&v);
            ev.attributes.insert(
                "status".into(),
                match s {
                    DriftStatus::InsufficientReference { .. } => "insufficient_reference".into(),
                    DriftStatus::InsufficientLive { .. } => "insufficient_live".into(),
                    DriftStatus::Ok { distance } => format!("ok {distance:.6}"),
                    DriftStatus::Alarm { distance } => format!("alarm {distance:.6}"),
                    DriftStatus::SkippedZero => "skipped_zero".into(),
                },
            );
            s
        });
        if let DriftStatus::Alarm { distance } = status {
            log::warn!("input drift alarm: distance {distance:.4}");
        }
    }

    /// Identifies the service configuration a user's prompts resolve against.
    fn scope_fingerprint(&self, certificate: &AccessCertificate) -> u64 {
        self.services
            .read()
            .unwrap()
            .get_available_services(certificate)
            .iter()
            .fold(0xcbf2_9ce4_8422_2325, |h, s| mix(h, s.config_hash()))
    }

    fn worker_class(&self, certificate: &AccessCertificate) -> Option<WorkerClass> {
        let sched = lock(&self.sched);
        self.config
            .scheduler
            .class_preference
            .iter()
            .copied()
            .find(|c| certificate.allows_worker(*c) && sched.scheduler.workers().any(|w| w.class == *c))
    }

    /// Submits a workload and blocks until it is dispatched.
    fn schedule(
        &self,
        request_id: &str,
        session_key: &str,
        service: &str,
        certificate: &AccessCertificate,
        t: &Telemetry<'_>,
    ) -> Result<Slot<'_>, GatewayError> {
        let class = self.worker_class(certificate).ok_or_else(|| {
            GatewayError::new(ErrorKind::Forbidden, "certificate permits no configured worker class")
        })?;
        let workload_id = format!("{request_id}#{}", self.next_workload.fetch_add(1, Ordering::Relaxed));
        let workload = Workload {
            request_id: workload_id.clone(),
            session_id: session_key.into(),
            required_service: service.into(),
            required_model: Some(self.config.backend.model_name.clone()),
            required_worker_class: class,
            permitted_classes: certificate.allowed_worker_classes.clone(),
            enqueued_at: t.now(),
        };
        let started = t.now();
        let deadline = Instant::now() + Duration::from_millis(self.config.scheduler.dispatch_timeout_ms);
        let mut s = lock(&self.sched);
        if !s.scheduler.can_serve(&workload) {
            return Err(GatewayError::new(ErrorKind::Forbidden, "no eligible worker can serve this request"));
        }
        let position = s
            .scheduler
            .submit(workload)
            .map_err(|e| GatewayError::new(ErrorKind::Internal, e.to_string()))?;
        let assignment = loop {
            while let Some(a) = s.scheduler.dispatch() {
                s.assigned.insert(a.workload.request_id.clone(), a);
            }
            if let Some(a) = s.assigned.remove(&workload_id) {
                break a;
            }
            self.sched_cv.notify_all();
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                let _ = s.scheduler.cancel(&workload_id);
                return Err(GatewayError::new(ErrorKind::Unavailable, "timed out waiting for a worker"));
            }
            s = self.sched_cv.wait_timeout(s, left).unwrap_or_else(|e| e.into_inner()).0;
        };
        drop(s);
        self.sched_cv.notify_all();
        let mut ev = t
            .event("scheduler", "dispatch", started)
            .with("workload", workload_id.clone())
            .with("position", position.to_string())
            .with("worker", assignment.worker_id.clone())
            .with("reason", format!("{:?}", assignment.reason).to_lowercase());
        if let Some(load) = &assignment.load {
            ev = ev.with("load", format!("{load:?}"));
        }
        t.emit(ev);
        if let Some(LoadOutcome::EvictedAndLoaded { evicted }) = &assignment.load {
            for m in evicted {
                t.emit(
                    t.event("scheduler", "model-evicted", t.now())
                        .with("worker", assignment.worker_id.clone())
                        .with("model", m.clone()),
                );
            }
        }
        Ok(Slot { gw: self, workload_id })
    }

    fn run_graph(&self, graph: &mut ExecGraph, services: &ServiceRegistry, user: &UserRecord, t: &Telemetry<'_>) -> RunOutcome {
        let call_cache = GatewayCallCache {
            cache: &self.call_cache,
            user_id: &user.user_id,
        };
        let interceptors: Vec<&dyn Interceptor> = self
            .interceptors
            .iter()
            .map(|b| b.as_ref() as &dyn Interceptor)
            .collect();
        let ctx = ExecContext {
            backend: &self.backend,
            invoker: &self.invoker,
            registry: services,
            certificate: &user.certificate,
            cache: self.config.cache.enabled.then_some(&call_cache as &dyn CallCache),
            telemetry: *t,
            interceptors: &interceptors,
            retries: self.config.router.retries,
        };
        graph::run(graph, &ctx)
    }

    #[allow(clippy::too_many_arguments)]
    fn conclude(
        &self,
        request_id: &str,
        user: &UserRecord,
        skey: &str,
        scope: &ScopeKey,
        graph: ExecGraph,
        outcome: RunOutcome,
        cacheable: bool,
    ) -> ChatResponse {
        let routing = graph.service_name().unwrap_or(DIRECT).to_string();
        let now = SystemClock.now();
        let (kind, text, error_kind) = match outcome {
            RunOutcome::Completed { answer } => {
                lock(&self.sessions).append(skey, Role::Assistant, &answer, now);
                let first_pass = graph.effective_prompt == graph.prompt && graph.iteration_count <= 1;
                if self.config.cache.enabled && cacheable && first_pass && routing != DIRECT {
                    let entry = serde_json::to_string(&CachedAnswer {
                        text: answer.clone(),
                        routing: routing.clone(),
                    })
                    .expect("cached answer serializes");
                    let _ = lock(&self.prompt_cache).store(scope.clone(), &graph.prompt, entry, now);
                }
                (ResponseKind::Answer, answer, None)
            }
            RunOutcome::AwaitingUser { question } => {
                lock(&self.sessions).append(skey, Role::Assistant, &question, now);
                (ResponseKind::Clarification, question, None)
            }
            RunOutcome::Failed { cause } => {
                let kind = if cause == "unresolved" {
                    ErrorKind::Unresolved
                } else {
                    ErrorKind::Execution
                };
                (ResponseKind::Error, cause, Some(kind))
            }
        };
        let parked = graph.status == GraphStatus::AwaitingUser;
        {
            let mut table = lock(&self.requests);
            if let Some(e) = table.entries.get_mut(request_id) {
                e.parked_at = parked.then(Instant::now);
                e.claimed = false;
                e.graph = Some(graph);
            }
        }
        let _ = user;
        ChatResponse {
            kind,
            text,
            request_id: request_id.into(),
            routing,
            cache_hit: false,
            error_kind,
        }
    }

    /// Continues a parked request with the user's answer. Exactly one of
    /// several concurrent resumes of the same request is accepted.
    pub fn resume(&self, request_id: &str, auth_key: &str, text: &str) -> ChatResponse {
        let sink = StoreSink(&self.traces);
        let clock = SystemClock;
        let t = Telemetry::new(request_id, &sink, &clock);
        let started = t.now();
        let resp = self
            .resume_inner(request_id, auth_key, text, &t)
            .unwrap_or_else(|e| ChatResponse::error(request_id, &e));
        let resp = if resp.kind == ResponseKind::Error {
            // Failed resumes leave the stored response of the request alone.
            t.emit(
                t.event("gateway", "resume-rejected", started)
                    .with("error_kind", resp.error_kind.map_or("", ErrorKind::as_str)),
            );
            resp
        } else {
            self.finish_request(&t, started, resp)
        };
        resp
    }

    fn resume_inner(&self, request_id: &str, auth_key: &str, text: &str, t: &Telemetry<'_>) -> Result<ChatResponse, GatewayError> {
        let user = t.span("user-registry", "authenticate", |_| self.authenticate(auth_key))?;
        let ttl = Duration::from_secs(self.config.graph.awaiting_ttl_secs);
        let not_found = || GatewayError::new(ErrorKind::NotFound, format!("unknown request {request_id}"));
        let (mut graph, session_id) = {
            let mut table = lock(&self.requests);
            let e = table.entries.get_mut(request_id).ok_or_else(not_found)?;
            if e.user_id != user.user_id {
                return Err(not_found());
            }
            let awaiting = !e.claimed && e.graph.as_ref().is_some_and(|g| g.status == GraphStatus::AwaitingUser);
            if !awaiting {
                return Err(GatewayError::new(ErrorKind::NotAwaiting, "request is not awaiting user input"));
            }
            if e.parked_at.is_some_and(|p| p.elapsed() > ttl) {
                e.parked_at = None;
                e.graph = None;
                return Err(GatewayError::new(ErrorKind::Expired, "clarification window expired"));
            }
            e.claimed = true;
            (e.graph.take().expect("checked above"), e.session_id.clone())
        };
        let skey = session_key(&user.user_id, &session_id);
        let release = |graph: ExecGraph| {
            let mut table = lock(&self.requests);
            if let Some(e) = table.entries.get_mut(request_id) {
                e.claimed = false;
                e.graph = Some(graph);
            }
        };
        if text.trim().is_empty() {
            release(graph);
            return Err(GatewayError::new(ErrorKind::InvalidRequest, "clarification is empty"));
        }
        let service = graph.service_name().unwrap_or(DIRECT).to_string();
        let slot = match self.schedule(request_id, &skey, &service, &user.certificate, t) {
            Ok(s) => s,
            Err(e) => {
                release(graph);
                return Err(e);
            }
        };
        if let Err(e) = graph::resume(&mut graph, text) {
            release(graph);
            let kind = match e {
                ResumeError::EmptyInput => ErrorKind::InvalidRequest,
                ResumeError::NotAwaiting => ErrorKind::NotAwaiting,
                ResumeError::UnknownRequest(_) => ErrorKind::NotFound,
            };
            return Err(GatewayError::new(kind, e.to_string()));
        }
        lock(&self.sessions).append(&skey, Role::User, text.trim(), SystemClock.now());
        let services = self.services.read().unwrap();
        let outcome = self.run_graph(&mut graph, &services, &user, t);
        drop(services);
        drop(slot);
        let scope = ScopeKey::user(user.user_id.clone(), self.scope_fingerprint(&user.certificate));
        Ok(self.conclude(request_id, &user, &skey, &scope, graph, outcome, false))
    }
}

pub fn session_key(user_id: &str, session_id: &str) -> String {
    format!("{user_id}/{session_id}")
}

fn random_key() -> String {
    use rand::RngCore;
    let mut bytes = [0u8; 32];
    rand::rng().fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
