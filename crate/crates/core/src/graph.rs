//! Per-request execution graphs: plan, validate, run, pause and resume.
//!
//! A routed request becomes `[binding, service_call.., presentation]`; an
//! abstained one becomes a single direct LLM call. Nodes run in order with a
//! single executor. When binding cannot produce valid parameters the binding
//! node turns into a user clarification and the graph parks until
//! [`resume`] feeds the answer back in.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::binding::{self, BoundOperation, Extraction, ExtractionRequest};
use crate::llm::{self, ChatMessage, LlmBackend};
use crate::router::RoutingDecision;
use crate::services::{ServiceDescriptor, ServiceError, ServiceInvoker, ServiceRegistry};
use crate::trace::Telemetry;
use crate::users::AccessCertificate;

pub const DEFAULT_MAX_ITERATIONS: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    LlmCall,
    ServiceCall,
    UserClarification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmPurpose {
    Binding,
    Presentation,
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeState {
    Pending,
    Running,
    AwaitingUser,
    Done,
    Failed,
}

impl NodeState {
    pub fn can_transition(self, to: NodeState) -> bool {
        use NodeState::*;
        matches!(
            (self, to),
            (Pending, Running) | (Running, Done) | (Running, Failed) | (Running, AwaitingUser) | (AwaitingUser, Running)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecNode {
    pub node_id: u32,
    pub kind: NodeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<LlmPurpose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub procedure: Option<String>,
    /// `None` until binding has produced them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arguments: Option<Vec<Value>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fragment: Option<String>,
    pub state: NodeState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    pub attempt_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExecNode {
    fn llm(purpose: LlmPurpose, fragment: Option<String>) -> Self {
        ExecNode {
            node_id: 0,
            kind: NodeKind::LlmCall,
            purpose: Some(purpose),
            service_name: None,
            procedure: None,
            arguments: None,
            prompt_fragment: fragment,
            state: NodeState::Pending,
            result: None,
            attempt_count: 0,
            error: None,
        }
    }

    fn service_call(service: &str, procedure: &str, arguments: Option<Vec<Value>>) -> Self {
        ExecNode {
            kind: NodeKind::ServiceCall,
            purpose: None,
            service_name: Some(service.into()),
            procedure: Some(procedure.into()),
            arguments,
            ..ExecNode::llm(LlmPurpose::Binding, None)
        }
    }

    fn set_state(&mut self, to: NodeState) {
        assert!(
            self.state.can_transition(to),
            "node {} cannot move from {:?} to {:?}",
            self.node_id,
            self.state,
            to
        );
        self.state = to;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphStatus {
    Planned,
    Running,
    AwaitingUser,
    Done,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecGraph {
    pub request_id: String,
    pub session_id: String,
    pub prompt: String,
    /// The prompt binding actually sees; differs from `prompt` after a
    /// clarification.
    pub effective_prompt: String,
    pub nodes: Vec<ExecNode>,
    pub iteration_count: u32,
    pub max_iterations: u32,
    pub status: GraphStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    /// Node executions so far, including retried bindings.
    pub steps: u64,
    #[serde(skip)]
    history: Vec<ChatMessage>,
}

impl ExecGraph {
    pub fn service_name(&self) -> Option<&str> {
        self.nodes.iter().find_map(|n| n.service_name.as_deref())
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.status, GraphStatus::Done | GraphStatus::Failed)
    }

    fn renumber(&mut self) {
        for (i, n) in self.nodes.iter_mut().enumerate() {
            n.node_id = i as u32;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("decision references unregistered service {0}")]
    UnknownService(String),
    #[error("decision references unknown procedure {service}.{procedure}")]
    UnknownProcedure { service: String, procedure: String },
}

pub struct PlanInput<'a> {
    pub request_id: &'a str,
    pub session_id: &'a str,
    pub prompt: &'a str,
    pub decision: &'a RoutingDecision,
    pub history: &'a [ChatMessage],
    pub max_iterations: u32,
}

pub fn plan(input: PlanInput<'_>, registry: &ServiceRegistry) -> Result<ExecGraph, PlanError> {
    let d = input.decision;
    let mut graph = ExecGraph {
        request_id: input.request_id.into(),
        session_id: input.session_id.into(),
        prompt: input.prompt.into(),
        effective_prompt: input.prompt.into(),
        nodes: Vec::new(),
        iteration_count: 0,
        max_iterations: input.max_iterations.max(1),
        status: GraphStatus::Planned,
        question: None,
        final_answer: None,
        failure: None,
        steps: 0,
        history: input.history.to_vec(),
    };
    if d.abstained {
        graph.nodes.push(ExecNode::llm(LlmPurpose::Direct, Some(input.prompt.into())));
        return Ok(graph);
    }
    let service = registry
        .get(&d.service_name)
        .ok_or_else(|| PlanError::UnknownService(d.service_name.clone()))?;
    if service.procedure(&d.procedure_name).is_none() {
        return Err(PlanError::UnknownProcedure {
            service: d.service_name.clone(),
            procedure: d.procedure_name.clone(),
        });
    }

    let ops: Vec<BoundOperation> = if !d.operations.is_empty() {
        d.operations.clone()
    } else if !d.arguments.is_empty() {
        alloc::vec![BoundOperation {
            service: d.service_name.clone(),
            procedure: d.procedure_name.clone(),
            arguments: d.arguments.clone(),
        }]
    } else {
        Vec::new()
    };

    let mut binding = ExecNode::llm(LlmPurpose::Binding, Some(input.prompt.into()));
    if !ops.is_empty() {
        // Routing already ran the binding protocol.
        binding.state = NodeState::Done;
        binding.attempt_count = 1;
        binding.result = serde_json::to_value(&ops).ok();
        graph.iteration_count = 1;
    } else if let Some(q) = &d.clarification {
        binding.kind = NodeKind::UserClarification;
        binding.purpose = None;
        binding.prompt_fragment = Some(q.clone());
        graph.iteration_count = 1;
    }
    graph.nodes.push(binding);
    if ops.is_empty() {
        graph
            .nodes
            .push(ExecNode::service_call(&d.service_name, &d.procedure_name, None));
    }
    for op in &ops {
        graph
            .nodes
            .push(ExecNode::service_call(&op.service, &op.procedure, Some(op.arguments.clone())));
    }
    graph.nodes.push(ExecNode::llm(LlmPurpose::Presentation, None));
    graph.renumber();
    Ok(graph)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    UnknownService,
    UnknownProcedure,
    Permission,
    Arity,
    Type,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationKind::UnknownService => "unknown_service",
            ViolationKind::UnknownProcedure => "unknown_procedure",
            ViolationKind::Permission => "permission",
            ViolationKind::Arity => "arity",
            ViolationKind::Type => "type",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node_id: u32,
    pub kind: ViolationKind,
    pub detail: String,
}

/// Checks every service call against the registry and the certificate.
/// Calls whose arguments are not bound yet are checked for existence and
/// permission only.
pub fn validate(
    graph: &ExecGraph,
    registry: &ServiceRegistry,
    certificate: &AccessCertificate,
) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    for n in graph.nodes.iter().filter(|n| n.kind == NodeKind::ServiceCall) {
        let service = n.service_name.as_deref().unwrap_or_default();
        let procedure = n.procedure.as_deref().unwrap_or_default();
        let mut push = |kind, detail: String| {
            out.push(Violation {
                node_id: n.node_id,
                kind,
                detail,
            })
        };
        if !certificate.allows_service(service) {
            push(ViolationKind::Permission, format!("certificate does not allow {service}"));
        }
        match registry.resolve(service, procedure) {
            Err(ServiceError::UnknownService(s)) => push(ViolationKind::UnknownService, s),
            Err(e) => push(ViolationKind::UnknownProcedure, e.to_string()),
            Ok((_, spec)) => {
                if let Some(args) = &n.arguments {
                    match spec.check_arguments(args) {
                        Ok(()) => {}
                        Err(e @ ServiceError::Arity { .. }) => push(ViolationKind::Arity, e.to_string()),
                        Err(e) => push(ViolationKind::Type, e.to_string()),
                    }
                }
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Cache for service-call results, keyed by the exact call.
pub trait CallCache {
    fn get(&self, service: &ServiceDescriptor, key: &str) -> Option<Value>;
    fn put(&self, service: &ServiceDescriptor, key: &str, value: &Value);
}

pub fn call_key(service: &str, procedure: &str, arguments: &[Value]) -> String {
    let args = serde_json::to_string(arguments).unwrap_or_default();
    format!("{service}.{procedure}({args})")
}

/// Observes nodes around their execution.
pub trait Interceptor {
    fn before_node(&self, _graph: &ExecGraph, _node: &ExecNode) {}
    fn after_node(&self, _graph: &ExecGraph, _node: &ExecNode) {}
}

pub struct ExecContext<'a> {
    pub backend: &'a dyn LlmBackend,
    pub invoker: &'a dyn ServiceInvoker,
    pub registry: &'a ServiceRegistry,
    pub certificate: &'a AccessCertificate,
    pub cache: Option<&'a dyn CallCache>,
    pub telemetry: Telemetry<'a>,
    pub interceptors: &'a [&'a dyn Interceptor],
    pub retries: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed { answer: String },
    AwaitingUser { question: String },
    Failed { cause: String },
}

enum Step {
    Next,
    Pause(String),
    Fail(String),
}

fn fail(graph: &mut ExecGraph, cause: String) -> RunOutcome {
    graph.status = GraphStatus::Failed;
    graph.failure = Some(cause.clone());
    RunOutcome::Failed { cause }
}

/// Runs pending nodes in order until the graph completes, fails or needs
/// the user. Terminal and parked graphs return their current outcome.
pub fn run(graph: &mut ExecGraph, ctx: &ExecContext<'_>) -> RunOutcome {
    match graph.status {
        GraphStatus::Done => {
            return RunOutcome::Completed {
                answer: graph.final_answer.clone().unwrap_or_default(),
            }
        }
        GraphStatus::Failed => {
            return RunOutcome::Failed {
                cause: graph.failure.clone().unwrap_or_default(),
            }
        }
        GraphStatus::AwaitingUser => {
            return RunOutcome::AwaitingUser {
                question: graph.question.clone().unwrap_or_default(),
            }
        }
        GraphStatus::Planned | GraphStatus::Running => {}
    }
    if let Err(v) = validate(graph, ctx.registry, ctx.certificate) {
        return fail(graph, format!("invalid graph: {}", render_violations(&v)));
    }
    graph.status = GraphStatus::Running;

    while let Some(i) = graph.nodes.iter().position(|n| n.state != NodeState::Done) {
        if graph.nodes[i].state == NodeState::Pending {
            graph.nodes[i].set_state(NodeState::Running);
        }
        for ic in ctx.interceptors {
            ic.before_node(graph, &graph.nodes[i]);
        }
        graph.steps += 1;
        let started = ctx.telemetry.now();
        let step = execute(graph, i, ctx);
        let node = &graph.nodes[i];
        let mut ev = ctx
            .telemetry
            .event("execution-graph", "node", started)
            .with("node_id", node.node_id.to_string())
            .with("kind", kind_name(node))
            .with("state", state_name(node.state));
        if let Some(s) = &node.service_name {
            ev = ev.with("service", s.clone());
        }
        if let Some(e) = &node.error {
            ev = ev.with("error", e.clone());
        }
        ctx.telemetry.emit(ev);
        for ic in ctx.interceptors {
            ic.after_node(graph, &graph.nodes[i]);
        }
        match step {
            Step::Next => {}
            Step::Pause(question) => {
                graph.status = GraphStatus::AwaitingUser;
                graph.question = Some(question.clone());
                return RunOutcome::AwaitingUser { question };
            }
            Step::Fail(cause) => return fail(graph, cause),
        }
    }
    graph.status = GraphStatus::Done;
    RunOutcome::Completed {
        answer: graph.final_answer.clone().unwrap_or_default(),
    }
}

fn render_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("{} at node {}: {}", x.kind, x.node_id, x.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

fn kind_name(n: &ExecNode) -> &'static str {
    match (n.kind, n.purpose) {
        (NodeKind::LlmCall, Some(LlmPurpose::Binding)) => "llm_call:binding",
        (NodeKind::LlmCall, Some(LlmPurpose::Presentation)) => "llm_call:presentation",
        (NodeKind::LlmCall, _) => "llm_call:direct",
        (NodeKind::ServiceCall, _) => "service_call",
        (NodeKind::UserClarification, _) => "user_clarification",
    }
}

fn state_name(s: NodeState) -> &'static str {
    match s {
        NodeState::Pending => "pending",
        NodeState::Running => "running",
        NodeState::AwaitingUser => "awaiting_user",
        NodeState::Done => "done",
        NodeState::Failed => "failed",
    }
}

fn node_failed(graph: &mut ExecGraph, i: usize, cause: String) -> Step {
    let node = &mut graph.nodes[i];
    node.error = Some(cause.clone());
    node.set_state(NodeState::Failed);
    Step::Fail(cause)
}

fn execute(graph: &mut ExecGraph, i: usize, ctx: &ExecContext<'_>) -> Step {
    match (graph.nodes[i].kind, graph.nodes[i].purpose) {
        (NodeKind::UserClarification, _) => {
            let q = graph.nodes[i].prompt_fragment.clone().unwrap_or_default();
            graph.nodes[i].set_state(NodeState::AwaitingUser);
            Step::Pause(q)
        }
        (NodeKind::ServiceCall, _) => execute_service_call(graph, i, ctx),
        (NodeKind::LlmCall, Some(LlmPurpose::Binding)) => execute_binding(graph, i, ctx),
        (NodeKind::LlmCall, Some(LlmPurpose::Presentation)) => {
            let results: Vec<Value> = graph
                .nodes
                .iter()
                .filter(|n| n.kind == NodeKind::ServiceCall)
                .filter_map(|n| n.result.clone())
                .collect();
            let results_json = serde_json::to_string(&results).unwrap_or_default();
            let msgs = llm::presentation_prompt(&results_json, &graph.prompt);
            finish_with_llm(graph, i, ctx, &msgs, Some(&results))
        }
        (NodeKind::LlmCall, _) => {
            let msgs = llm::direct_prompt(&graph.history, &graph.prompt);
            finish_with_llm(graph, i, ctx, &msgs, None)
        }
    }
}

fn finish_with_llm(
    graph: &mut ExecGraph,
    i: usize,
    ctx: &ExecContext<'_>,
    msgs: &[ChatMessage],
    results: Option<&[Value]>,
) -> Step {
    graph.nodes[i].attempt_count += 1;
    let out = ctx.telemetry.span("llm-backend", "complete", |_| ctx.backend.complete(msgs));
    let mut answer = match out {
        Ok(a) => a.trim().to_string(),
        Err(e) => return node_failed(graph, i, format!("llm backend: {e}")),
    };
    if answer.is_empty() {
        // An empty presentation is replaced by the raw results.
        match results {
            Some(r) if !r.is_empty() => {
                answer = r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ");
            }
            _ => return node_failed(graph, i, "llm backend returned an empty answer".into()),
        }
    }
    let node = &mut graph.nodes[i];
    node.result = Some(Value::String(answer.clone()));
    node.set_state(NodeState::Done);
    graph.final_answer = Some(answer);
    Step::Next
}

fn execute_binding(graph: &mut ExecGraph, i: usize, ctx: &ExecContext<'_>) -> Step {
    if graph.iteration_count >= graph.max_iterations {
        return node_failed(graph, i, "unresolved".into());
    }
    graph.iteration_count += 1;
    let Some(call) = graph.nodes[i + 1..].iter().find(|n| n.kind == NodeKind::ServiceCall) else {
        return node_failed(graph, i, "binding without a service call".into());
    };
    let service_name = call.service_name.clone().unwrap_or_default();
    let procedure = call.procedure.clone().unwrap_or_default();
    let Some(service) = ctx.registry.get(&service_name) else {
        return node_failed(graph, i, format!("service {service_name} is no longer registered"));
    };
    let allowed = service.procedure_names();
    let outcome = binding::extract_parameters(
        ctx.backend,
        ExtractionRequest {
            prompt: &graph.effective_prompt,
            service,
            procedure: &procedure,
            allowed_operations: &allowed,
            retries: ctx.retries,
        },
        &ctx.telemetry,
    );
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => return node_failed(graph, i, format!("llm backend: {e}")),
    };
    graph.nodes[i].attempt_count = outcome.attempts;
    match outcome.extraction {
        Extraction::Bound { operations } => {
            graph.nodes[i].result = serde_json::to_value(&operations).ok();
            graph.nodes[i].set_state(NodeState::Done);
            // Re-plan the remaining service calls from the fresh binding.
            let tail: Vec<ExecNode> = graph.nodes.split_off(i + 1);
            graph.nodes.extend(
                operations
                    .iter()
                    .map(|op| ExecNode::service_call(&op.service, &op.procedure, Some(op.arguments.clone()))),
            );
            graph
                .nodes
                .extend(tail.into_iter().filter(|n| n.kind != NodeKind::ServiceCall));
            graph.renumber();
            match validate(graph, ctx.registry, ctx.certificate) {
                Ok(()) => Step::Next,
                Err(v) => Step::Fail(format!("invalid graph: {}", render_violations(&v))),
            }
        }
        Extraction::ClarificationNeeded { question } => {
            let node = &mut graph.nodes[i];
            node.kind = NodeKind::UserClarification;
            node.purpose = None;
            node.prompt_fragment = Some(question.clone());
            node.set_state(NodeState::AwaitingUser);
            Step::Pause(question)
        }
    }
}

fn execute_service_call(graph: &mut ExecGraph, i: usize, ctx: &ExecContext<'_>) -> Step {
    let node = &graph.nodes[i];
    let service_name = node.service_name.clone().unwrap_or_default();
    let procedure = node.procedure.clone().unwrap_or_default();
    let Some(arguments) = node.arguments.clone() else {
        return node_failed(graph, i, format!("{service_name}.{procedure} has no bound arguments"));
    };
    // Validation already ran; this guards against a graph mutated since.
    if !ctx.certificate.allows_service(&service_name) {
        return node_failed(graph, i, format!("permission: {service_name}"));
    }
    let Some(service) = ctx.registry.get(&service_name) else {
        return node_failed(graph, i, format!("unknown service {service_name}"));
    };
    let key = call_key(&service_name, &procedure, &arguments);
    let cached = ctx.cache.and_then(|c| c.get(service, &key));
    let hit = cached.is_some();
    let result = match cached {
        Some(v) => Ok(v),
        None => ctx.telemetry.span("service-registry", "invoke", |ev| {
            ev.attributes.insert("service".into(), service_name.clone());
            ev.attributes.insert("procedure".into(), procedure.clone());
            ctx.registry.invoke(ctx.invoker, &service_name, &procedure, &arguments)
        }),
    };
    let node = &mut graph.nodes[i];
    node.attempt_count += 1;
    match result {
        Ok(v) => {
            if !hit {
                if let Some(c) = ctx.cache {
                    c.put(service, &key, &v);
                }
            }
            ctx.telemetry.emit(
                ctx.telemetry
                    .event("cache", if hit { "call-hit" } else { "call-miss" }, ctx.telemetry.now())
                    .with("key", key),
            );
            node.result = Some(v);
            node.set_state(NodeState::Done);
            Step::Next
        }
        Err(e) => node_failed(graph, i, format!("service {service_name}.{procedure} failed: {e}")),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResumeError {
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("request is not awaiting user input")]
    NotAwaiting,
    #[error("clarification text is empty")]
    EmptyInput,
}

/// Feeds the user's answer to the parked clarification node. The caller
/// then calls [`run`] to continue.
pub fn resume(graph: &mut ExecGraph, user_input: &str) -> Result<(), ResumeError> {
    if graph.status != GraphStatus::AwaitingUser {
        return Err(ResumeError::NotAwaiting);
    }
    if user_input.trim().is_empty() {
        return Err(ResumeError::EmptyInput);
    }
    let Some(node) = graph.nodes.iter_mut().find(|n| n.state == NodeState::AwaitingUser) else {
        return Err(ResumeError::NotAwaiting);
    };
    node.kind = NodeKind::LlmCall;
    node.purpose = Some(LlmPurpose::Binding);
    node.set_state(NodeState::Running);
    graph.effective_prompt = llm::with_clarification(&graph.prompt, user_input.trim());
    graph.status = GraphStatus::Running;
    graph.question = None;
    Ok(())
}
