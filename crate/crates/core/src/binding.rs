//! Parameter extraction through the binding prompt.
//!
//! The model is asked for a JSON list of `{"operation", "numbers"}` objects.
//! Every answer is parsed and checked against the routed service before
//! anything is invoked: operations must be allowed, an explicitly named
//! service must be the routed one, and arguments must type-check against
//! the procedure's slots. Rejected answers are retried with a corrective
//! turn; after the retry budget the caller gets a clarification question.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm::{self, BackendError, LlmBackend};
use crate::services::{ServiceDescriptor, ServiceError, SlotType};
use crate::trace::Telemetry;

pub const DEFAULT_RETRIES: u32 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundOperation {
    pub service: String,
    pub procedure: String,
    pub arguments: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Extraction {
    Bound { operations: Vec<BoundOperation> },
    ClarificationNeeded { question: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindingError {
    #[error("output is not a JSON list: {0}")]
    NotJson(String),
    #[error("output lists no operations")]
    Empty,
    #[error("entry {0} is not an object with an operation")]
    MalformedEntry(usize),
    #[error("operation {0} is not allowed")]
    OperationNotAllowed(String),
    #[error("service {0} is not the routed service")]
    ForeignService(String),
    #[error(transparent)]
    Arguments(#[from] ServiceError),
}

#[derive(Deserialize)]
struct RawEntry {
    operation: Option<String>,
    service: Option<String>,
    #[serde(default)]
    numbers: Option<Vec<Value>>,
    #[serde(default)]
    arguments: Option<Vec<Value>>,
}

fn strip_fences(s: &str) -> &str {
    let s = s.trim();
    let Some(inner) = s.strip_prefix("```") else { return s };
    let inner = inner.strip_prefix("json").unwrap_or(inner);
    inner.strip_suffix("```").unwrap_or(inner).trim()
}

/// Parses and validates one binding answer against `service`, accepting
/// only operations in `allowed`.
pub fn parse_binding(output: &str, service: &ServiceDescriptor, allowed: &[&str]) -> Result<Vec<BoundOperation>, BindingError> {
    let raw: Vec<Value> =
        serde_json::from_str(strip_fences(output)).map_err(|e| BindingError::NotJson(e.to_string()))?;
    if raw.is_empty() {
        return Err(BindingError::Empty);
    }
    let mut ops = Vec::with_capacity(raw.len());
    for (i, item) in raw.into_iter().enumerate() {
        let entry: RawEntry = serde_json::from_value(item).map_err(|_| BindingError::MalformedEntry(i))?;
        let Some(op) = entry.operation else {
            return Err(BindingError::MalformedEntry(i));
        };
        let (named_service, op) = match op.split_once('.') {
            Some((s, o)) => (Some(String::from(s)), String::from(o)),
            None => (None, op),
        };
        for s in entry.service.iter().chain(named_service.iter()) {
            if *s != service.name {
                return Err(BindingError::ForeignService(s.clone()));
            }
        }
        if !allowed.contains(&op.as_str()) {
            return Err(BindingError::OperationNotAllowed(op));
        }
        let proc_ = service
            .procedure(&op)
            .ok_or_else(|| BindingError::OperationNotAllowed(op.clone()))?;
        let arguments = entry.arguments.or(entry.numbers).unwrap_or_default();
        proc_.check_arguments(&arguments)?;
        ops.push(BoundOperation {
            service: service.name.clone(),
            procedure: op,
            arguments,
        });
    }
    Ok(ops)
}

/// Question shown to the user when extraction gives up.
pub fn clarification_question(service: &ServiceDescriptor, procedure: &str) -> String {
    let slot = service.procedure(procedure).and_then(|p| p.slots.first());
    match slot {
        Some(s) if s.kind == SlotType::Number => format!("Which numbers should I use for {procedure}?"),
        Some(s) => format!("What {} should I use for {procedure}?", s.name),
        None => format!("Could you rephrase what {procedure} should do?"),
    }
}

#[derive(Clone, Copy)]
pub struct ExtractionRequest<'a> {
    pub prompt: &'a str,
    pub service: &'a ServiceDescriptor,
    /// Procedure the router ranked first; used for the clarification question.
    pub procedure: &'a str,
    pub allowed_operations: &'a [&'a str],
    pub retries: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionOutcome {
    pub extraction: Extraction,
    pub attempts: u32,
    pub rejections: Vec<String>,
}

/// Runs the binding protocol with up to `retries` corrective retries.
/// Unusable output never errors; only backend failures do.
pub fn extract_parameters(
    backend: &dyn LlmBackend,
    req: ExtractionRequest<'_>,
    telemetry: &Telemetry<'_>,
) -> Result<ExtractionOutcome, BackendError> {
    let clarify = || Extraction::ClarificationNeeded {
        question: clarification_question(req.service, req.procedure),
    };
    let Ok(mut messages) = llm::binding_prompt(req.allowed_operations, req.prompt) else {
        return Ok(ExtractionOutcome {
            extraction: clarify(),
            attempts: 0,
            rejections: Vec::new(),
        });
    };
    let mut rejections = Vec::new();
    for attempt in 1..=req.retries + 1 {
        let output = telemetry.span("llm-backend", "binding", |ev| {
            ev.attributes.insert("attempt".into(), attempt.to_string());
            backend.complete(&messages)
        })?;
        match parse_binding(&output, req.service, req.allowed_operations) {
            Ok(operations) => {
                return Ok(ExtractionOutcome {
                    extraction: Extraction::Bound { operations },
                    attempts: attempt,
                    rejections,
                })
            }
            Err(e) => {
                let problem = e.to_string();
                telemetry.emit(
                    telemetry
                        .event("execution-graph", "binding-rejected", telemetry.now())
                        .with("attempt", attempt.to_string())
                        .with("reason", problem.clone()),
                );
                messages = llm::binding_retry(&messages, &output, &problem);
                rejections.push(problem);
            }
        }
    }
    Ok(ExtractionOutcome {
        extraction: clarify(),
        attempts: req.retries + 1,
        rejections,
    })
}
