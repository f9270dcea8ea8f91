//! LLM backend contract and the prompt protocols the gateway speaks.
//!
//! Two protocols come straight from the gateway design: *discovery* (pick
//! the registered application that fits a prompt, or return an empty
//! string) and *binding* (map prompt elements onto allowed operations as a
//! JSON list of `{"operation", "numbers"}` objects). Presentation and direct
//! answers are plain chat.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend timed out")]
    Timeout,
    #[error("backend transport failure: {0}")]
    Transport(String),
    #[error("malformed provider response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait LlmBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for &T {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(messages)
    }
}

/// Checks the shape every backend requires: non-empty, ending with a user
/// turn, and no empty user or system content.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    match messages.last() {
        None => return Err(BackendError::InvalidRequest("no messages".into())),
        Some(m) if m.role != Role::User => {
            return Err(BackendError::InvalidRequest("last message must come from the user".into()))
        }
        _ => {}
    }
    if messages
        .iter()
        .any(|m| m.role != Role::Assistant && m.content.trim().is_empty())
    {
        return Err(BackendError::InvalidRequest("empty user or system message".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("user prompt is empty")]
    EmptyPrompt,
    #[error("no applications to choose from")]
    EmptyRegistry,
    #[error("no allowed operations")]
    NoOperations,
}

pub const DISCOVERY_PREFIX: &str = "Given the following list of applications:";
pub const DISCOVERY_INSTRUCTION: &str = "return only the app which you think is appropriate to help with the following prompt. If you think the app is not appropriate or not relevant to help, simply return an empty string.";
pub const BINDING_PREFIX: &str = "Given the following allowed operations:";
pub const BINDING_INSTRUCTION: &str = "identify which elements from the prompt should be associated with what operation, and only return a JSON formatted list of that (operation, and numbers). For example, the JSON should look like this: [{\"operation\": \"add\", \"numbers\": [3, 3]}] The response should only contain the JSON.";
pub const PRESENTATION_PREFIX: &str = "Answer the user's request using only these service results:";
pub const CLARIFICATION_MARKER: &str = "\n\nClarification: ";

/// Renders registry meta-information, one application per line in the
/// order given.
pub fn render_registry_meta(services: &[(&str, &str)]) -> String {
    let mut out = String::new();
    for (name, description) in services {
        out.push_str("\n- ");
        out.push_str(name);
        out.push_str(": ");
        out.push_str(description.trim());
    }
    out.push('\n');
    out
}

/// `services` pairs a service name with its meta-information.
pub fn discovery_prompt(services: &[(&str, &str)], user_prompt: &str) -> Result<Vec<ChatMessage>, PromptError> {
    if services.is_empty() {
        return Err(PromptError::EmptyRegistry);
    }
    if user_prompt.trim().is_empty() {
        return Err(PromptError::EmptyPrompt);
    }
    let meta = render_registry_meta(services);
    Ok(vec![
        ChatMessage::system(format!("{DISCOVERY_PREFIX} {meta}{DISCOVERY_INSTRUCTION}")),
        ChatMessage::user(user_prompt),
    ])
}

pub fn render_operations(ops: &[&str]) -> String {
    serde_json::to_string(ops).unwrap_or_default()
}

pub fn binding_prompt(allowed_operations: &[&str], user_prompt: &str) -> Result<Vec<ChatMessage>, PromptError> {
    if allowed_operations.is_empty() {
        return Err(PromptError::NoOperations);
    }
    if user_prompt.trim().is_empty() {
        return Err(PromptError::EmptyPrompt);
    }
    Ok(vec![
        ChatMessage::system(format!(
            "{BINDING_PREFIX} {}, {BINDING_INSTRUCTION}",
            render_operations(allowed_operations)
        )),
        ChatMessage::user(user_prompt),
    ])
}

/// Follow-up turn asking the model to fix an invalid binding answer.
pub fn binding_retry(previous: &[ChatMessage], bad_output: &str, problem: &str) -> Vec<ChatMessage> {
    let mut msgs = previous.to_vec();
    msgs.push(ChatMessage::assistant(bad_output));
    msgs.push(ChatMessage::user(format!(
        "That answer was rejected ({problem}). Return only the JSON list."
    )));
    msgs
}

/// The prompt used after a user answered a clarification question.
pub fn with_clarification(prompt: &str, clarification: &str) -> String {
    format!("{prompt}{CLARIFICATION_MARKER}{clarification}")
}

pub fn presentation_prompt(results_json: &str, user_prompt: &str) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(format!(
            "{PRESENTATION_PREFIX}\nRESULTS: {results_json}\nReply with the final result only."
        )),
        ChatMessage::user(user_prompt.to_string()),
    ]
}

pub fn direct_prompt(history: &[ChatMessage], user_prompt: &str) -> Vec<ChatMessage> {
    let mut msgs: Vec<ChatMessage> = history
        .iter()
        .filter(|m| !m.content.trim().is_empty())
        .cloned()
        .collect();
    msgs.push(ChatMessage::user(user_prompt));
    msgs
}
