//! Deterministic stand-in for an LLM.
//!
//! The output is a pure function of the messages (and the fault settings
//! fixed at construction):
//!
//! * discovery prompts pick the application whose meta-information shares
//!   the most keywords with the prompt, or answer with an empty string;
//! * binding prompts map the first operation verb found in the prompt to an
//!   allowed operation and list every number in textual order;
//! * presentation prompts echo the service results;
//! * anything else gets a "mental arithmetic" answer computed in floating
//!   point, which is exact only for small magnitudes.
//!
//! Fault injection replaces a binding answer with malformed or adversarial
//! output with the configured probability, keyed on a hash of the messages
//! so retries (which add turns) can recover.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::embed::fnv1a;
use crate::llm::{self, BackendError, ChatMessage, LlmBackend, Role};
use crate::text;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MockConfig {
    /// Probability that a binding answer is replaced by a fault.
    #[serde(default)]
    pub fault_probability: f64,
    #[serde(default)]
    pub fault_seed: u64,
    /// Services an adversarial fault will try to smuggle into the binding.
    #[serde(default)]
    pub adversarial_services: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct MockBackend {
    config: MockConfig,
}

const VERBS: &[(&str, &[&str])] = &[
    ("add", &["add", "adding", "plus", "sum", "total", "increase"]),
    ("subtract", &["subtract", "subtracting", "minus", "deduct", "less"]),
    ("multiply", &["multiply", "multiplying", "multiplied", "times", "product"]),
    ("divide", &["divide", "divided", "quotient"]),
];

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "can", "could", "do", "does", "examples", "for", "from", "how",
    "i", "in", "is", "it", "me", "my", "of", "on", "operations", "or", "please", "the", "to", "what", "with", "would",
    "you", "your", "this", "that", "tell", "give", "get",
];

impl MockBackend {
    pub fn new(config: MockConfig) -> Self {
        MockBackend { config }
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn fault_roll(&self, messages: &[ChatMessage]) -> (bool, u64) {
        let mut buf = Vec::new();
        buf.extend_from_slice(&self.config.fault_seed.to_le_bytes());
        for m in messages {
            buf.push(m.role as u8);
            buf.extend_from_slice(m.content.as_bytes());
            buf.push(0);
        }
        let h = fnv1a(&buf);
        // fnv1a's low bits mix poorly on short inputs; fold before sampling.
        let mixed = splitmix(h);
        let u = (mixed >> 11) as f64 / (1u64 << 53) as f64;
        (u < self.config.fault_probability, mixed)
    }

    fn discovery(&self, system: &str, prompt: &str) -> String {
        let body = system
            .strip_prefix(llm::DISCOVERY_PREFIX)
            .and_then(|s| s.split(llm::DISCOVERY_INSTRUCTION).next())
            .unwrap_or("");
        let prompt_words: BTreeSet<String> = keywords(prompt);
        let mut best: Option<(&str, usize)> = None;
        for line in body.lines() {
            let Some(entry) = line.trim().strip_prefix("- ") else { continue };
            let Some((name, meta)) = entry.split_once(':') else { continue };
            let mut keys = keywords(meta);
            keys.extend(keywords(name));
            let score = prompt_words.intersection(&keys).count();
            if score > 0 && best.is_none_or(|(_, s)| score > s) {
                best = Some((name.trim(), score));
            }
        }
        best.map(|(n, _)| n.to_string()).unwrap_or_default()
    }

    fn binding(&self, system: &str, messages: &[ChatMessage]) -> String {
        let allowed: Vec<String> = system
            .strip_prefix(llm::BINDING_PREFIX)
            .and_then(|s| {
                let s = s.trim_start();
                let end = s.find(']')?;
                serde_json::from_str(&s[..=end]).ok()
            })
            .unwrap_or_default();
        // The request is the first user turn; later turns are retry nudges.
        let prompt = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");

        let (faulty, roll) = self.fault_roll(messages);
        if faulty {
            return self.fault_output(roll, prompt);
        }

        let (original, clarification) = match prompt.split_once(llm::CLARIFICATION_MARKER.trim_start_matches('\n')) {
            Some((o, c)) => (o, Some(c)),
            None => (prompt, None),
        };
        let op = clarification
            .and_then(|c| find_operation(c, &allowed))
            .or_else(|| find_operation(original, &allowed));
        let numbers = match clarification.map(number_literals) {
            Some(n) if !n.is_empty() => n,
            _ => number_literals(original),
        };
        match op {
            Some(op) => format!("[{{\"operation\": \"{op}\", \"numbers\": [{}]}}]", numbers.join(", ")),
            None => String::from("I could not match the request to one of the allowed operations."),
        }
    }

    fn fault_output(&self, roll: u64, prompt: &str) -> String {
        let nums = number_literals(prompt).join(", ");
        let kinds = if self.config.adversarial_services.is_empty() { 3 } else { 4 };
        match (roll >> 3) % kinds {
            0 => format!("Sure! The numbers in your request are {nums}."),
            1 => format!("[{{\"operation\": \"exfiltrate\", \"numbers\": [{nums}]}}]"),
            2 => format!("[{{\"operation\": \"add\", \"numbers\": [{nums}"),
            _ => {
                let svc = &self.config.adversarial_services
                    [(roll >> 7) as usize % self.config.adversarial_services.len()];
                format!("[{{\"service\": \"{svc}\", \"operation\": \"add\", \"numbers\": [{nums}]}}]")
            }
        }
    }

    fn presentation(&self, system: &str) -> String {
        let results = system
            .lines()
            .find_map(|l| l.strip_prefix("RESULTS: "))
            .and_then(|r| serde_json::from_str::<Vec<serde_json::Value>>(r).ok())
            .unwrap_or_default();
        let rendered: Vec<String> = results.iter().map(render_value).collect();
        rendered.join(", ")
    }

    fn chat(&self, prompt: &str) -> String {
        let Some(op) = find_operation(prompt, &["add", "subtract", "multiply", "divide"].map(String::from)) else {
            return String::from("I can only help with requests that match a registered service.");
        };
        let nums: Vec<f64> = number_literals(prompt).iter().filter_map(|n| n.parse().ok()).collect();
        let Some((first, rest)) = nums.split_first() else {
            return String::from("Which numbers should I use?");
        };
        let value = rest.iter().fold(*first, |acc, x| match op.as_str() {
            "add" => acc + x,
            "subtract" => acc - x,
            "multiply" => acc * x,
            _ => acc / x,
        });
        if value.is_finite() && value == libm::trunc(value) {
            format!("The answer is {value:.0}.")
        } else {
            format!("The answer is {value}.")
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn render_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn keywords(s: &str) -> BTreeSet<String> {
    text::words(s)
        .into_iter()
        .filter(|w| !text::is_numeric(w) && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// First word of `s` that names, or is a verb for, an allowed operation.
fn find_operation(s: &str, allowed: &[String]) -> Option<String> {
    for word in text::words(s) {
        if let Some(op) = allowed.iter().find(|a| a.eq_ignore_ascii_case(&word)) {
            return Some(op.clone());
        }
        for (op, verbs) in VERBS {
            if verbs.contains(&word.as_str()) && allowed.iter().any(|a| a == op) {
                return Some((*op).to_string());
            }
        }
    }
    None
}

/// Unsigned integer and decimal literals in textual order.
pub fn number_literals(s: &str) -> Vec<String> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let boundary = i == 0 || !bytes[i - 1].is_ascii_alphanumeric();
        if bytes[i].is_ascii_digit() && boundary {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            if i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                // part of a token like "3rd" or "10x"
                while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
                    i += 1;
                }
                continue;
            }
            let lit = s[start..i].trim_start_matches('0');
            out.push(if lit.is_empty() || lit.starts_with('.') {
                format!("0{lit}")
            } else {
                lit.to_string()
            });
        } else {
            i += 1;
        }
    }
    out
}

impl LlmBackend for MockBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        llm::validate_messages(messages)?;
        let system = messages
            .first()
            .filter(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let last_user = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        Ok(if system.starts_with(llm::DISCOVERY_PREFIX) {
            self.discovery(system, last_user)
        } else if system.starts_with(llm::BINDING_PREFIX) {
            self.binding(system, messages)
        } else if system.starts_with(llm::PRESENTATION_PREFIX) {
            self.presentation(system)
        } else {
            self.chat(last_user)
        })
    }
}
