//! Service registry: descriptors, validation, argument type-checking and the
//! RPC-like invocation contract.
//!
//! Services implement a single route, `POST {endpoint}/invoke`, taking an
//! [`InvokeRequest`] and answering with an [`InvokeResponse`]. The transport
//! itself is behind [`ServiceInvoker`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embed::fnv1a;
use crate::text;
use crate::time::Timestamp;
use crate::users::AccessCertificate;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotType {
    Number,
    String,
    Date,
    Enum(Vec<String>),
}

impl SlotType {
    pub fn accepts(&self, value: &Value) -> bool {
        match (self, value) {
            (SlotType::Number, Value::Number(_)) => true,
            (SlotType::String, Value::String(_)) => true,
            (SlotType::Date, Value::String(s)) => is_iso_date(s),
            (SlotType::Enum(values), Value::String(s)) => values.iter().any(|v| v == s),
            _ => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SlotType::Number => "number",
            SlotType::String => "string",
            SlotType::Date => "date",
            SlotType::Enum(_) => "enum",
        }
    }
}

fn is_iso_date(s: &str) -> bool {
    let b = s.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return false;
    }
    let digits = |r: core::ops::Range<usize>| -> Option<u32> {
        let part = &s[r];
        if part.bytes().all(|c| c.is_ascii_digit()) {
            part.parse().ok()
        } else {
            None
        }
    };
    match (digits(0..4), digits(5..7), digits(8..10)) {
        (Some(y), Some(m), Some(d)) => {
            let leap = (y % 4 == 0 && y % 100 != 0) || y % 400 == 0;
            let days = match m {
                1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
                4 | 6 | 9 | 11 => 30,
                2 if leap => 29,
                2 => 28,
                _ => return false,
            };
            (1..=days).contains(&d)
        }
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: SlotType,
    /// A repeated slot takes one or more values. Only the last slot of a
    /// procedure may repeat.
    #[serde(default)]
    pub many: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureSpec {
    pub name: String,
    #[serde(default)]
    pub slots: Vec<SlotSpec>,
    pub returns: SlotType,
}

impl ProcedureSpec {
    pub fn slot(&self, name: &str) -> Option<&SlotSpec> {
        self.slots.iter().find(|s| s.name == name)
    }

    /// Checks a flat argument list against the slots. A repeated last slot
    /// absorbs every trailing argument.
    pub fn check_arguments(&self, args: &[Value]) -> Result<(), ServiceError> {
        let repeated = self.slots.last().is_some_and(|s| s.many);
        let fixed = if repeated { self.slots.len() - 1 } else { self.slots.len() };
        let arity_ok = if repeated { args.len() > fixed } else { args.len() == fixed };
        if !arity_ok {
            return Err(ServiceError::Arity {
                procedure: self.name.clone(),
                expected: self.slots.len(),
                repeated,
                got: args.len(),
            });
        }
        for (i, arg) in args.iter().enumerate() {
            let slot = &self.slots[i.min(self.slots.len() - 1)];
            if !slot.kind.accepts(arg) {
                return Err(ServiceError::TypeMismatch {
                    slot: slot.name.clone(),
                    expected: slot.kind.name(),
                    got: arg.to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtteranceTemplate {
    pub text: String,
    pub procedure: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub endpoint: String,
    pub procedures: Vec<ProcedureSpec>,
    #[serde(default)]
    pub utterances: Vec<UtteranceTemplate>,
    #[serde(default)]
    pub registered_at: Timestamp,
    /// Opt in to a prompt cache shared by all users of this service.
    #[serde(default)]
    pub shared_cache: bool,
}

impl ServiceDescriptor {
    pub fn procedure(&self, name: &str) -> Option<&ProcedureSpec> {
        self.procedures.iter().find(|p| p.name == name)
    }

    pub fn procedure_names(&self) -> Vec<&str> {
        self.procedures.iter().map(|p| p.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let invalid = |msg: String| Err(ServiceError::Invalid(msg));
        if self.name.trim().is_empty() {
            return invalid("service name is empty".into());
        }
        if self.procedures.is_empty() {
            return invalid(format!("service {} declares no procedures", self.name));
        }
        let mut names = BTreeSet::new();
        for p in &self.procedures {
            if !names.insert(p.name.as_str()) {
                return invalid(format!("duplicate procedure {}", p.name));
            }
            let mut slots = BTreeSet::new();
            for (i, s) in p.slots.iter().enumerate() {
                if !slots.insert(s.name.as_str()) {
                    return invalid(format!("duplicate slot {} in {}", s.name, p.name));
                }
                if s.many && i + 1 != p.slots.len() {
                    return invalid(format!("only the last slot of {} may repeat", p.name));
                }
            }
        }
        for u in &self.utterances {
            if u.text.trim().is_empty() {
                return invalid("empty utterance".into());
            }
            let Some(proc_) = self.procedure(&u.procedure) else {
                return invalid(format!("utterance {:?} names unknown procedure {}", u.text, u.procedure));
            };
            for ph in text::placeholders(&u.text) {
                if proc_.slot(&ph).is_none() {
                    return Err(ServiceError::UnknownPlaceholder {
                        placeholder: ph,
                        utterance: u.text.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Hash of everything that affects call results (registration time excluded).
    pub fn config_hash(&self) -> u64 {
        let mut copy = self.clone();
        copy.registered_at = Timestamp(0);
        let canonical = serde_json::to_string(&copy).unwrap_or_default();
        fnv1a(canonical.as_bytes())
    }

    /// One-line summary used as meta-information in discovery prompts.
    pub fn meta_line(&self) -> String {
        let procs = self.procedure_names().join(", ");
        let mut line = format!("{}: {} (operations: {})", self.name, self.description.trim(), procs);
        if !self.utterances.is_empty() {
            let examples: Vec<&str> = self.utterances.iter().map(|u| u.text.as_str()).collect();
            line.push_str(&format!(" examples: {}", examples.join("; ")));
        }
        line
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvokeRequest {
    pub procedure: String,
    pub arguments: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvokeResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl InvokeResponse {
    pub fn success(result: Value) -> Self {
        InvokeResponse {
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(error: impl Into<String>) -> Self {
        InvokeResponse {
            ok: false,
            result: None,
            error: Some(error.into()),
        }
    }

    pub fn into_result(self) -> Result<Value, ServiceError> {
        match (self.ok, self.result) {
            (true, Some(v)) => Ok(v),
            (true, None) => Err(ServiceError::Transport("response marked ok without a result".into())),
            (false, _) => Err(ServiceError::Remote(self.error.unwrap_or_else(|| "unspecified error".into()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("service {0} already registered")]
    Duplicate(String),
    #[error("invalid descriptor: {0}")]
    Invalid(String),
    #[error("utterance {utterance:?} uses undeclared slot {{{placeholder}}}")]
    UnknownPlaceholder { placeholder: String, utterance: String },
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("unknown procedure {service}.{procedure}")]
    UnknownProcedure { service: String, procedure: String },
    #[error("{procedure} takes {expected} slot(s){}, got {got} argument(s)", if *repeated { " (last repeated)" } else { "" })]
    Arity {
        procedure: String,
        expected: usize,
        repeated: bool,
        got: usize,
    },
    #[error("slot {slot} expects {expected}, got {got}")]
    TypeMismatch {
        slot: String,
        expected: &'static str,
        got: String,
    },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("service error: {0}")]
    Remote(String),
}

pub trait ServiceInvoker {
    /// Sends one request to the service. Callers guarantee the service is
    /// registered and the arguments type-check.
    fn invoke(&self, service: &ServiceDescriptor, request: &InvokeRequest) -> Result<Value, ServiceError>;
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ServiceRegistry {
    services: Vec<ServiceDescriptor>,
}

impl ServiceRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_service(&mut self, mut descriptor: ServiceDescriptor, now: Timestamp) -> Result<(), ServiceError> {
        descriptor.validate()?;
        if self.get(&descriptor.name).is_some() {
            return Err(ServiceError::Duplicate(descriptor.name));
        }
        descriptor.registered_at = now;
        self.services.push(descriptor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ServiceDescriptor> {
        self.services.iter().find(|s| s.name == name)
    }

    pub fn all(&self) -> &[ServiceDescriptor] {
        &self.services
    }

    pub fn get_available_services(&self, certificate: &AccessCertificate) -> Vec<&ServiceDescriptor> {
        self.services
            .iter()
            .filter(|s| certificate.allows_service(&s.name))
            .collect()
    }

    pub fn resolve(&self, service: &str, procedure: &str) -> Result<(&ServiceDescriptor, &ProcedureSpec), ServiceError> {
        let desc = self
            .get(service)
            .ok_or_else(|| ServiceError::UnknownService(service.into()))?;
        let proc_ = desc.procedure(procedure).ok_or_else(|| ServiceError::UnknownProcedure {
            service: service.into(),
            procedure: procedure.into(),
        })?;
        Ok((desc, proc_))
    }

    /// Looks up and type-checks the call, then dispatches through `invoker`.
    /// Nothing reaches the invoker unless both checks pass.
    pub fn invoke(
        &self,
        invoker: &dyn ServiceInvoker,
        service: &str,
        procedure: &str,
        arguments: &[Value],
    ) -> Result<Value, ServiceError> {
        let (desc, proc_) = self.resolve(service, procedure)?;
        proc_.check_arguments(arguments)?;
        invoker.invoke(
            desc,
            &InvokeRequest {
                procedure: procedure.into(),
                arguments: arguments.to_vec(),
            },
        )
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::users::WorkerClass;
    use alloc::vec;
    use core::cell::RefCell;
    use serde_json::json;

    pub fn calculator() -> ServiceDescriptor {
        serde_json::from_value(json!({
            "name": "calculator",
            "description": "does arithmetic on lists of numbers",
            "endpoint": "builtin://calculator",
            "procedures": [
                {"name": "add", "slots": [{"name": "numbers", "type": "number", "many": true}], "returns": "number"},
                {"name": "multiply", "slots": [{"name": "numbers", "type": "number", "many": true}], "returns": "number"}
            ],
            "utterances": [
                {"text": "add {numbers} and {numbers}", "procedure": "add"},
                {"text": "multiply {numbers} by {numbers}", "procedure": "multiply"}
            ]
        }))
        .unwrap()
    }

    fn weather() -> ServiceDescriptor {
        serde_json::from_value(json!({
            "name": "weather",
            "description": "forecasts",
            "endpoint": "http://weather",
            "procedures": [{"name": "forecast", "slots": [
                {"name": "city", "type": "string"},
                {"name": "day", "type": "date"},
                {"name": "unit", "type": {"enum": ["c", "f"]}}
            ], "returns": "string"}],
            "utterances": [{"text": "weather in {city} on {day}", "procedure": "forecast"}]
        }))
        .unwrap()
    }

    #[derive(Default)]
    pub struct Recorder {
        pub calls: RefCell<Vec<(String, InvokeRequest)>>,
    }

    impl ServiceInvoker for Recorder {
        fn invoke(&self, service: &ServiceDescriptor, request: &InvokeRequest) -> Result<Value, ServiceError> {
            self.calls.borrow_mut().push((service.name.clone(), request.clone()));
            Ok(Value::Null)
        }
    }

    #[test]
    fn register_and_list() {
        let mut reg = ServiceRegistry::new();
        reg.register_service(calculator(), Timestamp(5)).unwrap();
        reg.register_service(weather(), Timestamp(6)).unwrap();
        let cert = AccessCertificate::new(["calculator"], [WorkerClass::Cpu]);
        let names: Vec<_> = reg.get_available_services(&cert).iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["calculator"]);
        assert!(reg.get_available_services(&AccessCertificate::default()).is_empty());
        let both = AccessCertificate::new(["weather", "calculator"], []);
        let names: Vec<_> = reg.get_available_services(&both).iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["calculator", "weather"]);
        assert_eq!(reg.get("calculator").unwrap().registered_at, Timestamp(5));
    }

    #[test]
    fn duplicate_and_invalid() {
        let mut reg = ServiceRegistry::new();
        reg.register_service(calculator(), Timestamp(0)).unwrap();
        assert_eq!(
            reg.register_service(calculator(), Timestamp(0)),
            Err(ServiceError::Duplicate("calculator".into()))
        );
        let mut bad = weather();
        bad.utterances.push(UtteranceTemplate {
            text: "{z} please".into(),
            procedure: "forecast".into(),
        });
        assert!(matches!(
            reg.register_service(bad, Timestamp(0)),
            Err(ServiceError::UnknownPlaceholder { placeholder, .. }) if placeholder == "z"
        ));
        let mut empty = weather();
        empty.procedures.clear();
        empty.utterances.clear();
        assert!(matches!(empty.validate(), Err(ServiceError::Invalid(_))));
    }

    #[test]
    fn type_checking() {
        let w = weather();
        let p = w.procedure("forecast").unwrap();
        assert!(p.check_arguments(&[json!("Paris"), json!("2024-02-29"), json!("c")]).is_ok());
        assert!(matches!(
            p.check_arguments(&[json!("Paris"), json!("2023-02-29"), json!("c")]),
            Err(ServiceError::TypeMismatch { slot, .. }) if slot == "day"
        ));
        assert!(matches!(
            p.check_arguments(&[json!("Paris"), json!("2024-01-01"), json!("k")]),
            Err(ServiceError::TypeMismatch { slot, .. }) if slot == "unit"
        ));
        assert!(matches!(p.check_arguments(&[json!("Paris")]), Err(ServiceError::Arity { .. })));

        let c = calculator();
        let add = c.procedure("add").unwrap();
        assert!(add.check_arguments(&[json!(5), json!(3), json!(2)]).is_ok());
        assert!(matches!(add.check_arguments(&[]), Err(ServiceError::Arity { .. })));
        assert!(matches!(add.check_arguments(&[json!("x")]), Err(ServiceError::TypeMismatch { .. })));
    }

    #[test]
    fn invoke_checks_before_dispatch() {
        let mut reg = ServiceRegistry::new();
        reg.register_service(calculator(), Timestamp(0)).unwrap();
        let rec = Recorder::default();
        assert!(matches!(
            reg.invoke(&rec, "ghost", "add", &[json!(1)]),
            Err(ServiceError::UnknownService(_))
        ));
        assert!(matches!(
            reg.invoke(&rec, "calculator", "divide", &[json!(1)]),
            Err(ServiceError::UnknownProcedure { .. })
        ));
        assert!(matches!(
            reg.invoke(&rec, "calculator", "add", &[json!("x")]),
            Err(ServiceError::TypeMismatch { .. })
        ));
        assert!(rec.calls.borrow().is_empty());
        reg.invoke(&rec, "calculator", "add", &[json!(3), json!(3)]).unwrap();
        let calls = rec.calls.borrow();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].1.arguments, vec![json!(3), json!(3)]);
    }

    #[test]
    fn config_hash_ignores_registration_time() {
        let mut a = calculator();
        let h = a.config_hash();
        a.registered_at = Timestamp(99);
        assert_eq!(a.config_hash(), h);
        a.description.push('!');
        assert_ne!(a.config_hash(), h);
    }

    #[test]
    fn invoke_response_mapping() {
        assert_eq!(InvokeResponse::success(json!(6)).into_result(), Ok(json!(6)));
        assert_eq!(
            InvokeResponse::failure("boom").into_result(),
            Err(ServiceError::Remote("boom".into()))
        );
    }
}
