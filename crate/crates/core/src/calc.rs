//! The demo calculator service: exact integer arithmetic over operand lists.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_bigint::BigInt;
use serde_json::{json, Value};
use thiserror::Error;

use crate::services::{InvokeRequest, InvokeResponse, ServiceDescriptor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CalcError {
    #[error("no operands")]
    Empty,
    #[error("operand {0} is not an integer")]
    NotInteger(String),
    #[error("unknown procedure {0}")]
    UnknownProcedure(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operation {
    Add,
    Subtract,
    Multiply,
}

impl Operation {
    pub const ALL: [Operation; 3] = [Operation::Add, Operation::Subtract, Operation::Multiply];

    pub fn name(self) -> &'static str {
        match self {
            Operation::Add => "add",
            Operation::Subtract => "subtract",
            Operation::Multiply => "multiply",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Operation::ALL.into_iter().find(|o| o.name() == name)
    }

    /// Left fold over the operands; never overflows.
    pub fn apply(self, operands: &[BigInt]) -> Result<BigInt, CalcError> {
        let (first, rest) = operands.split_first().ok_or(CalcError::Empty)?;
        Ok(rest.iter().fold(first.clone(), |acc, x| match self {
            Operation::Add => acc + x,
            Operation::Subtract => acc - x,
            Operation::Multiply => acc * x,
        }))
    }
}

fn parse_integer(v: &Value) -> Result<BigInt, CalcError> {
    let text = match v {
        Value::Number(n) => n.to_string(),
        other => return Err(CalcError::NotInteger(other.to_string())),
    };
    text.parse().map_err(|_| CalcError::NotInteger(text))
}

pub fn evaluate(procedure: &str, arguments: &[Value]) -> Result<BigInt, CalcError> {
    let op = Operation::from_name(procedure).ok_or_else(|| CalcError::UnknownProcedure(procedure.into()))?;
    let operands = arguments.iter().map(parse_integer).collect::<Result<Vec<_>, _>>()?;
    op.apply(&operands)
}

/// Exact JSON number for an arbitrarily large integer.
pub fn bigint_to_json(n: &BigInt) -> Value {
    serde_json::from_str(&n.to_string()).expect("integer literal is valid JSON")
}

/// Server-side handler for the `/invoke` contract.
pub fn handle(request: &InvokeRequest) -> InvokeResponse {
    match evaluate(&request.procedure, &request.arguments) {
        Ok(n) => InvokeResponse::success(bigint_to_json(&n)),
        Err(e) => InvokeResponse::failure(e.to_string()),
    }
}

pub fn descriptor(endpoint: &str) -> ServiceDescriptor {
    let numbers = json!([{"name": "numbers", "type": "number", "many": true}]);
    serde_json::from_value(json!({
        "name": "calculator",
        "description": "Exact integer arithmetic: adds, subtracts or multiplies a list of numbers.",
        "endpoint": endpoint,
        "procedures": [
            {"name": "add", "slots": numbers, "returns": "number"},
            {"name": "subtract", "slots": numbers, "returns": "number"},
            {"name": "multiply", "slots": numbers, "returns": "number"}
        ],
        "utterances": [
            {"text": "add {numbers} and {numbers}", "procedure": "add"},
            {"text": "add {numbers} to {numbers}", "procedure": "add"},
            {"text": "would you add {numbers} and {numbers}", "procedure": "add"},
            {"text": "what is the sum of {numbers} and {numbers}", "procedure": "add"},
            {"text": "what is {numbers} plus {numbers}", "procedure": "add"},
            {"text": "subtract {numbers} minus {numbers}", "procedure": "subtract"},
            {"text": "what is {numbers} minus {numbers}", "procedure": "subtract"},
            {"text": "compute {numbers} minus {numbers}", "procedure": "subtract"},
            {"text": "multiply {numbers} by {numbers}", "procedure": "multiply"},
            {"text": "what is {numbers} times {numbers}", "procedure": "multiply"},
            {"text": "what is the product of {numbers} and {numbers}", "procedure": "multiply"}
        ]
    }))
    .expect("static descriptor")
}
