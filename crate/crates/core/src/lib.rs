//! Core of the LLM gateway.
//!
//! Everything in this crate is pure computation over owned data: the
//! utterance-ranking router, the user and service registries, the FIFO
//! scheduler with sticky sessions, the prompt and session caches, trace
//! storage, the input-drift detector, the execution graph, and the mock
//! LLM backend used for deterministic tests.
//!
//! The crate is `no_std` and only needs `alloc`. IO, clocks, HTTP and
//! locking live in the `llm-gateway` crate, which plugs into the traits
//! defined here ([`LlmBackend`](llm::LlmBackend),
//! [`ServiceInvoker`](services::ServiceInvoker),
//! [`TraceSink`](trace::TraceSink), [`Clock`](time::Clock)).

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod binding;
pub mod cache;
pub mod calc;
pub mod corpus;
pub mod drift;
pub mod embed;
pub mod graph;
pub mod index;
pub mod llm;
pub mod mock;
pub mod rerank;
pub mod router;
pub mod scheduler;
pub mod services;
pub mod text;
pub mod time;
pub mod trace;
pub mod users;

pub use embed::{Embedder, EmbeddingVector};
pub use router::{RouteConfig, Router, RoutingDecision};
pub use services::{ServiceDescriptor, ServiceRegistry};
pub use users::{AccessCertificate, UserRecord, UserRegistry};
