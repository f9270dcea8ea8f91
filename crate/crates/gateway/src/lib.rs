pub mod backend;
pub mod config;
pub mod eval;
pub mod gateway;
pub mod invoker;
pub mod server;
pub mod store;
