//! Per-request trace events and a bounded in-memory trace store.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::time::{Clock, Timestamp};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub request_id: String,
    pub component: String,
    pub event: String,
    pub started_at: Timestamp,
    pub ended_at: Timestamp,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl TraceEvent {
    pub fn new(request_id: &str, component: &str, event: &str, started_at: Timestamp, ended_at: Timestamp) -> Self {
        TraceEvent {
            request_id: request_id.into(),
            component: component.into(),
            event: event.into(),
            started_at,
            ended_at: ended_at.max(started_at),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.attributes.insert(key.into(), value.into());
        self
    }
}

pub trait TraceSink {
    fn record(&self, event: TraceEvent);
}

/// Discards everything.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&self, _event: TraceEvent) {}
}

/// Request-scoped handle that stamps events with the request id and clock.
#[derive(Clone, Copy)]
pub struct Telemetry<'a> {
    pub request_id: &'a str,
    pub sink: &'a dyn TraceSink,
    pub clock: &'a dyn Clock,
}

impl<'a> Telemetry<'a> {
    pub fn new(request_id: &'a str, sink: &'a dyn TraceSink, clock: &'a dyn Clock) -> Self {
        Telemetry { request_id, sink, clock }
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn event(&self, component: &str, event: &str, started_at: Timestamp) -> TraceEvent {
        TraceEvent::new(self.request_id, component, event, started_at, self.clock.now())
    }

    pub fn emit(&self, event: TraceEvent) {
        self.sink.record(event);
    }

    /// Runs `f` and records one event spanning it. `f` may add attributes.
    pub fn span<T>(&self, component: &str, event: &str, f: impl FnOnce(&mut TraceEvent) -> T) -> T {
        let start = self.clock.now();
        let mut ev = TraceEvent::new(self.request_id, component, event, start, start);
        let out = f(&mut ev);
        ev.ended_at = self.clock.now().max(start);
        self.sink.record(ev);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceStoreConfig {
    pub max_requests: usize,
    pub max_events_per_request: usize,
}

impl Default for TraceStoreConfig {
    fn default() -> Self {
        TraceStoreConfig {
            max_requests: 10_000,
            max_events_per_request: 1_000,
        }
    }
}

#[derive(Debug, Default)]
struct Trace {
    events: Vec<TraceEvent>,
    touched: u64,
    dropped: u64,
}

/// Traces keyed by request id, evicted least-recently-touched first.
#[derive(Debug, Default)]
pub struct TraceStore {
    config: TraceStoreConfig,
    traces: BTreeMap<String, Trace>,
    recency: BTreeMap<u64, String>,
    tick: u64,
}

impl TraceStore {
    pub fn new(config: TraceStoreConfig) -> Self {
        TraceStore {
            config,
            ..Default::default()
        }
    }

    pub fn config(&self) -> TraceStoreConfig {
        self.config
    }

    pub fn record(&mut self, event: TraceEvent) {
        self.tick += 1;
        let tick = self.tick;
        let trace = self.traces.entry(event.request_id.clone()).or_default();
        if trace.touched != 0 {
            self.recency.remove(&trace.touched);
        }
        trace.touched = tick;
        self.recency.insert(tick, event.request_id.clone());
        if trace.events.len() >= self.config.max_events_per_request {
            trace.dropped += 1;
        } else {
            // keep per-request order by start time; equal starts keep arrival order
            let pos = trace.events.partition_point(|e| e.started_at <= event.started_at);
            trace.events.insert(pos, event);
        }
        while self.traces.len() > self.config.max_requests {
            let Some((_, oldest)) = self.recency.pop_first() else { break };
            self.traces.remove(&oldest);
        }
    }

    pub fn get(&self, request_id: &str) -> Option<&[TraceEvent]> {
        self.traces.get(request_id).map(|t| t.events.as_slice())
    }

    pub fn dropped(&self, request_id: &str) -> u64 {
        self.traces.get(request_id).map_or(0, |t| t.dropped)
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }
}
