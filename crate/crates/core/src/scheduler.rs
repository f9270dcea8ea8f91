//! FIFO dispatch of workloads to typed workers with sticky sessions and
//! LRU model residency.
//!
//! The head of the global queue is the only dispatch candidate. Among the
//! workers it may run on, the session's previous worker wins, then a worker
//! already holding the required model, then the shortest queue (ties by
//! ascending worker id). A head with no eligible worker blocks the queue.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Timestamp;
use crate::users::WorkerClass;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("request {0} already submitted")]
    DuplicateRequest(String),
    #[error("unknown worker {0}")]
    UnknownWorker(String),
    #[error("duplicate worker {0}")]
    DuplicateWorker(String),
    #[error("request {0} is not running")]
    UnknownRequest(String),
    #[error("model {model} needs {bytes} bytes but worker {worker} has {capacity}")]
    ModelTooLarge {
        worker: String,
        model: String,
        bytes: u64,
        capacity: u64,
    },
    #[error("unknown model class {0}")]
    UnknownModelClass(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerSpec {
    pub id: String,
    pub class: WorkerClass,
    pub capacity_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidentModel {
    pub name: String,
    pub bytes: u64,
    pub last_used: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worker {
    pub id: String,
    pub class: WorkerClass,
    pub capacity_bytes: u64,
    pub resident: Vec<ResidentModel>,
    pub queue: VecDeque<String>,
}

impl Worker {
    pub fn used_bytes(&self) -> u64 {
        self.resident.iter().map(|m| m.bytes).sum()
    }

    pub fn has_model(&self, name: &str) -> bool {
        self.resident.iter().any(|m| m.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub request_id: String,
    pub session_id: String,
    pub required_service: String,
    #[serde(default)]
    pub required_model: Option<String>,
    pub required_worker_class: WorkerClass,
    /// Worker classes the submitting user may use.
    pub permitted_classes: BTreeSet<WorkerClass>,
    pub enqueued_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadOutcome {
    AlreadyResident,
    Loaded,
    EvictedAndLoaded { evicted: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub workload: Workload,
    pub worker_id: String,
    pub reason: AssignmentReason,
    #[serde(default)]
    pub load: Option<LoadOutcome>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentReason {
    Sticky,
    ModelResident,
    ShortestQueue,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerSnapshot {
    pub queue_depth: usize,
    pub workers: Vec<Worker>,
    pub sessions: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Scheduler {
    workers: BTreeMap<String, Worker>,
    queue: VecDeque<Workload>,
    in_flight: BTreeMap<String, String>,
    sessions: BTreeMap<String, String>,
    model_sizes: BTreeMap<String, u64>,
    tick: u64,
}

impl Scheduler {
    pub fn new(workers: impl IntoIterator<Item = WorkerSpec>) -> Result<Self, SchedulerError> {
        let mut s = Scheduler::default();
        for w in workers {
            if s.workers.contains_key(&w.id) {
                return Err(SchedulerError::DuplicateWorker(w.id));
            }
            s.workers.insert(
                w.id.clone(),
                Worker {
                    id: w.id,
                    class: w.class,
                    capacity_bytes: w.capacity_bytes,
                    resident: Vec::new(),
                    queue: VecDeque::new(),
                },
            );
        }
        Ok(s)
    }

    /// Declares the memory footprint of a model so dispatch can load it.
    pub fn set_model_size(&mut self, model: impl Into<String>, bytes: u64) {
        self.model_sizes.insert(model.into(), bytes);
    }

    pub fn worker(&self, id: &str) -> Option<&Worker> {
        self.workers.get(id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &Worker> {
        self.workers.values()
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn session_worker(&self, session_id: &str) -> Option<&str> {
        self.sessions.get(session_id).map(String::as_str)
    }

    pub fn snapshot(&self) -> SchedulerSnapshot {
        SchedulerSnapshot {
            queue_depth: self.queue.len(),
            workers: self.workers.values().cloned().collect(),
            sessions: self.sessions.len(),
        }
    }

    pub fn submit(&mut self, workload: Workload) -> Result<usize, SchedulerError> {
        let id = &workload.request_id;
        if self.in_flight.contains_key(id) || self.queue.iter().any(|w| &w.request_id == id) {
            return Err(SchedulerError::DuplicateRequest(id.clone()));
        }
        self.queue.push_back(workload);
        Ok(self.queue.len())
    }

    fn eligible(&self, worker: &Worker, w: &Workload) -> bool {
        worker.class == w.required_worker_class
            && w.permitted_classes.contains(&worker.class)
            && w
                .required_model
                .as_ref()
                .and_then(|m| self.model_sizes.get(m))
                .is_none_or(|bytes| *bytes <= worker.capacity_bytes)
    }

    /// True when at least one configured worker could ever take `w`.
    pub fn can_serve(&self, w: &Workload) -> bool {
        self.workers.values().any(|worker| self.eligible(worker, w))
    }

    fn choose(&self, w: &Workload) -> Option<(String, AssignmentReason)> {
        let eligible: Vec<&Worker> = self.workers.values().filter(|k| self.eligible(k, w)).collect();
        if eligible.is_empty() {
            return None;
        }
        if let Some(prev) = self.sessions.get(&w.session_id) {
            if eligible.iter().any(|k| &k.id == prev) {
                return Some((prev.clone(), AssignmentReason::Sticky));
            }
        }
        let shortest = |pool: &[&Worker]| {
            pool.iter()
                .min_by(|a, b| a.queue.len().cmp(&b.queue.len()).then(a.id.cmp(&b.id)))
                .map(|k| k.id.clone())
        };
        if let Some(model) = &w.required_model {
            let holding: Vec<&Worker> = eligible.iter().copied().filter(|k| k.has_model(model)).collect();
            if let Some(id) = shortest(&holding) {
                return Some((id, AssignmentReason::ModelResident));
            }
        }
        shortest(&eligible).map(|id| (id, AssignmentReason::ShortestQueue))
    }

    /// Assigns the queue head, or returns `None` when the queue is empty or
    /// the head has nowhere to go.
    pub fn dispatch(&mut self) -> Option<Assignment> {
        let head = self.queue.front()?;
        let (worker_id, reason) = self.choose(head)?;
        let workload = self.queue.pop_front().expect("head exists");
        let load = match &workload.required_model {
            Some(model) => {
                let resident = self.workers[&worker_id]
                    .resident
                    .iter()
                    .find(|m| &m.name == model)
                    .map(|m| m.bytes);
                match resident.or_else(|| self.model_sizes.get(model).copied()) {
                    Some(bytes) => self.load_model(&worker_id, model, bytes).ok(),
                    None => None,
                }
            }
            None => None,
        };
        let worker = self.workers.get_mut(&worker_id).expect("chosen worker exists");
        worker.queue.push_back(workload.request_id.clone());
        self.in_flight.insert(workload.request_id.clone(), worker_id.clone());
        self.sessions.insert(workload.session_id.clone(), worker_id.clone());
        Some(Assignment {
            workload,
            worker_id,
            reason,
            load,
        })
    }

    /// Withdraws a workload that has not been dispatched yet.
    pub fn cancel(&mut self, request_id: &str) -> Result<Workload, SchedulerError> {
        let pos = self
            .queue
            .iter()
            .position(|w| w.request_id == request_id)
            .ok_or_else(|| SchedulerError::UnknownRequest(request_id.into()))?;
        Ok(self.queue.remove(pos).expect("position is in range"))
    }

    /// Marks a dispatched workload finished and frees its queue slot.
    pub fn complete(&mut self, request_id: &str) -> Result<String, SchedulerError> {
        let worker_id = self
            .in_flight
            .remove(request_id)
            .ok_or_else(|| SchedulerError::UnknownRequest(request_id.into()))?;
        if let Some(w) = self.workers.get_mut(&worker_id) {
            w.queue.retain(|r| r != request_id);
        }
        Ok(worker_id)
    }

    /// Makes `model` resident on `worker_id`, evicting least-recently-used
    /// models until it fits.
    pub fn load_model(&mut self, worker_id: &str, model: &str, bytes: u64) -> Result<LoadOutcome, SchedulerError> {
        self.tick += 1;
        let tick = self.tick;
        let worker = self
            .workers
            .get_mut(worker_id)
            .ok_or_else(|| SchedulerError::UnknownWorker(worker_id.into()))?;
        if let Some(m) = worker.resident.iter_mut().find(|m| m.name == model) {
            m.last_used = tick;
            return Ok(LoadOutcome::AlreadyResident);
        }
        if bytes > worker.capacity_bytes {
            return Err(SchedulerError::ModelTooLarge {
                worker: worker_id.into(),
                model: model.into(),
                bytes,
                capacity: worker.capacity_bytes,
            });
        }
        let mut evicted = Vec::new();
        while worker.used_bytes() + bytes > worker.capacity_bytes {
            let (idx, _) = worker
                .resident
                .iter()
                .enumerate()
                .min_by_key(|(_, m)| m.last_used)
                .expect("over budget implies something resident");
            evicted.push(worker.resident.remove(idx).name);
        }
        worker.resident.push(ResidentModel {
            name: model.into(),
            bytes,
            last_used: tick,
        });
        Ok(if evicted.is_empty() {
            LoadOutcome::Loaded
        } else {
            LoadOutcome::EvictedAndLoaded { evicted }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelClass {
    #[serde(rename = "13B")]
    B13,
    #[serde(rename = "70B")]
    B70,
}

impl ModelClass {
    /// KV-cache bytes held per token of session context.
    pub const fn bytes_per_token(self) -> u64 {
        match self {
            ModelClass::B13 => 800 * KB,
            ModelClass::B70 => 4300 * KB,
        }
    }
}

impl core::str::FromStr for ModelClass {
    type Err = SchedulerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "13B" | "13b" => Ok(ModelClass::B13),
            "70B" | "70b" => Ok(ModelClass::B70),
            other => Err(SchedulerError::UnknownModelClass(other.into())),
        }
    }
}

pub const KB: u64 = 1000;

pub fn estimate_session_bytes(model: ModelClass, token_count: u64) -> u64 {
    token_count * model.bytes_per_token()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    const GB: u64 = 1_000_000_000;

    fn wl(id: &str, session: &str, model: Option<&str>) -> Workload {
        Workload {
            request_id: id.into(),
            session_id: session.into(),
            required_service: "calculator".into(),
            required_model: model.map(Into::into),
            required_worker_class: WorkerClass::Gpu,
            permitted_classes: [WorkerClass::Cpu, WorkerClass::Gpu].into(),
            enqueued_at: Timestamp(0),
        }
    }

    fn gpus(n: usize) -> Scheduler {
        Scheduler::new((1..=n).map(|i| WorkerSpec {
            id: format!("worker-{i}"),
            class: WorkerClass::Gpu,
            capacity_bytes: 48 * GB,
        }))
        .unwrap()
    }

    #[test]
    fn cancel_only_touches_the_queue() {
        let mut s = gpus(1);
        s.submit(wl("a", "s", None)).unwrap();
        s.submit(wl("b", "s", None)).unwrap();
        s.dispatch().unwrap();
        assert!(s.cancel("a").is_err());
        assert_eq!(s.cancel("b").unwrap().request_id, "b");
        assert_eq!(s.queue_len(), 0);
    }

    #[test]
    fn submit_positions_and_duplicates() {
        let mut s = gpus(1);
        assert_eq!(s.submit(wl("a", "s", None)), Ok(1));
        assert_eq!(s.submit(wl("b", "s", None)), Ok(2));
        assert_eq!(s.submit(wl("a", "s", None)), Err(SchedulerError::DuplicateRequest("a".into())));
        s.dispatch().unwrap();
        // still in flight
        assert!(s.submit(wl("a", "s", None)).is_err());
        s.complete("a").unwrap();
        assert!(s.submit(wl("a", "s", None)).is_ok());
    }

    #[test]
    fn single_eligible_worker() {
        let mut s = Scheduler::new([
            WorkerSpec { id: "cpu-1".into(), class: WorkerClass::Cpu, capacity_bytes: GB },
            WorkerSpec { id: "gpu-1".into(), class: WorkerClass::Gpu, capacity_bytes: GB },
        ])
        .unwrap();
        s.submit(wl("a", "s", None)).unwrap();
        assert_eq!(s.dispatch().unwrap().worker_id, "gpu-1");
    }

    #[test]
    fn idle_tie_breaks_on_worker_id() {
        let mut s = gpus(2);
        s.submit(wl("a", "s1", None)).unwrap();
        let a = s.dispatch().unwrap();
        assert_eq!(a.worker_id, "worker-1");
        assert_eq!(a.reason, AssignmentReason::ShortestQueue);
    }

    #[test]
    fn sticky_beats_shorter_queue() {
        let mut s = gpus(2);
        s.set_model_size("llama", 16 * GB);
        // put session X on worker-2 by occupying worker-1 first
        s.submit(wl("busy", "other", None)).unwrap();
        s.dispatch().unwrap();
        s.submit(wl("x1", "X", Some("llama"))).unwrap();
        assert_eq!(s.dispatch().unwrap().worker_id, "worker-2");
        s.complete("busy").unwrap();
        // worker-2 now has the longer queue, session still sticks
        s.submit(wl("x2", "X", Some("llama"))).unwrap();
        let a = s.dispatch().unwrap();
        assert_eq!(a.worker_id, "worker-2");
        assert_eq!(a.reason, AssignmentReason::Sticky);
    }

    #[test]
    fn residency_preferred_over_shortest_queue() {
        let mut s = gpus(2);
        s.load_model("worker-2", "llama", 16 * GB).unwrap();
        s.submit(wl("a", "fresh", Some("llama"))).unwrap();
        let a = s.dispatch().unwrap();
        assert_eq!(a.worker_id, "worker-2");
        assert_eq!(a.reason, AssignmentReason::ModelResident);
        assert_eq!(a.load, Some(LoadOutcome::AlreadyResident));
    }

    #[test]
    fn head_of_line_blocking() {
        let mut s = gpus(1);
        let mut w = wl("a", "s", None);
        w.permitted_classes = [WorkerClass::Cpu].into();
        s.submit(w.clone()).unwrap();
        s.submit(wl("b", "s", None)).unwrap();
        assert!(!s.can_serve(&w));
        assert!(s.dispatch().is_none());
        assert_eq!(s.queue_len(), 2);
    }

    #[test]
    fn model_loading() {
        let mut s = gpus(1);
        assert_eq!(s.load_model("worker-1", "llama-8b", 16 * GB), Ok(LoadOutcome::Loaded));
        assert_eq!(s.load_model("worker-1", "a", 40 * GB), Ok(LoadOutcome::EvictedAndLoaded { evicted: vec!["llama-8b".into()] }));
        assert_eq!(s.load_model("worker-1", "b", 40 * GB), Ok(LoadOutcome::EvictedAndLoaded { evicted: vec!["a".into()] }));
        assert!(matches!(s.load_model("worker-1", "huge", 60 * GB), Err(SchedulerError::ModelTooLarge { .. })));
        assert!(matches!(s.load_model("nope", "m", 1), Err(SchedulerError::UnknownWorker(_))));
        assert_eq!(s.worker("worker-1").unwrap().used_bytes(), 40 * GB);
    }

    #[test]
    fn lru_evicts_least_recent() {
        let mut s = gpus(1);
        s.load_model("worker-1", "a", 16 * GB).unwrap();
        s.load_model("worker-1", "b", 16 * GB).unwrap();
        s.load_model("worker-1", "a", 16 * GB).unwrap(); // touch a
        let out = s.load_model("worker-1", "c", 20 * GB).unwrap();
        assert_eq!(out, LoadOutcome::EvictedAndLoaded { evicted: vec!["b".into()] });
    }

    #[test]
    fn capacity_estimates() {
        assert_eq!(estimate_session_bytes(ModelClass::B70, 8192), 35_225_600_000);
        assert_eq!(estimate_session_bytes(ModelClass::B13, 1), 800_000);
        assert_eq!(estimate_session_bytes(ModelClass::B13, 0), 0);
        assert_eq!("70B".parse::<ModelClass>(), Ok(ModelClass::B70));
        assert!(matches!("7B".parse::<ModelClass>(), Err(SchedulerError::UnknownModelClass(_))));
    }
}
