use std::cell::RefCell;
use std::collections::BTreeSet;

use llm_gateway_core::binding::parse_binding;
use llm_gateway_core::cache::{PromptCache, PromptCacheConfig, ScopeKey};
use llm_gateway_core::calc;
use llm_gateway_core::drift::{DriftConfig, DriftDetector, DriftStatus};
use llm_gateway_core::embed::{Embedder, EmbeddingVector};
use llm_gateway_core::graph::{self, ExecContext, PlanInput, RunOutcome};
use llm_gateway_core::index::{IndexEntry, UtteranceIndex};
use llm_gateway_core::mock::{MockBackend, MockConfig};
use llm_gateway_core::rerank::JaccardReranker;
use llm_gateway_core::router::{RouteConfig, Router};
use llm_gateway_core::scheduler::{Scheduler, WorkerSpec, Workload};
use llm_gateway_core::services::{InvokeRequest, ServiceDescriptor, ServiceError, ServiceInvoker, ServiceRegistry};
use llm_gateway_core::time::{StepClock, Timestamp};
use llm_gateway_core::trace::{NullSink, Telemetry};
use llm_gateway_core::users::{AccessCertificate, WorkerClass};
use proptest::prelude::*;
use serde_json::{json, Value};

fn vault() -> ServiceDescriptor {
    serde_json::from_value(json!({
        "name": "vault",
        "description": "opens the vault",
        "endpoint": "builtin://vault",
        "procedures": [{"name": "open", "slots": [{"name": "code", "type": "number"}], "returns": "string"}],
        "utterances": [{"text": "open the vault with {code}", "procedure": "open"}]
    }))
    .unwrap()
}

fn registry() -> ServiceRegistry {
    let mut reg = ServiceRegistry::new();
    reg.register_service(calc::descriptor("builtin://calculator"), Timestamp(0)).unwrap();
    reg.register_service(vault(), Timestamp(1)).unwrap();
    reg
}

/// Records every invocation and answers with the calculator.
#[derive(Default)]
struct Recorder(RefCell<Vec<String>>);

impl ServiceInvoker for Recorder {
    fn invoke(&self, service: &ServiceDescriptor, request: &InvokeRequest) -> Result<Value, ServiceError> {
        self.0.borrow_mut().push(service.name.clone());
        match service.name.as_str() {
            "calculator" => calc::handle(request).into_result(),
            _ => Ok(json!("opened")),
        }
    }
}

fn certificate(mask: u8) -> AccessCertificate {
    let names = ["calculator", "vault"];
    AccessCertificate::new((0..2).filter(|i| mask & (1 << i) != 0).map(|i| names[i]), [WorkerClass::Cpu])
}

fn prompt_strategy() -> impl Strategy<Value = String> {
    prop_oneof![
        (1u32..1000, 1u32..1000).prop_map(|(a, b)| format!("add {a} and {b}")),
        (1u32..1000, 1u32..1000).prop_map(|(a, b)| format!("multiply {a} by {b}")),
        (1u32..9999).prop_map(|c| format!("open the vault with {c}")),
        "[a-z ]{0,30}",
    ]
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0u8..3, dim).prop_map(|v| v.into_iter().map(f64::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn knn_is_sorted_and_bounded(rows in prop::collection::vec(vector(6), 1..30), q in vector(6), k in 1usize..10) {
        let mut index = UtteranceIndex::new(6);
        for (i, v) in rows.iter().enumerate() {
            index.insert(IndexEntry {
                utterance_id: (i as u32) * 2,
                service_name: "s".into(),
                procedure_name: "p".into(),
                vector: EmbeddingVector::normalized(v.clone()),
            }).unwrap();
        }
        let out = index.knn(&EmbeddingVector::normalized(q), k).unwrap();
        prop_assert_eq!(out.len(), k.min(rows.len()));
        for w in out.windows(2) {
            prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
        }
    }

    #[test]
    fn route_stays_inside_the_certificate(prompt in prompt_strategy(), mask in 0u8..4, fault in 0u64..50) {
        let reg = registry();
        let router = Router::build(&reg, RouteConfig::default());
        let cert = certificate(mask);
        let backend = MockBackend::new(MockConfig {
            fault_probability: 0.5,
            fault_seed: fault,
            adversarial_services: vec!["vault".into()],
        });
        let clock = StepClock::new(0, 1);
        let d = router.route(&prompt, &cert, &JaccardReranker, &backend, &Telemetry::new("r", &NullSink, &clock));
        if !d.abstained {
            prop_assert!(cert.allows_service(&d.service_name));
            for op in &d.operations {
                prop_assert!(cert.allows_service(&op.service));
            }
        }
    }

    #[test]
    fn graph_terminates_and_respects_permissions(prompt in prompt_strategy(), mask in 0u8..4, seed in 0u64..200, answers in prop::collection::vec("[0-9 a-z]{1,12}", 0..10)) {
        let reg = registry();
        let router = Router::build(&reg, RouteConfig::default());
        let cert = certificate(mask);
        let backend = MockBackend::new(MockConfig {
            fault_probability: 0.5,
            fault_seed: seed,
            adversarial_services: vec!["vault".into()],
        });
        let clock = StepClock::new(0, 1);
        let t = Telemetry::new("r", &NullSink, &clock);
        let decision = router.route(&prompt, &cert, &JaccardReranker, &backend, &t);
        let mut g = graph::plan(PlanInput {
            request_id: "r",
            session_id: "s",
            prompt: &prompt,
            decision: &decision,
            history: &[],
            max_iterations: 4,
        }, &reg).unwrap();
        let recorder = Recorder::default();
        let ctx = ExecContext {
            backend: &backend,
            invoker: &recorder,
            registry: &reg,
            certificate: &cert,
            cache: None,
            telemetry: t,
            interceptors: &[],
            retries: 2,
        };
        let mut outcome = graph::run(&mut g, &ctx);
        let mut answers = answers.into_iter();
        while let RunOutcome::AwaitingUser { .. } = outcome {
            let Some(a) = answers.next() else { break };
            if graph::resume(&mut g, &a).is_ok() {
                outcome = graph::run(&mut g, &ctx);
            }
        }
        prop_assert!(g.iteration_count <= g.max_iterations);
        // Every binding pass makes at most retries + 1 completions, and each
        // pass adds at most one node execution per planned node.
        prop_assert!(g.steps <= u64::from(g.max_iterations) * (3 + g.nodes.len() as u64));
        for s in recorder.0.borrow().iter() {
            prop_assert!(cert.allows_service(s), "invoked {}", s);
        }
    }

    #[test]
    fn invoke_never_reaches_unregistered_services(name in "[a-z]{1,10}", proc_name in "[a-z]{1,8}") {
        let reg = registry();
        let recorder = Recorder::default();
        let r = reg.invoke(&recorder, &name, &proc_name, &[json!(1)]);
        if reg.get(&name).is_none() {
            prop_assert!(matches!(r, Err(ServiceError::UnknownService(_))));
            prop_assert!(recorder.0.borrow().is_empty());
        }
    }

    #[test]
    fn binding_parser_rejects_foreign_services(n in prop::collection::vec(1i64..100, 1..5)) {
        let calc = calc::descriptor("builtin://calculator");
        let out = json!([{"service": "vault", "operation": "add", "numbers": n}]).to_string();
        prop_assert!(parse_binding(&out, &calc, &["add"]).is_err());
        let ok = json!([{"operation": "add", "numbers": n}]).to_string();
        prop_assert!(parse_binding(&ok, &calc, &["add"]).is_ok());
    }

    #[test]
    fn cache_scopes_never_leak(ops in prop::collection::vec((0usize..4, 0usize..5, any::<bool>()), 1..200), cap in 1usize..16) {
        let prompts = ["add 1 and 2", "add 1 and 2 now", "weather today", "open the vault", "hello there"];
        let scopes: Vec<ScopeKey> = (0..3).map(|u| ScopeKey::user(format!("u{u}"), 1)).chain([ScopeKey::shared(1)]).collect();
        let mut cache = PromptCache::new(PromptCacheConfig { capacity: cap, ..Default::default() }, Embedder::default());
        for (t, (s, p, store)) in ops.into_iter().enumerate() {
            let now = Timestamp(t as u64);
            if store {
                cache.store(scopes[s].clone(), prompts[p], format!("{s}"), now).unwrap();
            } else if let Some(hit) = cache.lookup(&scopes[s], prompts[p], now) {
                prop_assert_eq!(hit.response, s.to_string());
                prop_assert!(hit.similarity >= 0.95);
            }
            prop_assert!(cache.len() <= cap);
        }
    }

    #[test]
    fn cache_round_trip(prompt in "[a-z]{1,8}( [a-z0-9]{1,8}){0,6}") {
        let mut cache = PromptCache::new(PromptCacheConfig::default(), Embedder::default());
        let scope = ScopeKey::user("u", 7);
        cache.store(scope.clone(), &prompt, "r", Timestamp(0)).unwrap();
        let hit = cache.lookup(&scope, &prompt, Timestamp(1)).unwrap();
        prop_assert!((hit.similarity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scheduler_fifo_and_budget(ops in prop::collection::vec((0u8..3, 0usize..8, 0usize..3, any::<bool>()), 1..120)) {
        let mut s = Scheduler::new([
            WorkerSpec { id: "a".into(), class: WorkerClass::Cpu, capacity_bytes: 50 },
            WorkerSpec { id: "b".into(), class: WorkerClass::Gpu, capacity_bytes: 50 },
        ]).unwrap();
        let models = [("m1", 30u64), ("m2", 25), ("m3", 20)];
        for (m, b) in models {
            s.set_model_size(m, b);
        }
        let mut submitted = Vec::new();
        let mut dispatched = Vec::new();
        let mut running = Vec::new();
        for (i, (op, session, model, gpu)) in ops.into_iter().enumerate() {
            match op {
                0 => {
                    let class = if gpu { WorkerClass::Gpu } else { WorkerClass::Cpu };
                    let w = Workload {
                        request_id: format!("r{i}"),
                        session_id: format!("s{session}"),
                        required_service: "svc".into(),
                        required_model: Some(models[model].0.into()),
                        required_worker_class: class,
                        permitted_classes: BTreeSet::from([class]),
                        enqueued_at: Timestamp(i as u64),
                    };
                    submitted.push(w.request_id.clone());
                    s.submit(w).unwrap();
                }
                1 => {
                    let sticky = peek(&s).and_then(|(session, model, class)| {
                        let w = s.session_worker(&session)?.to_string();
                        let worker = s.worker(&w)?;
                        (worker.class == class && worker.has_model(&model)).then_some(w)
                    });
                    if let Some(a) = s.dispatch() {
                        let w = s.worker(&a.worker_id).unwrap();
                        prop_assert_eq!(w.class, a.workload.required_worker_class);
                        prop_assert!(a.workload.permitted_classes.contains(&w.class));
                        if let Some(expected) = sticky {
                            prop_assert_eq!(&a.worker_id, &expected);
                        }
                        dispatched.push(a.workload.request_id.clone());
                        running.push(a.workload.request_id);
                    }
                }
                _ => {
                    if let Some(id) = running.pop() {
                        s.complete(&id).unwrap();
                    }
                }
            }
            for w in s.workers() {
                prop_assert!(w.used_bytes() <= w.capacity_bytes);
            }
        }
        prop_assert_eq!(&dispatched[..], &submitted[..dispatched.len()]);
    }

    #[test]
    fn drift_decision_is_permutation_invariant(words in prop::collection::vec("[a-z]{2,6}", 8..40), seed in any::<u64>()) {
        let e = Embedder::default();
        let cfg = DriftConfig { window: 16, threshold: 0.3, min_reference: 4, min_live: 4 };
        let reference: Vec<EmbeddingVector> = words.iter().take(4).map(|w| e.embed(w)).collect();
        let mut live: Vec<EmbeddingVector> = words.iter().skip(4).take(16).map(|w| e.embed(&format!("{w} x"))).collect();
        let decide = |live: &[EmbeddingVector]| {
            let mut d = DriftDetector::new(cfg, e.dimension());
            for v in &reference {
                d.drift_check(v);
            }
            let mut last = DriftStatus::SkippedZero;
            for v in live {
                last = d.drift_check(v);
            }
            last
        };
        let a = decide(&live);
        // Deterministic Fisher-Yates driven by the seed.
        let mut x = seed | 1;
        for i in (1..live.len()).rev() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            live.swap(i, (x % (i as u64 + 1)) as usize);
        }
        let b = decide(&live);
        match (a, b) {
            (DriftStatus::Ok { distance: d1 }, DriftStatus::Ok { distance: d2 })
            | (DriftStatus::Alarm { distance: d1 }, DriftStatus::Alarm { distance: d2 }) => {
                prop_assert!((d1 - d2).abs() < 1e-9);
            }
            (a, b) => prop_assert_eq!(a, b),
        }
    }
}

/// Session, model and class of the workload at the head of the queue.
fn peek(s: &Scheduler) -> Option<(String, String, WorkerClass)> {
    let mut probe = s.clone();
    let a = probe.dispatch()?;
    Some((
        a.workload.session_id,
        a.workload.required_model.unwrap_or_default(),
        a.workload.required_worker_class,
    ))
}
