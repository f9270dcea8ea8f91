use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use llm_gateway::config::GatewayConfig;
use llm_gateway::gateway::{ChatRequest, ErrorKind, Gateway, ResponseKind};
use llm_gateway::server;
use llm_gateway_core::calc;
use llm_gateway_core::users::{AccessCertificate, WorkerClass};
use proptest::prelude::*;
use serde_json::{json, Value};
use tower::ServiceExt;

const ADMIN: &str = "test-admin";

fn config() -> GatewayConfig {
    let mut cfg = GatewayConfig::default();
    cfg.server.admin_key = Some(ADMIN.into());
    cfg
}

struct Api {
    gw: Arc<Gateway>,
    app: Router,
}

impl Api {
    fn new(cfg: GatewayConfig) -> Self {
        let gw = Arc::new(Gateway::new(cfg).unwrap());
        Api {
            app: server::app(gw.clone()),
            gw,
        }
    }

    async fn call(&self, method: Method, uri: &str, headers: &[(&str, &str)], body: Option<Value>) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let body = match body {
            Some(b) => {
                req = req.header("content-type", "application/json");
                Body::from(b.to_string())
            }
            None => Body::empty(),
        };
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, v)
    }

    async fn setup(&self) -> String {
        let desc = serde_json::to_value(calc::descriptor("builtin://calculator")).unwrap();
        let (s, _) = self.call(Method::POST, "/v1/services", &[("x-admin-key", ADMIN)], Some(desc)).await;
        assert_eq!(s, StatusCode::CREATED);
        self.user("alice", &["calculator"]).await
    }

    async fn user(&self, id: &str, services: &[&str]) -> String {
        let body = json!({"user_id": id, "certificate": {"allowed_services": services, "allowed_worker_classes": ["cpu"]}});
        let (s, v) = self.call(Method::POST, "/v1/users", &[("x-admin-key", ADMIN)], Some(body)).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["auth_key"].as_str().unwrap().to_string()
    }

    async fn chat(&self, key: &str, prompt: &str) -> (StatusCode, Value) {
        let body = json!({"session_id": "s1", "auth_key": key, "prompt": prompt});
        self.call(Method::POST, "/v1/chat", &[], Some(body)).await
    }
}

#[tokio::test]
async fn health_and_readiness() {
    let api = Api::new(config());
    let (s, v) = api.call(Method::GET, "/healthz", &[], None).await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
    let (s, _) = api.call(Method::GET, "/readyz", &[], None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    api.setup().await;
    let (s, _) = api.call(Method::GET, "/readyz", &[], None).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn admin_routes_require_the_admin_key() {
    let api = Api::new(config());
    let desc = serde_json::to_value(calc::descriptor("builtin://calculator")).unwrap();
    let (s, v) = api.call(Method::POST, "/v1/services", &[], Some(desc.clone())).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::UNAUTHORIZED, Some("authentication")));
    let (s, _) = api.call(Method::POST, "/v1/services", &[("x-admin-key", "wrong")], Some(desc)).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    for route in ["/v1/admin/scheduler", "/v1/admin/cache", "/v1/admin/drift", "/v1/debug/index"] {
        let (s, _) = api.call(Method::GET, route, &[], None).await;
        assert_eq!(s, StatusCode::UNAUTHORIZED, "{route}");
        let (s, _) = api.call(Method::GET, route, &[("x-admin-key", ADMIN)], None).await;
        assert_eq!(s, StatusCode::OK, "{route}");
    }
}

#[tokio::test]
async fn service_registration_and_listing() {
    let api = Api::new(config());
    let key = api.setup().await;
    let (s, v) = api.call(Method::GET, "/v1/services", &[("x-admin-key", ADMIN)], None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["name"], "calculator");
    let (_, v) = api.call(Method::GET, "/v1/services", &[("authorization", &format!("Bearer {key}"))], None).await;
    assert_eq!(v.as_array().unwrap().len(), 1);
    let other = api.user("bob", &[]).await;
    let (_, v) = api.call(Method::GET, "/v1/services", &[("x-auth-key", &other)], None).await;
    assert_eq!(v, json!([]));
    let (s, _) = api.call(Method::GET, "/v1/services", &[("x-auth-key", "nope")], None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);

    let desc = serde_json::to_value(calc::descriptor("builtin://calculator")).unwrap();
    let (s, v) = api.call(Method::POST, "/v1/services", &[("x-admin-key", ADMIN)], Some(desc)).await;
    assert_eq!((s, v["error"].as_str()), (StatusCode::CONFLICT, Some("conflict")));
    let bad = json!({"name": "x", "endpoint": "http://h", "procedures": []});
    let (s, _) = api.call(Method::POST, "/v1/services", &[("x-admin-key", ADMIN)], Some(bad)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, v) = api.call(Method::GET, "/v1/debug/index", &[("x-admin-key", ADMIN)], None).await;
    assert_eq!(v.as_array().unwrap().len(), 11);
}

#[tokio::test]
async fn chat_answers_through_the_calculator() {
    let api = Api::new(config());
    let key = api.setup().await;
    let (s, v) = api.chat(&key, "add 5 and 3").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["kind"], "answer");
    assert_eq!(v["text"], "8");
    assert_eq!(v["routing"], "calculator");
    assert_eq!(v["cache_hit"], false);

    let (s, v) = api.chat(&key, "Add 5 to 3 to 2.").await;
    assert_eq!((s, v["text"].as_str()), (StatusCode::OK, Some("10")));

    let (s, v) = api.chat("bad", "add 5 and 3").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    assert_eq!(v["error_kind"], "authentication");
    assert!(v["request_id"].as_str().unwrap().starts_with("req-"));

    let (s, v) = api.chat(&key, "   ").await;
    assert_eq!((s, v["error_kind"].as_str()), (StatusCode::BAD_REQUEST, Some("invalid_request")));
}

#[tokio::test]
async fn bearer_header_authenticates_chat() {
    let api = Api::new(config());
    let key = api.setup().await;
    let (s, v) = api
        .call(
            Method::POST,
            "/v1/chat",
            &[("authorization", &format!("Bearer {key}"))],
            Some(json!({"prompt": "multiply 6 by 7"})),
        )
        .await;
    assert_eq!((s, v["text"].as_str()), (StatusCode::OK, Some("42")));
}

#[tokio::test]
async fn unrouted_prompt_goes_direct() {
    let api = Api::new(config());
    let key = api.setup().await;
    let (s, v) = api.chat(&key, "tell me about the weather on mars").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["routing"], "direct");
}

#[tokio::test]
async fn exact_repeat_is_served_from_cache() {
    let api = Api::new(config());
    let key = api.setup().await;
    let (_, first) = api.chat(&key, "what is 12 times 12").await;
    let before = api.gw.invocations();
    let (_, again) = api.chat(&key, "what is 12 times 12").await;
    assert_eq!(again["cache_hit"], true);
    assert_eq!(again["text"], first["text"]);
    assert_eq!(api.gw.invocations(), before);
    // Different numbers must not reuse the cached answer.
    let (_, other) = api.chat(&key, "what is 12 times 13").await;
    assert_eq!((other["cache_hit"].as_bool(), other["text"].as_str()), (Some(false), Some("156")));
    let (_, v) = api.call(Method::GET, "/v1/admin/cache", &[("x-admin-key", ADMIN)], None).await;
    assert!(v["prompt"]["hits"].as_u64().unwrap() >= 1);
}

#[tokio::test]
async fn traces_are_visible_to_owner_and_admin_only() {
    let api = Api::new(config());
    let key = api.setup().await;
    let other = api.user("bob", &["calculator"]).await;
    let (_, v) = api.chat(&key, "add 1 and 2").await;
    let id = v["request_id"].as_str().unwrap();
    let uri = format!("/v1/traces/{id}");
    let (s, t) = api.call(Method::GET, &uri, &[("x-auth-key", &key)], None).await;
    assert_eq!(s, StatusCode::OK);
    let components: Vec<&str> = t["events"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["component"].as_str().unwrap())
        .collect();
    for c in ["user-registry", "cache", "scheduler", "router", "execution-graph", "service-registry", "llm-backend", "observability", "gateway"] {
        assert!(components.contains(&c), "missing {c} in {components:?}");
    }
    assert!(components.len() >= 5);
    let (s, _) = api.call(Method::GET, &uri, &[("x-auth-key", &other)], None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = api.call(Method::GET, &uri, &[("x-admin-key", ADMIN)], None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = api.call(Method::GET, "/v1/traces/req-999999", &[("x-admin-key", ADMIN)], None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, r) = api.call(Method::GET, &format!("/v1/requests/{id}"), &[("x-auth-key", &key)], None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["response"]["text"], "3");
    assert_eq!(r["graph"]["status"], "done");
}

#[tokio::test]
async fn revoked_users_are_rejected() {
    let api = Api::new(config());
    let key = api.setup().await;
    let (s, _) = api.call(Method::DELETE, "/v1/users/alice", &[("x-admin-key", ADMIN)], None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = api.chat(&key, "add 1 and 2").await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = api.call(Method::DELETE, "/v1/users/nobody", &[("x-admin-key", ADMIN)], None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = api
        .call(Method::POST, "/v1/users", &[("x-admin-key", ADMIN)], Some(json!({"user_id": "alice"})))
        .await;
    assert_eq!(s, StatusCode::CREATED);
}

#[tokio::test]
async fn duplicate_user_conflicts() {
    let api = Api::new(config());
    api.setup().await;
    let (s, _) = api
        .call(Method::POST, "/v1/users", &[("x-admin-key", ADMIN)], Some(json!({"user_id": "alice"})))
        .await;
    assert_eq!(s, StatusCode::CONFLICT);
}

fn faulty_config() -> GatewayConfig {
    let mut cfg = config();
    cfg.backend.mock.fault_probability = 0.5;
    cfg.backend.mock.fault_seed = 11;
    cfg
}

/// Finds a prompt the faulty mock turns into a clarification.
async fn clarification(api: &Api, key: &str) -> Value {
    for i in 0..400 {
        let (_, v) = api.chat(key, &format!("add {} and {}", i + 1, i + 2)).await;
        if v["kind"] == "clarification" {
            return v;
        }
    }
    panic!("no clarification in 400 prompts");
}

#[tokio::test]
async fn clarification_resume_round_trip() {
    let api = Api::new(faulty_config());
    let key = api.setup().await;
    let v = clarification(&api, &key).await;
    assert!(v["text"].as_str().unwrap().starts_with("Which numbers should I use for"));
    let id = v["request_id"].as_str().unwrap().to_string();
    let uri = format!("/v1/requests/{id}/resume");

    let (s, _) = api.call(Method::POST, &uri, &[], Some(json!({"text": "1 and 2", "auth_key": "bad"}))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = api.call(Method::POST, &uri, &[("x-auth-key", &key)], Some(json!({"text": "  "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut last = Value::Null;
    for round in 0..20 {
        let (s, r) = api
            .call(Method::POST, &uri, &[("x-auth-key", &key)], Some(json!({"text": format!("{round} and 4")})))
            .await;
        last = r.clone();
        if r["kind"] != "clarification" {
            assert!(s == StatusCode::OK || s == StatusCode::UNPROCESSABLE_ENTITY, "{s} {r}");
            break;
        }
        assert_eq!(r["request_id"].as_str(), Some(id.as_str()));
    }
    assert!(last["kind"] == "answer" || last["error_kind"] == "unresolved", "{last}");
    let (s, v) = api.call(Method::POST, &uri, &[("x-auth-key", &key)], Some(json!({"text": "7"}))).await;
    assert_eq!((s, v["error_kind"].as_str()), (StatusCode::CONFLICT, Some("not_awaiting")));
    let (s, _) = api
        .call(Method::POST, "/v1/requests/req-424242/resume", &[("x-auth-key", &key)], Some(json!({"text": "7"})))
        .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn expired_clarification_is_gone() {
    let mut cfg = faulty_config();
    cfg.graph.awaiting_ttl_secs = 0;
    let api = Api::new(cfg);
    let key = api.setup().await;
    let v = clarification(&api, &key).await;
    std::thread::sleep(std::time::Duration::from_millis(5));
    let uri = format!("/v1/requests/{}/resume", v["request_id"].as_str().unwrap());
    let (s, v) = api.call(Method::POST, &uri, &[("x-auth-key", &key)], Some(json!({"text": "1 and 2"}))).await;
    assert_eq!((s, v["error_kind"].as_str()), (StatusCode::GONE, Some("expired")));
}

#[test]
fn concurrent_resumes_accept_exactly_one() {
    let mut cfg = faulty_config();
    cfg.backend.mock_latency_ms = 20;
    let gw = Gateway::new(cfg).unwrap();
    gw.register_service(calc::descriptor("builtin://calculator")).unwrap();
    let key = gw
        .register_user("alice", AccessCertificate::new(["calculator"], [WorkerClass::Cpu]))
        .unwrap()
        .auth_key;
    let parked = (0..400)
        .map(|i| {
            gw.handle_chat(&ChatRequest {
                session_id: "s".into(),
                auth_key: key.clone(),
                prompt: format!("add {} and {}", i + 1, i + 2),
            })
        })
        .find(|r| r.kind == ResponseKind::Clarification)
        .expect("a clarification");
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| s.spawn(|| gw.resume(&parked.request_id, &key, "3 and 4")))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let rejected = results
        .iter()
        .filter(|r| r.error_kind == Some(ErrorKind::NotAwaiting))
        .count();
    assert_eq!(rejected, 3, "{results:?}");
}

#[test]
fn replay_after_restart_gives_identical_responses() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config();
    cfg.server.state_file = Some(dir.path().join("state.json"));
    let prompts = [
        "add 5 and 3",
        "what is 9 minus 4 minus 1",
        "multiply 6 by 7",
        "what is the capital of france",
        "what is the product of 2, 3 and 4",
    ];
    let key = {
        let gw = Gateway::new(cfg.clone()).unwrap();
        gw.register_service(calc::descriptor("builtin://calculator")).unwrap();
        gw.register_user("alice", AccessCertificate::new(["calculator"], [WorkerClass::Cpu]))
            .unwrap()
            .auth_key
    };
    let run = || {
        let gw = Gateway::new(cfg.clone()).unwrap();
        prompts
            .iter()
            .map(|p| {
                gw.handle_chat(&ChatRequest {
                    session_id: "s".into(),
                    auth_key: key.clone(),
                    prompt: (*p).into(),
                })
            })
            .collect::<Vec<_>>()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    assert_eq!(first[0].text, "8");
    assert_eq!(first[1].text, "4");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_response_resolves_via_traces(prompt in "[a-z0-9 ]{0,40}", good_key in any::<bool>()) {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        rt.block_on(async {
            let api = Api::new(config());
            let key = api.setup().await;
            let (_, v) = api.chat(if good_key { &key } else { "nope" }, &prompt).await;
            let id = v["request_id"].as_str().unwrap();
            let (s, t) = api.call(Method::GET, &format!("/v1/traces/{id}"), &[("x-admin-key", ADMIN)], None).await;
            prop_assert_eq!(s, StatusCode::OK);
            prop_assert!(!t["events"].as_array().unwrap().is_empty());
            Ok(())
        })?;
    }
}
