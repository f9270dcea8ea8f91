//! HTTP front end. Blocking pipeline work runs on the blocking pool.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use llm_gateway_core::calc;
use llm_gateway_core::services::{InvokeRequest, ServiceDescriptor};
use llm_gateway_core::users::AccessCertificate;
use serde::Deserialize;
use serde_json::json;

use crate::gateway::{ChatRequest, ChatResponse, ErrorKind, Gateway, GatewayError, ResponseKind};

pub fn status_for(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::Authentication => StatusCode::UNAUTHORIZED,
        ErrorKind::Forbidden => StatusCode::FORBIDDEN,
        ErrorKind::NotFound => StatusCode::NOT_FOUND,
        ErrorKind::Conflict | ErrorKind::NotAwaiting => StatusCode::CONFLICT,
        ErrorKind::InvalidRequest => StatusCode::BAD_REQUEST,
        ErrorKind::Expired => StatusCode::GONE,
        ErrorKind::Unresolved => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Execution => StatusCode::BAD_GATEWAY,
        ErrorKind::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

struct ApiError(GatewayError);

impl From<GatewayError> for ApiError {
    fn from(e: GatewayError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": self.0.kind.as_str(), "message": self.0.message});
        (status_for(self.0.kind), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn chat_reply(r: ChatResponse) -> Response {
    let status = match (r.kind, r.error_kind) {
        (ResponseKind::Error, Some(k)) => status_for(k),
        (ResponseKind::Error, None) => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::OK,
    };
    (status, Json(r)).into_response()
}

fn header<'a>(headers: &'a HeaderMap, name: &str) -> Option<&'a str> {
    headers.get(name).and_then(|v| v.to_str().ok())
}

/// `Authorization: Bearer <key>` or `X-Auth-Key: <key>`.
fn auth_key(headers: &HeaderMap) -> Option<String> {
    header(headers, "authorization")
        .and_then(|v| v.strip_prefix("Bearer "))
        .or_else(|| header(headers, "x-auth-key"))
        .map(|s| s.trim().to_string())
}

fn admin_key(headers: &HeaderMap) -> Option<&str> {
    header(headers, "x-admin-key")
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| GatewayError::new(ErrorKind::Internal, e.to_string()).into())
}

async fn chat(State(gw): State<Arc<Gateway>>, headers: HeaderMap, Json(mut req): Json<ChatRequest>) -> ApiResult<Response> {
    if req.auth_key.is_empty() {
        req.auth_key = auth_key(&headers).unwrap_or_default();
    }
    let r = blocking(move || gw.handle_chat(&req)).await?;
    Ok(chat_reply(r))
}

#[derive(Deserialize)]
struct ResumeBody {
    text: String,
    #[serde(default)]
    auth_key: Option<String>,
}

async fn resume(
    State(gw): State<Arc<Gateway>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<ResumeBody>,
) -> ApiResult<Response> {
    let key = body.auth_key.or_else(|| auth_key(&headers)).unwrap_or_default();
    let r = blocking(move || gw.resume(&id, &key, &body.text)).await?;
    Ok(chat_reply(r))
}

async fn request(State(gw): State<Arc<Gateway>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let view = gw.request(&id, auth_key(&headers).as_deref(), admin_key(&headers))?;
    Ok(Json(view).into_response())
}

async fn traces(State(gw): State<Arc<Gateway>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    let events = gw.traces(&id, auth_key(&headers).as_deref(), admin_key(&headers))?;
    Ok(Json(json!({"request_id": id, "events": events})).into_response())
}

async fn register_service(
    State(gw): State<Arc<Gateway>>,
    headers: HeaderMap,
    Json(desc): Json<ServiceDescriptor>,
) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    let name = desc.name.clone();
    blocking(move || gw.register_service(desc)).await??;
    Ok((StatusCode::CREATED, Json(json!({"name": name}))).into_response())
}

/// Admins see every service, users the ones their certificate allows.
async fn list_services(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> ApiResult<Response> {
    let services = if gw.check_admin(admin_key(&headers)).is_ok() {
        gw.services()
    } else {
        gw.services_for(&auth_key(&headers).unwrap_or_default())?
    };
    Ok(Json(services).into_response())
}

#[derive(Deserialize)]
struct NewUser {
    user_id: String,
    #[serde(default)]
    certificate: AccessCertificate,
}

async fn register_user(State(gw): State<Arc<Gateway>>, headers: HeaderMap, Json(body): Json<NewUser>) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    let rec = blocking(move || gw.register_user(&body.user_id, body.certificate)).await??;
    Ok((StatusCode::CREATED, Json(rec)).into_response())
}

async fn revoke_user(State(gw): State<Arc<Gateway>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    blocking(move || gw.revoke_user(&id)).await??;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn admin_scheduler(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    Ok(Json(json!({"scheduler": gw.scheduler_snapshot(), "backend": gw.backend_stats()})).into_response())
}

async fn admin_cache(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    Ok(Json(gw.cache_report()).into_response())
}

async fn admin_drift(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    Ok(Json(gw.drift_view()).into_response())
}

async fn debug_index(State(gw): State<Arc<Gateway>>, headers: HeaderMap) -> ApiResult<Response> {
    gw.check_admin(admin_key(&headers))?;
    Ok(Json(gw.index_dump()).into_response())
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn readyz(State(gw): State<Arc<Gateway>>) -> Response {
    let services = gw.services().len();
    let status = if services > 0 { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (status, Json(json!({"services": services}))).into_response()
}

pub fn app(gw: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/chat", post(chat))
        .route("/v1/requests/{id}", get(request))
        .route("/v1/requests/{id}/resume", post(resume))
        .route("/v1/traces/{id}", get(traces))
        .route("/v1/services", post(register_service).get(list_services))
        .route("/v1/users", post(register_user))
        .route("/v1/users/{id}", delete(revoke_user))
        .route("/v1/admin/scheduler", get(admin_scheduler))
        .route("/v1/admin/cache", get(admin_cache))
        .route("/v1/admin/drift", get(admin_drift))
        .route("/v1/debug/index", get(debug_index))
        .route("/healthz", get(healthz))
        .route("/readyz", get(readyz))
        .with_state(gw)
}

async fn invoke(Json(req): Json<InvokeRequest>) -> Response {
    let resp = calc::handle(&req);
    let status = if resp.ok { StatusCode::OK } else { StatusCode::BAD_REQUEST };
    (status, Json(resp)).into_response()
}

/// The calculator as a standalone service.
pub fn calculator_app() -> Router {
    Router::new().route("/invoke", post(invoke)).route("/healthz", get(healthz))
}

pub async fn serve(router: Router, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
