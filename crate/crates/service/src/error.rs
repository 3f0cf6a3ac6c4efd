use axum::extract::rejection::JsonRejection;
use axum::extract::Request;
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use axum::Json;
use serde::Serialize;

pub const CORRELATION_HEADER: &str = "x-correlation-id";

/// Error body of every non-2xx response.
#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    /// Turn stage that failed, for backend failures during a turn.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub correlation_id: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.to_string(),
            message: message.into(),
            stage: None,
            correlation_id: String::new(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation_failed", message)
    }

    pub fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("unknown {what} `{id}`"))
    }

    pub fn busy(id: &str) -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "turn_in_progress",
            format!("session `{id}` is already handling a turn"),
        )
    }

    pub fn backend(stage: &str, message: impl Into<String>) -> Self {
        Self {
            stage: Some(stage.to_string()),
            ..Self::new(StatusCode::BAD_GATEWAY, "backend_unavailable", message)
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }

    fn render(mut self, correlation_id: &str) -> Response {
        self.correlation_id = correlation_id.to_string();
        let status = self.status;
        (status, Json(self)).into_response()
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        // The correlation layer re-renders the body with the request's id.
        let id = uuid::Uuid::new_v4().to_string();
        let mut resp = self.clone().render(&id);
        resp.extensions_mut().insert(self);
        resp
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "invalid_body", r.body_text())
    }
}

/// Tags every response with a correlation id (the caller's `x-request-id`
/// when given) and stamps it into error bodies.
pub async fn correlate(req: Request, next: Next) -> Response {
    let id = req
        .headers()
        .get("x-request-id")
        .and_then(|v| v.to_str().ok())
        .filter(|v| !v.is_empty() && v.len() <= 128)
        .map(str::to_string)
        .unwrap_or_else(|| uuid::Uuid::new_v4().to_string());
    let mut resp = next.run(req).await;
    if let Some(err) = resp.extensions_mut().remove::<ApiError>() {
        resp = err.render(&id);
    } else if !resp.status().is_success() && !resp.status().is_redirection() {
        // Responses produced outside our handlers (e.g. by a layer).
        let status = resp.status();
        resp = ApiError::new(status, "http_error", status.canonical_reason().unwrap_or("error")).render(&id);
    }
    if let Ok(v) = HeaderValue::from_str(&id) {
        resp.headers_mut().insert(CORRELATION_HEADER, v);
    }
    resp
}
