use std::net::TcpListener;
use std::time::Duration;

use axum::body::Body;
use axum::http::{HeaderMap, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use tidyhome_service::{router, AppState, ServiceConfig};

const DINING: &str = "I just finished dinner, please clear the dining table.";
const LIVING: &str = "Please hand me the brush and tidy up the rest of the living room.";
const DESK: &str = "Please clear my desk, leaving only the essentials for work.";

fn app() -> Router {
    router(AppState::new(ServiceConfig::default()))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, HeaderMap, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, headers, value)
}

async fn new_session(app: &Router, body: Value) -> String {
    let (status, _, v) = call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

fn assert_api_error(v: &Value) {
    for field in ["code", "message", "correlation_id"] {
        assert!(v[field].as_str().is_some_and(|s| !s.is_empty()), "missing {field}: {v}");
    }
}

fn executed_moves(record: &Value) -> usize {
    record["result"]["executed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["moves"].as_array().unwrap().len())
        .sum()
}

#[tokio::test]
async fn health_reports_scripted_backend() {
    let (status, _, v) = call(&app(), Method::GET, "/v1/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["backends"][0]["reachable"], true);
}

#[tokio::test]
async fn dining_turn_executes_eight_moves() {
    let app = app();
    let id = new_session(&app, json!({"scenario": "dining_table"})).await;
    let (status, _, rec) = call(&app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(json!({"text": DINING}))).await;
    assert_eq!(status, StatusCode::OK, "{rec}");
    assert_eq!(rec["route"]["category"], "action_command");
    assert_eq!(rec["result"]["kind"], "plan");
    assert_eq!(executed_moves(&rec), 8);
    assert!(rec["result"]["narration"].as_str().unwrap().contains("Moved"));

    let (_, _, world) = call(&app, Method::GET, &format!("/v1/sessions/{id}/world"), None).await;
    assert_eq!(world["event_log"].as_array().unwrap().len(), 8);
}

#[tokio::test]
async fn history_is_dense_across_scenarios() {
    let app = app();
    let id = new_session(&app, json!({"scenario": "dining_table"})).await;
    for (scenario, text) in [("dining_table", DINING), ("living_room", LIVING), ("desk", DESK)] {
        let (s, _, _) = call(&app, Method::PUT, &format!("/v1/sessions/{id}/scenario"), Some(json!({"scenario": scenario}))).await;
        assert_eq!(s, StatusCode::OK);
        let (s, _, rec) = call(&app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(json!({"text": text}))).await;
        assert_eq!(s, StatusCode::OK, "{rec}");
    }
    let (_, _, history) = call(&app, Method::GET, &format!("/v1/sessions/{id}/history"), None).await;
    let ids: Vec<u64> = history.as_array().unwrap().iter().map(|e| e["entry_id"].as_u64().unwrap()).collect();
    assert_eq!(ids, vec![1, 2, 3]);

    let (s, _, world) = call(&app, Method::GET, &format!("/v1/sessions/{id}/world?scenario=living_room"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(!world["event_log"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn injected_error_is_visible_only_in_the_world() {
    let app = app();
    let id = new_session(
        &app,
        json!({"scenario": "living_room", "config": {"error_injection": {"Jacket": "trash_can"}}}),
    )
    .await;
    let (_, _, rec) = call(&app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(json!({"text": LIVING}))).await;
    assert!(rec["result"]["narration"].as_str().unwrap().contains("Jacket to the storage box"));
    let (_, _, world) = call(&app, Method::GET, &format!("/v1/sessions/{id}/world"), None).await;
    assert_eq!(world["placements"]["Jacket"], "trash_can");
}

#[tokio::test]
async fn errors_carry_code_message_and_correlation_id() {
    let app = app();
    let (s, _, v) = call(&app, Method::POST, "/v1/sessions/nope/turns", Some(json!({"text": "hi"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_api_error(&v);

    let (s, _, v) = call(&app, Method::GET, "/v1/nothing-here", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_api_error(&v);

    let (s, _, v) = call(&app, Method::DELETE, "/v1/healthz", None).await;
    assert_eq!(s, StatusCode::METHOD_NOT_ALLOWED);
    assert_api_error(&v);

    let (s, _, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({"scenario": "garage"}))).await;
    assert!(s.is_client_error());
    assert_api_error(&v);

    let id = new_session(&app, json!({"scenario": "desk"})).await;
    let (s, _, v) = call(&app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(json!({"text": "   "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "validation_failed");

    let resp = app
        .clone()
        .oneshot(Request::get("/v1/sessions/nope/world").header("x-request-id", "req-42").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.headers()["x-correlation-id"], "req-42");
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["correlation_id"], "req-42");
}

#[tokio::test]
async fn duplicate_session_id_conflicts() {
    let app = app();
    new_session(&app, json!({"scenario": "desk", "id": "kitchen-1"})).await;
    let (s, _, v) = call(&app, Method::POST, "/v1/sessions", Some(json!({"scenario": "desk", "id": "kitchen-1"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_api_error(&v);
    let (s, _, _) = call(&app, Method::POST, "/v1/sessions", Some(json!({"scenario": "desk", "id": "bad id!"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

/// Accepts connections and never answers.
fn silent_backend() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        let mut held = Vec::new();
        for stream in listener.incoming() {
            held.push(stream);
        }
    });
    url
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn overlapping_turn_conflicts_and_transport_failure_is_502() {
    let app = app();
    let backend = json!({"kind": "openai", "base_url": silent_backend(), "model": "m", "timeout_secs": 0.6});
    let id = new_session(&app, json!({"scenario": "desk", "config": {"backend": backend}})).await;

    let uri = format!("/v1/sessions/{id}/turns");
    let first = {
        let (app, uri) = (app.clone(), uri.clone());
        tokio::spawn(async move { call(&app, Method::POST, &uri, Some(json!({"text": DESK}))).await })
    };
    tokio::time::sleep(Duration::from_millis(200)).await;
    let (s, _, v) = call(&app, Method::POST, &uri, Some(json!({"text": DESK}))).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    assert_eq!(v["code"], "turn_in_progress");

    let (s, _, v) = first.await.unwrap();
    assert_eq!(s, StatusCode::BAD_GATEWAY, "{v}");
    assert_eq!(v["stage"], "route");
    assert_api_error(&v);

    // The failed turn left nothing behind, and the session is free again.
    let (_, _, history) = call(&app, Method::GET, &format!("/v1/sessions/{id}/history"), None).await;
    assert_eq!(history, json!([]));
    let (s, _, _) = call(&app, Method::PUT, &format!("/v1/sessions/{id}/scenario"), Some(json!({"scenario": "dining_table"}))).await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sessions_do_not_share_state() {
    let app = app();
    let a = new_session(&app, json!({"scenario": "dining_table"})).await;
    let b = new_session(&app, json!({"scenario": "dining_table"})).await;
    let (turn_uri, world_uri) = (format!("/v1/sessions/{a}/turns"), format!("/v1/sessions/{b}/world"));
    let (ra, rb) = tokio::join!(
        call(&app, Method::POST, &turn_uri, Some(json!({"text": DINING}))),
        call(&app, Method::GET, &world_uri, None),
    );
    assert_eq!(ra.0, StatusCode::OK);
    assert_eq!(rb.2["event_log"], json!([]));
    let (_, _, hb) = call(&app, Method::GET, &format!("/v1/sessions/{b}/history"), None).await;
    assert_eq!(hb, json!([]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn event_stream_reports_turn_lifecycle() {
    let app = app();
    let id = new_session(&app, json!({"scenario": "dining_table"})).await;
    let resp = app
        .clone()
        .oneshot(Request::get(format!("/v1/sessions/{id}/events")).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    let (s, _, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/turns"), Some(json!({"text": DINING}))).await;
    assert_eq!(s, StatusCode::OK);

    let mut text = String::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while !text.contains("event: turn") {
        let frame = tokio::time::timeout_at(deadline, body.frame()).await.expect("stream stalled").unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    let stages: Vec<String> = text
        .lines()
        .filter_map(|l| l.strip_prefix("data: "))
        .filter_map(|d| serde_json::from_str::<Value>(d).ok())
        .filter_map(|v| v["event"].as_str().map(str::to_string))
        .collect();
    assert_eq!(stages, ["routed", "planned", "executed", "memorized"]);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn eval_run_completes() {
    let app = app();
    let spec = json!({
        "phase": "task_planning",
        "models": [{"name": "qwen_like", "backend": {"kind": "scripted", "script": "qwen_like"}}],
        "repetitions": 1
    });
    let (s, _, v) = call(&app, Method::POST, "/v1/eval/runs", Some(spec)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let id = v["id"].as_str().unwrap().to_string();
    let mut run = v;
    for _ in 0..100 {
        if run["status"] != "running" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
        run = call(&app, Method::GET, &format!("/v1/eval/runs/{id}"), None).await.2;
    }
    assert_eq!(run["status"], "done", "{run}");
    assert_eq!(run["report"]["phase"], "task_planning");
    assert!(!run["report"]["cells"].as_array().unwrap().is_empty());

    let (s, _, v) = call(&app, Method::POST, "/v1/eval/runs", Some(json!({"phase": "routing", "models": [], "repetitions": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_api_error(&v);
    let (s, _, _) = call(&app, Method::GET, "/v1/eval/runs/missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_allows_configured_origin() {
    let resp = app()
        .oneshot(
            Request::builder()
                .method(Method::OPTIONS)
                .uri("/v1/sessions")
                .header("origin", "http://localhost:5173")
                .header("access-control-request-method", "POST")
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.headers()["access-control-allow-origin"], "http://localhost:5173");
}
