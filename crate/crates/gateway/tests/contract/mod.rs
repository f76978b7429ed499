//! HTTP contract: response shapes are pinned by golden files under
//! `tests/golden`; set `UPDATE_GOLDEN=1` to rewrite them.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Map, Value};
use tower::ServiceExt;
use unlearn_core::backend::mock::{MockBackend, MockFixture};
use unlearn_core::{Bm25Params, CorrectionPipeline, ExclusionSet, ExclusionStore, PipelineConfig};
use unlearn_gateway::server::{router, AppState};

const LEAKY_QUERY: &str = "Who wrote the Silver Lantern trilogy?";
const SAFE_QUERY: &str = "What is the boiling point of water at sea level?";

fn fixture() -> MockFixture {
    let mut f = MockFixture::default();
    f.drafts.insert(
        LEAKY_QUERY.into(),
        "The Silver Lantern trilogy was written by Mirela Vantongeren.".into(),
    );
    f.drafts.insert(
        SAFE_QUERY.into(),
        "Water boils at 100 degrees Celsius.".into(),
    );
    f
}

struct Harness {
    app: Router,
    _dir: tempfile::TempDir,
    store_path: PathBuf,
}

fn harness_with(backend: Arc<MockBackend>, max_batch: usize) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let store_path = dir.path().join("exclusions.jsonl");
    let set = Arc::new(
        ExclusionSet::new(ExclusionStore::new(), Bm25Params::default()).persist_to(&store_path),
    );
    let pipeline = CorrectionPipeline::new(backend, set, PipelineConfig::default()).unwrap();
    let state = AppState {
        pipeline: Arc::new(pipeline),
        max_batch,
    };
    Harness {
        app: router(state, 1 << 20),
        _dir: dir,
        store_path,
    }
}

fn harness() -> Harness {
    harness_with(Arc::new(MockBackend::new(fixture())), 100)
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    content_type: &str,
    body: impl Into<Body>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", content_type)
        .body(body.into())
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value =
        serde_json::from_slice(&bytes).unwrap_or_else(|_| panic!("non-JSON body: {bytes:?}"));
    (status, value)
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, Method::POST, uri, "application/json", body.to_string()).await
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Method::GET, uri, "application/json", Body::empty()).await
}

/// Replaces every scalar with its JSON type name; arrays keep the shape of
/// their first element.
fn shape(v: &Value) -> Value {
    match v {
        Value::Null => json!("null"),
        Value::Bool(_) => json!("bool"),
        Value::Number(_) => json!("number"),
        Value::String(_) => json!("string"),
        Value::Array(items) => Value::Array(items.first().map(shape).into_iter().collect()),
        Value::Object(o) => Value::Object(
            o.iter()
                .map(|(k, v)| (k.clone(), shape(v)))
                .collect::<Map<_, _>>(),
        ),
    }
}

fn assert_golden(name: &str, body: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(format!("{name}.json"));
    let actual = shape(body);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&actual).unwrap() + "\n").unwrap();
        return;
    }
    let expected: Value = serde_json::from_str(
        &std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("golden {}: {e}", path.display())),
    )
    .unwrap();
    assert_eq!(
        actual, expected,
        "response shape for {name} drifted from golden file"
    );
}

fn assert_structured(
    status: StatusCode,
    body: &Value,
    expected_status: StatusCode,
    field: Option<&str>,
) {
    assert_eq!(status, expected_status, "body: {body}");
    let err = body
        .get("error")
        .unwrap_or_else(|| panic!("no error object: {body}"));
    assert!(
        err["code"].is_string() && err["message"].is_string(),
        "{body}"
    );
    if let Some(f) = field {
        assert_eq!(err["field"], json!(f), "{body}");
    }
}

async fn add_target(app: &Router) -> Value {
    let (status, body) = post_json(
        app,
        "/admin/exclusions",
        json!([{"id": "t1", "question": "Who wrote the Silver Lantern trilogy?",
                "answer": "Mirela Vantongeren", "tags": ["author"]}]),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    body
}

pub async fn healthz_on_fresh_store_reports_version_zero() {
    let h = harness();
    let (status, body) = get(&h.app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        body,
        json!({"status": "ok", "store_version": 0, "index_generation": 0})
    );
    assert_golden("healthz", &body);
}

pub async fn add_list_remove_match_golden_shapes() {
    let h = harness();
    let added = add_target(&h.app).await;
    assert_eq!(added["store_version"], 1);
    assert_eq!(added["record_count"], 1);
    assert_eq!(added["changed"], 1);
    assert_golden("add_exclusions", &added);
    assert!(h.store_path.exists(), "mutation was not persisted");

    let (status, listed) = get(&h.app, "/admin/exclusions?tag=author").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(listed["records"].as_array().unwrap().len(), 1);
    assert_golden("list_exclusions", &listed);
    let (_, none) = get(&h.app, "/admin/exclusions?q=nonexistent").await;
    assert!(none["records"].as_array().unwrap().is_empty());

    let (status, removed) = call(
        &h.app,
        Method::DELETE,
        "/admin/exclusions",
        "application/json",
        json!({"ids": ["t1"]}).to_string(),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{removed}");
    assert_eq!(removed["store_version"], 2);
    assert_eq!(removed["record_count"], 0);
    assert_golden("remove_exclusions", &removed);
}

pub async fn correct_revises_leaks_and_passes_safe_drafts_through() {
    let h = harness();
    let added = add_target(&h.app).await;

    let (status, leaked) = post_json(&h.app, "/v1/correct", json!({"query": LEAKY_QUERY})).await;
    assert_eq!(status, StatusCode::OK, "{leaked}");
    assert_eq!(leaked["branch"], "revised");
    assert_eq!(leaked["index_generation"], added["index_generation"]);
    assert!(!leaked["final"].as_str().unwrap().contains("Vantongeren"));
    assert_eq!(leaked["retrieved"][0]["record_id"], "t1");
    assert_golden("correct_revised", &leaked);

    let (status, safe) = post_json(&h.app, "/v1/correct", json!({"query": SAFE_QUERY})).await;
    assert_eq!(status, StatusCode::OK, "{safe}");
    assert_eq!(safe["branch"], "passthrough");
    assert_eq!(safe["final"], safe["draft"]);
    assert_golden("correct_passthrough", &safe);
}

pub async fn correct_observes_each_new_index_generation() {
    let h = harness();
    let first = add_target(&h.app).await;
    let (_, a) = post_json(&h.app, "/v1/correct", json!({"query": SAFE_QUERY})).await;
    assert_eq!(a["index_generation"], first["index_generation"]);
    let (_, second) = post_json(
        &h.app,
        "/admin/exclusions",
        json!({"records": [{"question": "Capital of Zembla?", "answer": "Onhava"}]}),
    )
    .await;
    let (_, b) = post_json(&h.app, "/v1/correct", json!({"query": SAFE_QUERY})).await;
    assert_eq!(b["index_generation"], second["index_generation"]);
    assert_ne!(a["index_generation"], b["index_generation"]);
    assert_eq!(b["store_version"], 2);
}

pub async fn ndjson_batches_are_accepted() {
    let h = harness();
    let body = "{\"question\":\"q1\",\"answer\":\"a1\"}\n{\"question\":\"q2\",\"answer\":\"a2\"}\n";
    let (status, v) = call(
        &h.app,
        Method::POST,
        "/admin/exclusions",
        "application/x-ndjson",
        body,
    )
    .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["record_count"], 2);
}

pub async fn malformed_correct_bodies_are_structured_400s() {
    let h = harness();
    add_target(&h.app).await;
    let (s, b) = call(
        &h.app,
        Method::POST,
        "/v1/correct",
        "application/json",
        "{not json",
    )
    .await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("body"));
    assert_golden("error", &b);
    let (s, b) = post_json(&h.app, "/v1/correct", json!({})).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("query"));
    let (s, b) = post_json(&h.app, "/v1/correct", json!({"query": 7})).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("query"));
    let (s, b) = post_json(&h.app, "/v1/correct", json!({"query": "   "})).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("query"));
    let (s, b) = post_json(&h.app, "/v1/correct", json!(["query"])).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("body"));
}

pub async fn malformed_admin_requests_are_structured_4xx() {
    let h = harness_with(Arc::new(MockBackend::new(fixture())), 2);
    let (s, b) = post_json(&h.app, "/admin/exclusions", json!([{"question": "q"}])).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("[0].answer"));
    let (s, b) = post_json(
        &h.app,
        "/admin/exclusions",
        json!([{"question": "q", "answer": ""}]),
    )
    .await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("[0].answer"));
    let (s, b) = post_json(
        &h.app,
        "/admin/exclusions",
        json!([{"question": "q", "answer": "a", "tags": [1]}]),
    )
    .await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("[0].tags"));
    let (s, b) = post_json(&h.app, "/admin/exclusions", json!([])).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("records"));
    let (s, b) = post_json(&h.app, "/admin/exclusions", json!({"records": 3})).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("records"));
    let too_many = json!([
        {"question": "a", "answer": "1"}, {"question": "b", "answer": "2"}, {"question": "c", "answer": "3"}
    ]);
    let (s, b) = post_json(&h.app, "/admin/exclusions", too_many).await;
    assert_structured(s, &b, StatusCode::PAYLOAD_TOO_LARGE, Some("records"));
    let (s, b) = call(
        &h.app,
        Method::POST,
        "/admin/exclusions",
        "application/x-ndjson",
        "{\"question\":\"q\"}\n",
    )
    .await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, None);

    add_target(&h.app).await;
    let dup = json!([{"id": "t1", "question": "again", "answer": "again"}]);
    let (s, b) = post_json(&h.app, "/admin/exclusions", dup).await;
    assert_structured(s, &b, StatusCode::CONFLICT, Some("t1"));

    let del = |body: Value| {
        call(
            &h.app,
            Method::DELETE,
            "/admin/exclusions",
            "application/json",
            body.to_string(),
        )
    };
    let (s, b) = del(json!({"ids": ["missing"]})).await;
    assert_structured(s, &b, StatusCode::NOT_FOUND, Some("missing"));
    let (s, b) = del(json!({"ids": "t1"})).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("ids"));
    let (s, b) = del(json!({"ids": [""]})).await;
    assert_structured(s, &b, StatusCode::BAD_REQUEST, Some("ids[0]"));

    let (s, b) = get(&h.app, "/nope").await;
    assert_structured(s, &b, StatusCode::NOT_FOUND, None);
}

pub async fn failed_batches_leave_the_store_untouched() {
    let h = harness();
    add_target(&h.app).await;
    let mixed = json!([{"id": "fresh", "question": "q", "answer": "a"}, {"id": "t1", "question": "q", "answer": "a"}]);
    let (s, _) = post_json(&h.app, "/admin/exclusions", mixed).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, health) = get(&h.app, "/healthz").await;
    assert_eq!(health["store_version"], 1);
    let (_, listed) = get(&h.app, "/admin/exclusions").await;
    assert_eq!(listed["records"].as_array().unwrap().len(), 1);
}

pub async fn empty_store_and_backend_outage_map_to_5xx() {
    let backend = Arc::new(MockBackend::new(fixture()));
    let h = harness_with(backend.clone(), 100);
    let (s, b) = post_json(&h.app, "/v1/correct", json!({"query": SAFE_QUERY})).await;
    assert_structured(s, &b, StatusCode::SERVICE_UNAVAILABLE, Some("config"));
    add_target(&h.app).await;
    backend.set_down(true);
    let (s, b) = post_json(&h.app, "/v1/correct", json!({"query": SAFE_QUERY})).await;
    assert_structured(s, &b, StatusCode::BAD_GATEWAY, Some("draft"));
}

/// Every contract check in sequence; panics on the first violation.
pub async fn all() {
    healthz_on_fresh_store_reports_version_zero().await;
    add_list_remove_match_golden_shapes().await;
    correct_revises_leaks_and_passes_safe_drafts_through().await;
    correct_observes_each_new_index_generation().await;
    ndjson_batches_are_accepted().await;
    malformed_correct_bodies_are_structured_400s().await;
    malformed_admin_requests_are_structured_4xx().await;
    failed_batches_leave_the_store_untouched().await;
    empty_store_and_backend_outage_map_to_5xx().await;
}
