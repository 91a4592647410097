use std::sync::Arc;
use std::time::{Duration, Instant};

use attnlab::attention::hook::NoHook;
use attnlab::backend::adapter::{BackboneId, ModelAdapter};
use attnlab::backend::ddim::SamplerConfig;
use attnlab::service::{router, spawn_workers, AppState, JobService, ToolkitConfig};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
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
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn edit_body(seed: u64, target: &str, kinds: Value) -> Value {
    json!({
        "kind": "edit",
        "request": {
            "source": { "type": "seeded_prompt", "seed": seed, "prompt": "a photo of a sheep" },
            "target_prompt": target,
            "sampler": { "step_count": 6, "seed": seed },
            "policy": { "kinds": kinds, "site_indices": [1, 2, 3, 4] }
        }
    })
}

fn tiny_app(capacity: usize) -> (tempfile::TempDir, Arc<JobService>, Router) {
    let dir = tempfile::tempdir().unwrap();
    let jobs = JobService::open(dir.path(), capacity).unwrap();
    let app = router(AppState::for_backbone(jobs.clone(), BackboneId::TinyTest));
    (dir, jobs, app)
}

#[tokio::test]
async fn sites_listing_matches_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = JobService::open(dir.path(), 4).unwrap();
    let sd15 = router(AppState::for_backbone(jobs.clone(), BackboneId::Sd15));
    let (status, body) = call_json(&sd15, "GET", "/sites", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["sites"].as_array().unwrap().len(), 32);

    let tiny = router(AppState::for_backbone(jobs, BackboneId::TinyTest));
    let (_, body) = call_json(&tiny, "GET", "/sites", None).await;
    assert_eq!(body["sites"].as_array().unwrap().len(), 8);
}

#[tokio::test]
async fn invalid_requests_get_a_pointer() {
    let (_dir, _jobs, app) = tiny_app(4);
    let cases = [
        (json!({ "kind": "paint", "request": {} }), "/kind"),
        (json!({ "kind": "edit", "request": {}, "priority": 1 }), "/priority"),
        (
            json!({ "kind": "edit", "request": {
                "source": { "type": "seeded_prompt", "seed": 1, "prompt": "a cat" },
                "target_prompt": "a dog",
                "policy": { "replace_ratio": 1.5 }
            }}),
            "/request/policy/replace_ratio",
        ),
    ];
    for (body, pointer) in cases {
        let (status, resp) = call_json(&app, "POST", "/jobs", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{resp}");
        assert_eq!(resp["pointer"], pointer, "{resp}");
    }
    let mut bad_site = edit_body(1, "a goat", json!(["self"]));
    bad_site["request"]["policy"]["site_indices"] = json!([9]);
    let (status, resp) = call_json(&app, "POST", "/jobs", Some(bad_site)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(resp["pointer"], "/request/policy/site_indices");

    let sweep = json!({
        "base": edit_body(1, "a goat", json!(["self"]))["request"],
        "grid": { "modes": ["self"], "site_sets": [[1]], "ratios": [0.5] }
    });
    let mut bad_steps = sweep.clone();
    bad_steps["base"]["sampler"]["step_count"] = json!(0);
    let (status, resp) = call_json(&app, "POST", "/sweeps", Some(bad_steps)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(resp["pointer"], "/base/sampler/step_count");
    let (status, _) = call_json(&app, "POST", "/sweeps", Some(sweep)).await;
    assert_eq!(status, StatusCode::ACCEPTED);
}

#[tokio::test]
async fn unknown_ids_and_unfinished_jobs() {
    let (_dir, _jobs, app) = tiny_app(4);
    assert_eq!(call(&app, "GET", "/jobs/job-999999", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/jobs/job-999999/artifacts/dst.png", None).await.0, StatusCode::NOT_FOUND);

    let (status, resp) = call_json(&app, "POST", "/jobs", Some(edit_body(3, "a goat", json!(["self"])))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = resp["id"].as_str().unwrap().to_string();
    assert_eq!(resp["status"], "queued");
    let (status, _) = call(&app, "GET", &format!("/jobs/{id}/artifacts/dst.png"), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn full_queue_and_idempotency() {
    let (_dir, jobs, app) = tiny_app(1);
    let mut first = edit_body(3, "a goat", json!(["self"]));
    first["idempotency_key"] = json!("k1");
    let (status, a) = call_json(&app, "POST", "/jobs", Some(first.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let (status, b) = call_json(&app, "POST", "/jobs", Some(first.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a["id"], b["id"]);

    let (status, _) = call_json(&app, "POST", "/jobs", Some(edit_body(4, "a goat", json!(["self"])))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let mut reused = edit_body(5, "a goat", json!(["self"]));
    reused["idempotency_key"] = json!("k1");
    let (status, _) = call_json(&app, "POST", "/jobs", Some(reused)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(jobs.queued(), 1);
}

#[tokio::test]
async fn schema_and_health_are_served() {
    let (_dir, _jobs, app) = tiny_app(2);
    let (status, schema) = call_json(&app, "GET", "/schema", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(schema["$defs"]["edit"].is_object());
    let (_, health) = call_json(&app, "GET", "/health", None).await;
    assert_eq!(health["ok"], true);
}

async fn wait_done(app: &Router, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(300);
    loop {
        let (_, record) = call_json(app, "GET", &format!("/jobs/{id}"), None).await;
        match record["status"].as_str() {
            Some("done") | Some("failed") => return record,
            _ if Instant::now() > deadline => panic!("job {id} did not finish: {record}"),
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn no_op_policy_job_equals_direct_generation() {
    let dir = tempfile::tempdir().unwrap();
    let jobs = JobService::open(dir.path(), 4).unwrap();
    let adapter = Arc::new(ModelAdapter::tiny_test(0).unwrap());
    let config = ToolkitConfig {
        backbone_id: "tiny-test".into(),
        storage_root: dir.path().to_path_buf(),
        ..Default::default()
    };
    let workers = spawn_workers(jobs.clone(), adapter.clone(), Arc::new(config), 1);
    let app = router(AppState::new(jobs.clone(), &adapter));

    let (status, resp) = call_json(&app, "POST", "/jobs", Some(edit_body(8, "a goat", json!([])))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{resp}");
    let id = resp["id"].as_str().unwrap().to_string();
    let record = wait_done(&app, &id).await;
    assert_eq!(record["status"], "done", "{record}");
    assert!(record["artifact_paths"].as_array().unwrap().iter().any(|p| p == "dst.png"));

    let (status, png) = call(&app, "GET", &format!("/jobs/{id}/artifacts/dst.png"), None).await;
    assert_eq!(status, StatusCode::OK);
    let served = image::load_from_memory(&png).unwrap().to_rgb8();
    let cfg = SamplerConfig {
        step_count: 6,
        seed: 8,
        ..Default::default()
    };
    let z = adapter.generate("a goat", &cfg, &mut NoHook).unwrap();
    let direct = adapter.decode_latent(&z).unwrap();
    assert!(served == direct, "HTTP no-op edit differs from direct generation");

    let (status, _) = call(&app, "GET", &format!("/jobs/{id}/artifacts/missing.png"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    jobs.close();
    for w in workers {
        w.join().unwrap();
    }
}
