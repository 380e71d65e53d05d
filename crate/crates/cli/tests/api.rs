use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use atdm_cli::server::{router, start, AppState};
use atdm_core::dataset::{write_synthetic_dataset, SyntheticSpec};
use atdm_core::pareto::{Norm, Orientation};
use atdm_core::pipeline::{PipelineConfig, RunRecord, RunStore};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_config() -> PipelineConfig {
    let mut cfg = PipelineConfig { seeds: 2, ..Default::default() };
    cfg.assimilation.n_particles = 24;
    cfg.assimilation.n_windows = 2;
    cfg
}

fn setup(dir: &Path) -> Arc<AppState> {
    let cfg = small_config();
    write_synthetic_dataset(&SyntheticSpec::default(), &cfg.corridor, &dir.join("data")).unwrap();
    start(RunStore::open(dir.join("runs")).unwrap(), dir.join("data"), cfg).unwrap()
}

async fn call(st: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_done(st: &Arc<AppState>, id: &str) -> Value {
    let deadline = Instant::now() + Duration::from_secs(120);
    loop {
        let (s, v) = call(st, "GET", &format!("/runs/{id}"), None).await;
        if s == StatusCode::OK {
            return v;
        }
        assert_eq!(s, StatusCode::ACCEPTED, "{v}");
        assert!(Instant::now() < deadline, "run {id} did not finish");
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
}

#[tokio::test]
async fn run_lifecycle_and_reads() {
    let dir = tempfile::tempdir().unwrap();
    let st = setup(dir.path());

    let (s, v) = call(&st, "POST", "/runs", Some(json!({"now": 50}))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["status"], "queued");
    let id = v["run_id"].as_str().unwrap().to_string();
    assert_eq!(id, "r0001-m050");
    // a second request queues behind the first
    let (s, v2) = call(&st, "POST", "/runs", Some(json!({"now": 55, "overrides": {"seeds": 1}}))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let id2 = v2["run_id"].as_str().unwrap().to_string();

    let rec = wait_done(&st, &id).await;
    let rec: RunRecord = serde_json::from_value(rec).unwrap();
    assert_eq!(rec.now_minute, 50);
    assert_eq!(rec.scenarios.len(), 4);
    let rec2: RunRecord = serde_json::from_value(wait_done(&st, &id2).await).unwrap();
    assert_eq!(rec2.scenarios[0].per_seed.len(), 1);

    let (s, list) = call(&st, "GET", "/runs", None).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<&str> = list.as_array().unwrap().iter().map(|r| r["run_id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec![id.as_str(), id2.as_str()]);

    let (s, p) = call(&st, "GET", &format!("/runs/{id}/pareto"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["points"].as_array().unwrap().len(), 4);
    let front: Vec<String> = serde_json::from_value(p["front"].clone()).unwrap();
    assert_eq!(front, rec.front().into_iter().map(|c| c.id).collect::<Vec<_>>());

    // the endpoint is the engine's selection, for every slider stop
    for w in [0.0, 0.25, 0.5, 0.75, 1.0] {
        for (p, norm) in [("1", Norm::P(1.0)), ("2", Norm::P(2.0)), ("inf", Norm::Chebyshev)] {
            let (s, sel) = call(&st, "GET", &format!("/runs/{id}/recommendation?w={w}&p={p}"), None).await;
            assert_eq!(s, StatusCode::OK, "{sel}");
            let expected = rec.recommend(&Orientation::new(w, norm).unwrap()).unwrap();
            assert_eq!(sel, serde_json::to_value(&expected).unwrap());
        }
    }
    let (s, sel) = call(&st, "GET", &format!("/runs/{id}/recommendation?w=0.7&p=1"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sel["scenario_id"], rec.selections[0].scenario_id.as_str());

    let (s, f) = call(&st, "GET", &format!("/runs/{id}/speedfield?scenario=AlsVsl"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(f["n_minutes"], 30);
    assert_eq!(f["speeds_kmh"].as_array().unwrap().len(), 30);
    assert_eq!(f["speeds_kmh"][0].as_array().unwrap().len(), 16);
}

#[tokio::test]
async fn bad_requests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let st = setup(dir.path());
    let cases = [
        ("POST", "/runs", Some(json!({"now": 0})), StatusCode::BAD_REQUEST),
        ("POST", "/runs", Some(json!({"now": 10_000})), StatusCode::BAD_REQUEST),
        ("POST", "/runs", Some(json!({"dataset": "/nonexistent"})), StatusCode::BAD_REQUEST),
        ("POST", "/runs", Some(json!({"overrides": {"seeds": 0}})), StatusCode::BAD_REQUEST),
        ("POST", "/runs", Some(json!({"overrides": {"corridor": {"n_lanes": 3}}})), StatusCode::BAD_REQUEST),
        ("POST", "/runs", Some(json!({"surprise": 1})), StatusCode::UNPROCESSABLE_ENTITY),
        ("GET", "/runs/nope", None, StatusCode::NOT_FOUND),
        ("GET", "/runs/..", None, StatusCode::NOT_FOUND),
        ("GET", "/runs/nope/pareto", None, StatusCode::NOT_FOUND),
        ("GET", "/runs/nope/recommendation?w=0.5&p=1", None, StatusCode::NOT_FOUND),
        ("GET", "/runs/nope/recommendation?w=2&p=1", None, StatusCode::BAD_REQUEST),
        ("GET", "/runs/nope/recommendation?w=0.5&p=0.5", None, StatusCode::BAD_REQUEST),
        ("GET", "/runs/nope/recommendation?w=0.5", None, StatusCode::BAD_REQUEST),
        ("GET", "/runs/nope/speedfield", None, StatusCode::BAD_REQUEST),
    ];
    for (m, uri, body, want) in cases {
        let (s, v) = call(&st, m, uri, body.clone()).await;
        assert_eq!(s, want, "{m} {uri} {body:?}: {v}");
    }

    let (_, v) = call(&st, "POST", "/runs", Some(json!({"now": 40}))).await;
    let id = v["run_id"].as_str().unwrap().to_string();
    wait_done(&st, &id).await;
    let (s, _) = call(&st, "GET", &format!("/runs/{id}/speedfield?scenario=Nope"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
