use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use t1d_cli::service::{cors_layer, router, AppState, SessionStore};
use t1d_core::datagen::GenerateOptions;
use t1d_core::flow::{FlowArch, TrainConfig};
use t1d_core::npe::{infer, train_npe, InferOptions, PosteriorModel};
use t1d_core::{generate_dataset, MealEvent, PopulationConstants, PriorSpec, Scenario, SensorModel, TwinParams};
use tower::ServiceExt;

const TTL: Duration = Duration::from_secs(1800);

fn model() -> &'static PosteriorModel {
    static M: OnceLock<PosteriorModel> = OnceLock::new();
    M.get_or_init(|| {
        let c = PopulationConstants::default();
        let ds = generate_dataset(
            300,
            &PriorSpec::default(),
            &c,
            &Scenario::canonical(c.basal_rate),
            &SensorModel::default(),
            3,
            &GenerateOptions::default(),
        )
        .unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        train_npe(&ds, FlowArch::standard(17, 264), &cfg, 1).unwrap()
    })
}

fn app() -> Router {
    router(Arc::new(AppState::with_model(model().clone(), TTL)), cors_layer(None).unwrap())
}

fn observation() -> Vec<f64> {
    let c = PopulationConstants::default();
    let sim = t1d_core::Simulator::new(c, Scenario::canonical(c.basal_rate), SensorModel::ideal()).unwrap();
    sim.noiseless_cgm(&TwinParams::at_steady_state(PriorSpec::default().location(), &c), false)
        .unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[tokio::test]
async fn health_reports_readiness() {
    let empty = router(Arc::new(AppState::new(TTL)), cors_layer(None).unwrap());
    let (status, _) = call(&empty, "GET", "/health", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&empty, "POST", "/infer", Some(json!({"cgm": observation()}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);

    let (status, body) = call(&app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model_id"].as_str().unwrap(), model().id());
    assert!(!model().id().is_empty());
}

#[tokio::test]
async fn infer_returns_a_seeded_summary() {
    let app = app();
    let req = json!({"cgm": observation(), "samples": 200, "seed": 5});
    let (status, a) = call(&app, "POST", "/infer", Some(req.clone())).await;
    assert_eq!(status, StatusCode::OK, "{a}");
    let summary = a["summary"].as_array().unwrap();
    assert_eq!(summary.len(), 17);
    assert_eq!(summary[0]["name"], "Gb");
    for row in summary {
        let (lo, med, hi) = (row["q2.5"].as_f64().unwrap(), row["median"].as_f64().unwrap(), row["q97.5"].as_f64().unwrap());
        assert!(lo <= med && med <= hi);
    }
    let (_, b) = call(&app, "POST", "/infer", Some(req)).await;
    assert_eq!(a["summary"], b["summary"]);
    assert_ne!(a["posterior_id"], b["posterior_id"]);

    let direct = infer(model(), &observation(), 200, 5, &InferOptions::default()).unwrap();
    assert_eq!(summary[0]["median"].as_f64().unwrap(), direct.median()[0]);
}

#[tokio::test]
async fn infer_defaults_to_1000_samples() {
    let (status, body) = call(&app(), "POST", "/infer", Some(json!({"cgm": observation()}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["samples"], 1000);
    assert_eq!(body["seed"], 0);
}

#[tokio::test]
async fn infer_rejects_bad_bodies() {
    let app = app();
    let mut short = observation();
    short.pop();
    let (status, body) = call(&app, "POST", "/infer", Some(json!({ "cgm": short }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let msg = body["error"].as_str().unwrap();
    assert!(msg.contains("264") && msg.contains("263"), "{msg}");

    let mut low = observation();
    low[10] = 19.0;
    let (status, body) = call(&app, "POST", "/infer", Some(json!({ "cgm": low }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("cgm[10]"));

    let mut high = observation();
    high[0] = 500.0;
    let (status, _) = call(&app, "POST", "/infer", Some(json!({ "cgm": high, "samples": 10 }))).await;
    assert_eq!(status, StatusCode::OK);

    for bad in [json!({"cgm": "x"}), json!({}), json!({"cgm": observation(), "samples": 0})] {
        let (status, _) = call(&app, "POST", "/infer", Some(bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
    }
    let req = Request::post("/infer").body(Body::from("{oops")).unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn simulate_from_posterior_id_across_settings() {
    let app = app();
    let (_, inf) = call(&app, "POST", "/infer", Some(json!({"cgm": observation(), "samples": 100, "seed": 1}))).await;
    let id = inf["posterior_id"].as_str().unwrap();
    for (setting, len) in [("in_sample", 265), ("next_day", 553), ("altered_meals", 265)] {
        let (status, body) = call(&app, "POST", "/simulate", Some(json!({"posterior_id": id, "setting": setting}))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        for key in ["t", "median", "q05", "q95"] {
            assert_eq!(body[key].as_array().unwrap().len(), len, "{setting} {key}");
        }
        let (m, lo, hi) = (floats(&body["median"]), floats(&body["q05"]), floats(&body["q95"]));
        assert!((0..len).all(|k| lo[k] <= m[k] && m[k] <= hi[k]));
        assert_eq!(body["simulated"].as_u64().unwrap() + body["dropped"].as_u64().unwrap(), 100);
    }
}

#[tokio::test]
async fn explicit_params_on_empty_scenario_are_flat() {
    let c = PopulationConstants::default();
    let p = TwinParams::at_steady_state(PriorSpec::default().location(), &c);
    let body = json!({"params": p.to_array().to_vec(), "scenario": Scenario::empty(1320.0, c.basal_rate)});
    let (status, out) = call(&app(), "POST", "/simulate", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert!(floats(&out["median"]).iter().all(|v| (v - p.theta.gb).abs() < 1e-9));
    assert_eq!(out["q05"], out["q95"]);
}

#[tokio::test]
async fn doubling_dinner_raises_the_post_dinner_median() {
    let c = PopulationConstants::default();
    let p = TwinParams::at_steady_state(PriorSpec::default().location(), &c).to_array().to_vec();
    let base = Scenario::canonical(c.basal_rate);
    let mut doubled = base.clone();
    doubled.meals[2] = MealEvent {
        grams: 2.0 * base.meals[2].grams,
        ..base.meals[2]
    };
    let app = app();
    let (_, a) = call(&app, "POST", "/simulate", Some(json!({"params": p, "scenario": base}))).await;
    let (_, b) = call(&app, "POST", "/simulate", Some(json!({"params": p, "scenario": doubled}))).await;
    let (t, ma, mb) = (floats(&a["t"]), floats(&a["median"]), floats(&b["median"]));
    let peak = (0..t.len())
        .filter(|&k| t[k] >= 1140.0)
        .max_by(|&i, &j| ma[i].total_cmp(&ma[j]))
        .unwrap();
    assert!(mb[peak] > ma[peak]);
    assert!((0..t.len()).filter(|&k| t[k] <= 1140.0).all(|k| ma[k] == mb[k]));
}

#[tokio::test]
async fn simulate_rejects_bad_requests() {
    let app = app();
    let p = vec![1.0; 16];
    let (status, body) = call(&app, "POST", "/simulate", Some(json!({ "params": p }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("17"));
    let (status, _) = call(&app, "POST", "/simulate", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/simulate", Some(json!({"posterior_id": "nope"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let c = PopulationConstants::default();
    let p = TwinParams::at_steady_state(PriorSpec::default().location(), &c).to_array().to_vec();
    let mut bad = Scenario::canonical(c.basal_rate);
    bad.meals[0].grams = -5.0;
    let (status, _) = call(&app, "POST", "/simulate", Some(json!({"params": p, "scenario": bad}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/simulate", Some(json!({"params": p, "scenario": {"horizon_min": "x"}}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn expired_posteriors_are_not_served() {
    let state = Arc::new(AppState::with_model(model().clone(), Duration::ZERO));
    let app = router(state.clone(), cors_layer(None).unwrap());
    let (status, inf) = call(&app, "POST", "/infer", Some(json!({"cgm": observation(), "samples": 10}))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = call(&app, "POST", "/simulate", Some(json!({"posterior_id": inf["posterior_id"]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn session_store_expires_entries() {
    let store = SessionStore::new(Duration::from_secs(60));
    let samples = infer(model(), &observation(), 5, 1, &InferOptions::default()).unwrap();
    let t0 = Instant::now();
    let id = store.insert_at(samples.clone(), t0);
    let other = store.insert_at(samples, t0);
    assert_ne!(id, other);
    assert!(store.get_at(&id, t0 + Duration::from_secs(59)).is_some());
    assert!(store.get_at(&id, t0 + Duration::from_secs(60)).is_none());
    assert!(store.get_at(&id, t0).is_none());
    assert_eq!(store.len(), 1);
}

#[tokio::test]
async fn concurrent_requests_match_serial_results() {
    let app = app();
    let req = |seed: u64| json!({"cgm": observation(), "samples": 100, "seed": seed});
    let mut serial = Vec::new();
    for seed in 0..4 {
        serial.push(call(&app, "POST", "/infer", Some(req(seed))).await.1["summary"].clone());
    }
    let handles: Vec<_> = (0..4)
        .map(|seed| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, "POST", "/infer", Some(req(seed))).await.1["summary"].clone() })
        })
        .collect();
    for (seed, h) in handles.into_iter().enumerate() {
        assert_eq!(h.await.unwrap(), serial[seed]);
    }
}

#[tokio::test]
async fn cors_headers_follow_configuration() {
    let app = router(
        Arc::new(AppState::with_model(model().clone(), TTL)),
        cors_layer(Some("http://localhost:5173")).unwrap(),
    );
    let req = Request::get("/health")
        .header(header::ORIGIN, "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(),
        "http://localhost:5173"
    );
    assert!(cors_layer(Some("bad\norigin")).is_err());
}

#[tokio::test]
async fn schema_document_matches_responses() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/api.json");
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let paths: Vec<&String> = doc["paths"].as_object().unwrap().keys().collect();
    assert_eq!(paths, ["/health", "/infer", "/simulate"]);
    let keys = |v: &Value| {
        let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
        k.sort();
        k
    };
    let required = |name: &str| {
        let mut k: Vec<String> = doc["components"]["schemas"][name]["required"]
            .as_array()
            .unwrap()
            .iter()
            .map(|s| s.as_str().unwrap().to_owned())
            .collect();
        k.sort();
        k
    };
    let app = app();
    let (_, health) = call(&app, "GET", "/health", None).await;
    assert_eq!(keys(&health), required("Health"));
    let (_, inf) = call(&app, "POST", "/infer", Some(json!({"cgm": observation(), "samples": 10}))).await;
    assert_eq!(keys(&inf), required("InferResponse"));
    assert_eq!(keys(&inf["summary"][0]), required("ParamSummary"));
    let (_, sim) = call(&app, "POST", "/simulate", Some(json!({"posterior_id": inf["posterior_id"]}))).await;
    assert_eq!(keys(&sim), required("SimulateResponse"));
}
