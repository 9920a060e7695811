//! HTTP/JSON service: amortized inference and what-if replay against one
//! loaded posterior model.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use t1d_core::evaluation::{replay_scenario, ReplaySetting};
use t1d_core::hash::sha256_hex;
use t1d_core::npe::{infer, InferOptions, PosteriorModel, PosteriorSamples};
use t1d_core::stats;
use t1d_core::{Error, MealPerturbation, Result, Scenario, TwinParams};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use crate::args::ServeArgs;

/// Accepted CGM range for submitted traces (mg/dL).
pub const CGM_INPUT_RANGE: (f64, f64) = (20.0, 500.0);
pub const DEFAULT_SAMPLES: usize = 1000;
pub const MAX_SAMPLES: usize = 20_000;

struct Entry {
    created: Instant,
    samples: Arc<PosteriorSamples>,
}

/// Posterior samples keyed by id, readable until the TTL elapses.
pub struct SessionStore {
    ttl: Duration,
    entries: Mutex<HashMap<String, Entry>>,
    counter: AtomicU64,
}

impl SessionStore {
    pub fn new(ttl: Duration) -> Self {
        SessionStore {
            ttl,
            entries: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }
    }

    pub fn ttl(&self) -> Duration {
        self.ttl
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HashMap<String, Entry>> {
        self.entries.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn insert(&self, samples: PosteriorSamples) -> String {
        self.insert_at(samples, Instant::now())
    }

    pub fn insert_at(&self, samples: PosteriorSamples, now: Instant) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed);
        let nanos = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_nanos());
        let id = sha256_hex(format!("{n}:{nanos}:{}:{}", samples.observation_id, samples.seed).as_bytes())[..24].to_string();
        let mut map = self.lock();
        map.retain(|_, e| now.duration_since(e.created) < self.ttl);
        map.insert(
            id.clone(),
            Entry {
                created: now,
                samples: Arc::new(samples),
            },
        );
        id
    }

    pub fn get(&self, id: &str) -> Option<Arc<PosteriorSamples>> {
        self.get_at(id, Instant::now())
    }

    /// The entry if it is still live at `now`; expired entries are removed.
    pub fn get_at(&self, id: &str, now: Instant) -> Option<Arc<PosteriorSamples>> {
        let mut map = self.lock();
        let live = map
            .get(id)
            .map(|e| now.saturating_duration_since(e.created) < self.ttl)?;
        if live {
            map.get(id).map(|e| e.samples.clone())
        } else {
            map.remove(id);
            None
        }
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct AppState {
    model: RwLock<Option<Arc<PosteriorModel>>>,
    pub store: SessionStore,
}

impl AppState {
    /// A state with no model; every endpoint answers 503 until one is set.
    pub fn new(ttl: Duration) -> Self {
        AppState {
            model: RwLock::new(None),
            store: SessionStore::new(ttl),
        }
    }

    pub fn with_model(model: PosteriorModel, ttl: Duration) -> Self {
        let s = AppState::new(ttl);
        s.set_model(model);
        s
    }

    pub fn set_model(&self, model: PosteriorModel) {
        *self.model.write().unwrap_or_else(|p| p.into_inner()) = Some(Arc::new(model));
    }

    pub fn model(&self) -> Option<Arc<PosteriorModel>> {
        self.model.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn ready_model(&self) -> std::result::Result<Arc<PosteriorModel>, ApiError> {
        self.model()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model is not loaded yet"))
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = if e.is_validation() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

async fn health(State(st): State<Arc<AppState>>) -> Response {
    match st.model() {
        Some(m) => (
            StatusCode::OK,
            Json(json!({
                "status": "ok",
                "model_id": m.id(),
                "obs_len": m.obs_len(),
                "scenario_hash": m.provenance.scenario_hash,
                "ttl_s": st.store.ttl().as_secs_f64(),
            })),
        )
            .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading", "model_id": null })),
        )
            .into_response(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferRequest {
    pub cgm: Vec<f64>,
    #[serde(default)]
    pub samples: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub median: f64,
    #[serde(rename = "q2.5")]
    pub q2_5: f64,
    #[serde(rename = "q97.5")]
    pub q97_5: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferResponse {
    pub posterior_id: String,
    pub model_id: String,
    pub observation_id: String,
    pub seed: u64,
    pub samples: usize,
    pub leakage: f64,
    pub elapsed_s: f64,
    pub summary: Vec<ParamSummary>,
}

pub fn summarize(samples: &PosteriorSamples) -> Vec<ParamSummary> {
    samples
        .names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let col = stats::sorted(&samples.column(j));
            ParamSummary {
                name: name.clone(),
                median: stats::percentile_sorted(&col, 50.0),
                q2_5: stats::percentile_sorted(&col, 2.5),
                q97_5: stats::percentile_sorted(&col, 97.5),
            }
        })
        .collect()
}

async fn infer_handler(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<InferResponse> {
    let model = st.ready_model()?;
    let req: InferRequest = parse_body(&body)?;
    let expected = model.obs_len();
    if req.cgm.len() != expected {
        return Err(ApiError::bad_request(format!(
            "cgm must contain exactly {expected} readings, got {}",
            req.cgm.len()
        )));
    }
    let (lo, hi) = CGM_INPUT_RANGE;
    if let Some((i, v)) = req.cgm.iter().enumerate().find(|(_, v)| !(lo..=hi).contains(*v)) {
        return Err(ApiError::bad_request(format!(
            "cgm[{i}] = {v} is outside [{lo}, {hi}] mg/dL"
        )));
    }
    let n = req.samples.unwrap_or(DEFAULT_SAMPLES);
    if n == 0 || n > MAX_SAMPLES {
        return Err(ApiError::bad_request(format!("samples must be in [1, {MAX_SAMPLES}]")));
    }
    let seed = req.seed.unwrap_or(0);
    let m = model.clone();
    let samples = blocking(move || {
        let opts = InferOptions {
            obs_margin: 100.0,
            expected_scenario_hash: None,
        };
        infer(&m, &req.cgm, n, seed, &opts)
    })
    .await?;
    let summary = summarize(&samples);
    let resp = InferResponse {
        model_id: samples.model_id.clone(),
        observation_id: samples.observation_id.clone(),
        seed,
        samples: samples.len(),
        leakage: samples.leakage,
        elapsed_s: samples.elapsed_s,
        summary,
        posterior_id: String::new(),
    };
    let posterior_id = st.store.insert(samples);
    Ok(Json(InferResponse { posterior_id, ..resp }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateRequest {
    #[serde(default)]
    pub posterior_id: Option<String>,
    /// Explicit 17-vector in the posterior column order.
    #[serde(default)]
    pub params: Option<Vec<f64>>,
    /// Defaults to the scenario the model was trained on.
    #[serde(default)]
    pub scenario: Option<Scenario>,
    #[serde(default)]
    pub setting: Option<ReplaySetting>,
    /// Meal alteration used by the `altered_meals` setting.
    #[serde(default)]
    pub perturbation: Option<MealPerturbation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateResponse {
    pub setting: ReplaySetting,
    pub t: Vec<f64>,
    pub median: Vec<f64>,
    pub q05: Vec<f64>,
    pub q95: Vec<f64>,
    pub simulated: usize,
    pub dropped: usize,
}

fn explicit_params(v: &[f64]) -> std::result::Result<TwinParams, ApiError> {
    if v.len() != TwinParams::DIM {
        return Err(ApiError::bad_request(format!(
            "params must contain exactly {} values, got {}",
            TwinParams::DIM,
            v.len()
        )));
    }
    let p = TwinParams::from_slice(v);
    p.theta.validate()?;
    p.x0.validate()?;
    Ok(p)
}

async fn simulate_handler(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<SimulateResponse> {
    let model = st.ready_model()?;
    let req: SimulateRequest = parse_body(&body)?;
    let rows = match (&req.posterior_id, &req.params) {
        (Some(id), None) => st
            .store
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("posterior `{id}` is unknown or expired")))?
            .params(),
        (None, Some(v)) => vec![explicit_params(v)?],
        _ => return Err(ApiError::bad_request("give exactly one of posterior_id and params")),
    };
    let base = req.scenario.clone().unwrap_or_else(|| model.provenance.scenario.clone());
    base.validate()?;
    let setting = req.setting.unwrap_or(ReplaySetting::InSample);
    let scenario = setting.scenario(&base, &req.perturbation.unwrap_or_default())?;
    let prov = model.provenance.clone();
    let band = blocking(move || replay_scenario(&rows, &scenario, &prov.constants, &prov.sensor)).await?;
    Ok(Json(SimulateResponse {
        setting,
        t: band.t_min,
        median: band.median,
        q05: band.q05,
        q95: band.q95,
        simulated: band.simulated,
        dropped: band.dropped,
    }))
}

/// CORS for one browser origin, or any origin when `origin` is `None`.
pub fn cors_layer(origin: Option<&str>) -> Result<CorsLayer> {
    let allow = match origin {
        Some(o) => AllowOrigin::exact(
            HeaderValue::from_str(o).map_err(|e| Error::validation(format!("bad CORS origin `{o}`: {e}")))?,
        ),
        None => AllowOrigin::from(Any),
    };
    Ok(CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any))
}

pub fn router(state: Arc<AppState>, cors: CorsLayer) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/infer", post(infer_handler))
        .route("/simulate", post(simulate_handler))
        .layer(cors)
        .with_state(state)
}

/// Binds, then loads the model in the background; requests before the model
/// is ready get 503.
pub fn serve_blocking(a: ServeArgs, threads: Option<usize>) -> Result<()> {
    if !(a.ttl_min > 0.0 && a.ttl_min.is_finite()) {
        return Err(Error::validation("--ttl-min must be positive"));
    }
    let cors = cors_layer(a.cors_origin.as_deref())?;
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::validation(format!("bad listen address: {e}")))?;
    let mut builder = tokio::runtime::Builder::new_multi_thread();
    if let Some(n) = threads {
        builder.worker_threads(n).max_blocking_threads(n);
    }
    let rt = builder.enable_all().build().map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async move {
        let state = Arc::new(AppState::new(Duration::from_secs_f64(a.ttl_min * 60.0)));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("listening on http://{addr}");
        let loader = state.clone();
        let path = a.model.clone();
        let load = tokio::task::spawn_blocking(move || -> Result<()> {
            let model = PosteriorModel::load(&path)?;
            log::info!("model {} loaded from {}", model.id(), path.display());
            loader.set_model(model);
            Ok(())
        });
        let server = axum::serve(listener, router(state, cors));
        tokio::select! {
            r = server => r.map_err(|e| Error::io(addr.to_string(), e)),
            r = load => match r {
                Ok(Ok(())) => {
                    // Model loaded; keep serving until shutdown.
                    std::future::pending::<Result<()>>().await
                }
                Ok(Err(e)) => Err(e),
                Err(e) => Err(Error::State(format!("model loader failed: {e}"))),
            },
        }
    })
}
