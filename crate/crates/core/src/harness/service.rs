//! HTTP deployment of the backend, predictor and scheduler roles.
//!
//! Backend: `GET /status`, `GET /config`, `POST /generate`, `GET /completed`.
//! Predictor: `POST /predict`.
//! Scheduler: `POST /dispatch` (live, forwards to a backend) and
//! `POST /decide` (snapshots supplied in the body, nothing forwarded).
//!
//! Errors are `{"code": ..., "message": ...}` with codes `bad-schema`,
//! `instance-unknown` and `predictor-timeout`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::task::{JoinHandle, JoinSet};

use crate::backend::{Instance, Sequence, StepReport};
use crate::predictor::{
    predict, CacheMode, Candidate, LatencyCache, PredictError, PredictService, PredictionRequest,
    PredictionResult, Predictor,
};
use crate::scheduler::{Dispatcher, DispatcherConfig};
use crate::types::{InstanceConfig, InstanceId, InstanceSnapshot, RequestId, Seconds};

use super::config::ExperimentConfig;
use super::HarnessError;

/// Wall-clock tick of a backend's paced simulation.
pub const PACING_QUANTUM: Duration = Duration::from_millis(10);

pub const CODE_BAD_SCHEMA: &str = "bad-schema";
pub const CODE_INSTANCE_UNKNOWN: &str = "instance-unknown";
pub const CODE_PREDICTOR_TIMEOUT: &str = "predictor-timeout";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }

    fn bad_schema(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, CODE_BAD_SCHEMA, message)
    }

    fn unknown(id: InstanceId) -> Self {
        Self::new(StatusCode::NOT_FOUND, CODE_INSTANCE_UNKNOWN, format!("instance {id} is not known"))
    }

    fn timeout() -> Self {
        Self::new(StatusCode::GATEWAY_TIMEOUT, CODE_PREDICTOR_TIMEOUT, "predictor did not answer in time")
    }

    fn upstream(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_GATEWAY, "upstream", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_schema(e.to_string()))
}

/// Simulated time derived from wall time: `(now - epoch) * scale`.
#[derive(Debug, Clone, Copy)]
pub struct PacedClock {
    epoch: SystemTime,
    scale: f64,
}

impl PacedClock {
    pub fn new(epoch: SystemTime, scale: f64) -> Self {
        Self { epoch, scale }
    }

    pub fn starting_now(scale: f64) -> Self {
        Self::new(SystemTime::now(), scale)
    }

    pub fn from_unix_ms(ms: u64, scale: f64) -> Self {
        Self::new(UNIX_EPOCH + Duration::from_millis(ms), scale)
    }

    pub fn now(&self) -> Seconds {
        SystemTime::now()
            .duration_since(self.epoch)
            .map(|d| d.as_secs_f64() * self.scale)
            .unwrap_or(0.0)
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub id: RequestId,
    pub prompt_tokens: u64,
    pub output_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_output_tokens: Option<u64>,
}

impl GenerateRequest {
    pub fn candidate(&self) -> Candidate {
        Candidate {
            prompt_tokens: self.prompt_tokens,
            estimated_output_tokens: self.estimated_output_tokens.unwrap_or(self.output_tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub instance_id: InstanceId,
    pub admitted_at: Seconds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletedRequest {
    pub id: RequestId,
    pub admitted_at: Seconds,
    pub first_token_at: Option<Seconds>,
    pub finished_at: Option<Seconds>,
    pub preemptions: u32,
}

struct BackendInner {
    instance: Instance,
    records: BTreeMap<RequestId, CompletedRequest>,
}

impl BackendInner {
    fn apply(&mut self, reports: Vec<StepReport>) {
        for r in reports {
            let out = r.outcome;
            for id in out.preemptions {
                if let Some(rec) = self.records.get_mut(&id) {
                    rec.preemptions += 1;
                }
            }
            for id in out.first_tokens {
                if let Some(rec) = self.records.get_mut(&id) {
                    rec.first_token_at.get_or_insert(r.end);
                }
            }
            for s in out.finished {
                if let Some(rec) = self.records.get_mut(&s.id) {
                    rec.finished_at = Some(r.end);
                }
            }
        }
    }

    fn advance(&mut self, now: Seconds) {
        match self.instance.advance_to(now) {
            Ok(reports) => self.apply(reports),
            Err(e) => log::error!("instance {}: {e}", self.instance.id()),
        }
    }
}

/// One simulated instance paced against wall time.
pub struct BackendService {
    inner: Mutex<BackendInner>,
    clock: PacedClock,
}

impl BackendService {
    pub fn new(config: InstanceConfig, clock: PacedClock) -> Result<Self, HarnessError> {
        let instance = Instance::new(config).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(Self {
            inner: Mutex::new(BackendInner {
                instance,
                records: BTreeMap::new(),
            }),
            clock,
        })
    }

    pub fn tick(&self) {
        let now = self.clock.now();
        self.inner.lock().advance(now);
    }

    pub fn status(&self) -> InstanceSnapshot {
        let now = self.clock.now();
        let mut g = self.inner.lock();
        g.advance(now);
        g.instance.snapshot(now)
    }

    pub fn config(&self) -> InstanceConfig {
        self.inner.lock().instance.config().clone()
    }

    pub fn generate(&self, req: &GenerateRequest) -> Result<GenerateResponse, ApiError> {
        let now = self.clock.now();
        let mut g = self.inner.lock();
        g.advance(now);
        if g.records.contains_key(&req.id) {
            return Err(ApiError::bad_schema(format!("request {} already submitted", req.id)));
        }
        if req.prompt_tokens == 0 || req.output_tokens == 0 {
            return Err(ApiError::bad_schema("token counts must be at least 1"));
        }
        let est = req.estimated_output_tokens.unwrap_or(req.output_tokens).max(1);
        let seq = Sequence::new(req.id, req.prompt_tokens, req.output_tokens, est);
        g.instance
            .admit(seq, now)
            .map_err(|e| ApiError::bad_schema(e.to_string()))?;
        g.records.insert(
            req.id,
            CompletedRequest {
                id: req.id,
                admitted_at: now,
                first_token_at: None,
                finished_at: None,
                preemptions: 0,
            },
        );
        g.advance(now);
        Ok(GenerateResponse {
            instance_id: g.instance.id(),
            admitted_at: now,
        })
    }

    pub fn completed(&self) -> Vec<CompletedRequest> {
        self.tick();
        self.inner.lock().records.values().cloned().collect()
    }
}

pub fn backend_router(svc: Arc<BackendService>) -> Router {
    Router::new()
        .route("/status", get(|State(s): State<Arc<BackendService>>| async move { Json(s.status()) }))
        .route("/config", get(|State(s): State<Arc<BackendService>>| async move { Json(s.config()) }))
        .route(
            "/generate",
            post(|State(s): State<Arc<BackendService>>, body: Bytes| async move {
                let req: GenerateRequest = parse(&body)?;
                s.generate(&req).map(Json)
            }),
        )
        .route("/completed", get(|State(s): State<Arc<BackendService>>| async move { Json(s.completed()) }))
        .with_state(svc)
}

/// Stateless apart from the memo cache, which never changes answers in
/// exact mode.
pub fn predictor_router(cache: Arc<LatencyCache>) -> Router {
    Router::new()
        .route(
            "/predict",
            post(|State(cache): State<Arc<LatencyCache>>, body: Bytes| async move {
                let req: PredictionRequest = parse(&body)?;
                match predict(&req, &cache) {
                    Ok(r) => Ok(Json(r)),
                    Err(PredictError::InstanceMismatch { snapshot, .. }) => Err(ApiError::unknown(snapshot)),
                    Err(e) => Err(ApiError::bad_schema(e.to_string())),
                }
            }),
        )
        .with_state(cache)
}

/// Async client for a predictor service.
#[derive(Debug, Clone)]
pub struct RemotePredictor {
    base: String,
    client: reqwest::Client,
    timeout: Duration,
}

impl RemotePredictor {
    pub fn new(base: impl Into<String>, timeout: Duration) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            client: reqwest::Client::new(),
            timeout,
        }
    }

    pub async fn predict(&self, req: &PredictionRequest) -> Result<PredictionResult, PredictError> {
        let resp = self
            .client
            .post(format!("{}/predict", self.base))
            .timeout(self.timeout)
            .json(req)
            .send()
            .await
            .map_err(|e| if e.is_timeout() { PredictError::Timeout } else { PredictError::Unavailable(e.to_string()) })?;
        if !resp.status().is_success() {
            let body: ErrorBody = resp
                .json()
                .await
                .map_err(|e| PredictError::Unavailable(e.to_string()))?;
            return Err(match body.code.as_str() {
                CODE_INSTANCE_UNKNOWN => PredictError::UnknownInstance(req.snapshot.instance_id),
                _ => PredictError::Unavailable(body.message),
            });
        }
        resp.json()
            .await
            .map_err(|e| if e.is_timeout() { PredictError::Timeout } else { PredictError::Unavailable(e.to_string()) })
    }

    /// One concurrent call per snapshot.
    pub async fn predict_across(
        &self,
        snapshots: &[InstanceSnapshot],
        configs: &BTreeMap<InstanceId, InstanceConfig>,
        candidate: Candidate,
    ) -> Result<BTreeMap<InstanceId, PredictionResult>, PredictError> {
        if snapshots.is_empty() {
            return Err(PredictError::NoSnapshots);
        }
        let mut set = JoinSet::new();
        for snap in snapshots {
            let config = configs
                .get(&snap.instance_id)
                .ok_or(PredictError::UnknownInstance(snap.instance_id))?
                .clone();
            let req = PredictionRequest {
                snapshot: snap.clone(),
                candidate,
                instance_config: config,
            };
            let me = self.clone();
            set.spawn(async move { me.predict(&req).await.map(|r| (req.snapshot.instance_id, r)) });
        }
        let mut out = BTreeMap::new();
        while let Some(joined) = set.join_next().await {
            let (id, r) = joined.map_err(|e| PredictError::Unavailable(e.to_string()))??;
            out.insert(id, r);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum PredictorHandle {
    Local(Predictor),
    Remote(RemotePredictor),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecideRequest {
    pub snapshots: Vec<InstanceSnapshot>,
    pub candidate: Candidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionBody {
    pub instance_id: InstanceId,
    pub fell_back: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictions: Option<BTreeMap<InstanceId, PredictionResult>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchResponse {
    pub instance_id: InstanceId,
    pub fell_back: bool,
    pub admitted_at: Seconds,
    /// Wall seconds spent inside the scheduler for this call.
    pub service_overhead_s: f64,
}

pub struct SchedulerService {
    dispatcher: Mutex<Dispatcher>,
    configs: BTreeMap<InstanceId, InstanceConfig>,
    backends: BTreeMap<InstanceId, String>,
    predictor: PredictorHandle,
    client: reqwest::Client,
    fallback_on_timeout: bool,
}

impl SchedulerService {
    pub fn new(
        dispatcher: DispatcherConfig,
        configs: BTreeMap<InstanceId, InstanceConfig>,
        backends: BTreeMap<InstanceId, String>,
        predictor: PredictorHandle,
        fallback_on_timeout: bool,
    ) -> Self {
        Self {
            dispatcher: Mutex::new(Dispatcher::new(dispatcher)),
            configs,
            backends: backends
                .into_iter()
                .map(|(k, v)| (k, v.trim_end_matches('/').to_string()))
                .collect(),
            predictor,
            client: reqwest::Client::new(),
            fallback_on_timeout,
        }
    }

    pub async fn decide(&self, req: &DecideRequest) -> Result<DecisionBody, ApiError> {
        if let Some(s) = req.snapshots.iter().find(|s| !self.configs.contains_key(&s.instance_id)) {
            return Err(ApiError::unknown(s.instance_id));
        }
        let needs = self.dispatcher.lock().policy().needs_predictions();
        let predictions = if needs {
            let p = match &self.predictor {
                PredictorHandle::Local(p) => p.predict_across(&req.snapshots, req.candidate),
                PredictorHandle::Remote(r) => r.predict_across(&req.snapshots, &self.configs, req.candidate).await,
            };
            if matches!(p, Err(PredictError::Timeout)) && !self.fallback_on_timeout {
                return Err(ApiError::timeout());
            }
            Some(p)
        } else {
            None
        };
        let d = self
            .dispatcher
            .lock()
            .select(&req.snapshots, predictions)
            .map_err(|e| ApiError::bad_schema(e.to_string()))?;
        Ok(DecisionBody {
            instance_id: d.instance_id,
            fell_back: d.fell_back,
            predictions: d.predictions,
        })
    }

    async fn fetch_status(&self) -> Result<Vec<InstanceSnapshot>, ApiError> {
        let mut set = JoinSet::new();
        for (&id, url) in &self.backends {
            let client = self.client.clone();
            let url = format!("{url}/status");
            set.spawn(async move {
                let r = client.get(url).send().await.and_then(|r| r.error_for_status());
                match r {
                    Ok(r) => r.json::<InstanceSnapshot>().await.map_err(|e| (id, e.to_string())),
                    Err(e) => Err((id, e.to_string())),
                }
            });
        }
        let mut out = Vec::new();
        while let Some(j) = set.join_next().await {
            let snap = j
                .map_err(|e| ApiError::upstream(e.to_string()))?
                .map_err(|(id, e)| ApiError::upstream(format!("backend {id}: {e}")))?;
            out.push(snap);
        }
        out.sort_by_key(|s| s.instance_id);
        Ok(out)
    }

    pub async fn dispatch(&self, req: &GenerateRequest) -> Result<DispatchResponse, ApiError> {
        let started = Instant::now();
        let snapshots = self.fetch_status().await?;
        let decision = self
            .decide(&DecideRequest {
                snapshots,
                candidate: req.candidate(),
            })
            .await?;
        let url = self
            .backends
            .get(&decision.instance_id)
            .ok_or_else(|| ApiError::unknown(decision.instance_id))?;
        let overhead = started.elapsed().as_secs_f64();
        let resp = self
            .client
            .post(format!("{url}/generate"))
            .json(req)
            .send()
            .await
            .map_err(|e| ApiError::upstream(e.to_string()))?;
        if !resp.status().is_success() {
            let body: ErrorBody = resp.json().await.map_err(|e| ApiError::upstream(e.to_string()))?;
            return Err(ApiError::new(StatusCode::BAD_GATEWAY, &body.code, body.message));
        }
        let admitted: GenerateResponse = resp.json().await.map_err(|e| ApiError::upstream(e.to_string()))?;
        Ok(DispatchResponse {
            instance_id: decision.instance_id,
            fell_back: decision.fell_back,
            admitted_at: admitted.admitted_at,
            service_overhead_s: overhead,
        })
    }
}

pub fn scheduler_router(svc: Arc<SchedulerService>) -> Router {
    Router::new()
        .route(
            "/decide",
            post(|State(s): State<Arc<SchedulerService>>, body: Bytes| async move {
                let req: DecideRequest = parse(&body)?;
                s.decide(&req).await.map(Json)
            }),
        )
        .route(
            "/dispatch",
            post(|State(s): State<Arc<SchedulerService>>, body: Bytes| async move {
                let req: GenerateRequest = parse(&body)?;
                s.dispatch(&req).await.map(Json)
            }),
        )
        .with_state(svc)
}

/// Binds `addr` and serves `router` in the background.
pub async fn spawn(router: Router, addr: &str) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            log::error!("server on {local} stopped: {e}");
        }
    });
    Ok((local, handle))
}

/// Serves a backend and keeps its paced clock ticking.
pub async fn spawn_backend(
    config: InstanceConfig,
    clock: PacedClock,
    addr: &str,
) -> Result<(SocketAddr, JoinHandle<()>), HarnessError> {
    let svc = Arc::new(BackendService::new(config, clock)?);
    let ticker = svc.clone();
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(PACING_QUANTUM);
        loop {
            interval.tick().await;
            ticker.tick();
        }
    });
    Ok(spawn(backend_router(svc), addr).await?)
}

pub async fn spawn_predictor(mode: CacheMode, addr: &str) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    spawn(predictor_router(Arc::new(LatencyCache::new(mode))), addr).await
}

pub async fn spawn_scheduler(svc: SchedulerService, addr: &str) -> std::io::Result<(SocketAddr, JoinHandle<()>)> {
    spawn(scheduler_router(Arc::new(svc)), addr).await
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Backend,
    Predictor,
    Scheduler,
}

impl std::str::FromStr for Role {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "backend" => Ok(Role::Backend),
            "predictor" => Ok(Role::Predictor),
            "scheduler" => Ok(Role::Scheduler),
            other => Err(HarnessError::Config(format!("unknown service role {other:?}"))),
        }
    }
}

/// Builds the scheduler role from a config's `[service]` section.
pub fn scheduler_from_config(cfg: &ExperimentConfig) -> Result<SchedulerService, HarnessError> {
    let template = cfg.cluster.template();
    let svc = &cfg.service;
    if svc.backends.is_empty() {
        return Err(HarnessError::Config("service.backends is empty".into()));
    }
    let configs: BTreeMap<_, _> = svc
        .backends
        .iter()
        .map(|b| (InstanceId(b.id), template.with_id(InstanceId(b.id))))
        .collect();
    let backends = svc.backends.iter().map(|b| (InstanceId(b.id), b.url.clone())).collect();
    let predictor = match &svc.predictor {
        Some(url) => PredictorHandle::Remote(RemotePredictor::new(
            url.clone(),
            Duration::from_millis(svc.predict_timeout_ms),
        )),
        None => PredictorHandle::Local(Predictor::new(configs.values().cloned(), cfg.scheduler.cache)),
    };
    let params = cfg.sim_params()?;
    Ok(SchedulerService::new(params.dispatcher, configs, backends, predictor, svc.fallback_on_timeout))
}

/// Runs one role until the process is stopped.
pub fn serve(role: Role, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    cfg.validate()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let svc = &cfg.service;
        let (addr, handle) = match role {
            Role::Backend => {
                let clock = match svc.epoch_unix_ms {
                    Some(ms) => PacedClock::from_unix_ms(ms, svc.time_scale),
                    None => PacedClock::starting_now(svc.time_scale),
                };
                let config = cfg.cluster.template().with_id(InstanceId(svc.instance_id));
                spawn_backend(config, clock, &svc.bind).await?
            }
            Role::Predictor => spawn_predictor(cfg.scheduler.cache, &svc.bind).await?,
            Role::Scheduler => spawn_scheduler(scheduler_from_config(cfg)?, &svc.bind).await?,
        };
        log::info!("{role:?} listening on {addr}");
        handle.await.map_err(|e| HarnessError::Service(e.to_string()))
    })
}
