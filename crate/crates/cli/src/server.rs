//! JSON-over-HTTP service: scans, counterfactual / induction requests and
//! run history with replay.
//!
//! Admission is bounded: at most `queue_limit` generation requests are
//! admitted at a time (running or waiting for one of `workers` slots);
//! the rest get 503.

use std::collections::hash_map::RandomState;
use std::collections::HashMap;
use std::hash::{BuildHasher, Hasher};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;
use vade_core::attribution::GenerationConfig;
use vade_core::diffusion::{Checkpoint, Model};
use vade_core::image::{decode_png, encode_png, BitDepth, Image};
use vade_core::phantom::LabeledImage;
use vade_core::run::{
    bytes_hash, run_attribution, InputRef, RunArtifacts, RunKind, RunLog, RunRecord,
};
use vade_core::tensor::{downsample2x, LowPass};
use vade_core::VadeError;

use crate::config::ServeConfig;
use crate::CliError;

const FIELDS: [&str; 7] = [
    "strength",
    "guidance",
    "steps",
    "prompt",
    "seed",
    "scan_id",
    "image_b64",
];

pub struct AppState {
    pub model: Arc<Model>,
    pub checkpoint_id: String,
    pub scans: Vec<LabeledImage>,
    scan_index: HashMap<String, usize>,
    runs: Mutex<RunLog>,
    inputs_dir: PathBuf,
    defaults: GenerationConfig,
    induce_defaults: GenerationConfig,
    queue_limit: usize,
    admitted: AtomicUsize,
    workers: Arc<Semaphore>,
    seed_counter: AtomicU64,
}

impl AppState {
    pub fn new(
        model: Model,
        checkpoint_id: String,
        scans: Vec<LabeledImage>,
        run_log: &Path,
        serve: &ServeConfig,
        defaults: GenerationConfig,
        induce_defaults: GenerationConfig,
    ) -> Result<Arc<Self>, CliError> {
        let scan_index = scans
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.clone(), i))
            .collect();
        let inputs_dir = run_log.parent().unwrap_or(Path::new(".")).join("inputs");
        Ok(Arc::new(AppState {
            model: Arc::new(model),
            checkpoint_id,
            scans,
            scan_index,
            runs: Mutex::new(RunLog::open(run_log)?),
            inputs_dir,
            defaults,
            induce_defaults,
            queue_limit: serve.queue_limit.max(1),
            admitted: AtomicUsize::new(0),
            workers: Arc::new(Semaphore::new(serve.workers.max(1))),
            seed_counter: AtomicU64::new(0),
        }))
    }

    fn fresh_seed(&self) -> u64 {
        let mut h = RandomState::new().build_hasher();
        h.write_u64(self.seed_counter.fetch_add(1, Ordering::Relaxed));
        h.finish() >> 11
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn bad(field: &str, message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.into()),
        }
    }
}

impl From<VadeError> for ApiError {
    fn from(e: VadeError) -> Self {
        let message = e.to_string();
        let status = match e {
            VadeError::InvalidParam(_)
            | VadeError::Shape(_)
            | VadeError::ImageFormat(_)
            | VadeError::TokenOutOfRange { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            VadeError::InvalidParam(m) => FIELDS
                .iter()
                .find(|f| m.starts_with(*f))
                .map(|f| f.to_string()),
            _ => None,
        };
        ApiError {
            status,
            message,
            field,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({"error": self.message, "field": self.field})),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRequest {
    pub scan_id: Option<String>,
    pub image_b64: Option<String>,
    pub prompt: Option<String>,
    pub strength: Option<f64>,
    pub guidance: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub counterfactual_png_b64: String,
    pub vamap_png_b64: String,
    pub overlay_png_b64: String,
    pub ssim: f64,
    pub localization: Option<f64>,
    pub run_id: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    pub id: String,
    pub class: String,
    pub label_text: String,
    pub thumbnail_png_b64: String,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/scans", get(list_scans))
        .route("/api/scans/{id}", get(get_scan))
        .route("/api/counterfactual", post(post_counterfactual))
        .route("/api/induce", post(post_induce))
        .route("/api/runs", get(list_runs))
        .route("/api/runs/{id}", get(get_run))
        .with_state(state)
}

async fn health(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "checkpoint_id": s.checkpoint_id}))
}

fn thumbnail(img: &Image) -> ApiResult<String> {
    let t = downsample2x(&img.to_tensor_f64(), LowPass::Mean2x2)?;
    let small = Image::from_fn(t.shape()[1], t.shape()[0], |x, y| {
        t.data()[y * t.shape()[1] + x] as f32
    });
    Ok(B64.encode(encode_png(&small, BitDepth::Eight)?))
}

async fn list_scans(State(s): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let scans = s
        .scans
        .iter()
        .map(|l| {
            Ok(ScanSummary {
                id: l.id.clone(),
                class: l.class.name().into(),
                label_text: l.label_text.clone(),
                thumbnail_png_b64: thumbnail(&l.image)?,
            })
        })
        .collect::<ApiResult<Vec<_>>>()?;
    Ok(Json(json!({ "scans": scans })))
}

fn find_scan<'a>(s: &'a AppState, id: &str) -> ApiResult<&'a LabeledImage> {
    s.scan_index
        .get(id)
        .map(|&i| &s.scans[i])
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown scan {id}")))
}

async fn get_scan(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let scan = find_scan(&s, &id)?;
    let png = encode_png(&scan.image, BitDepth::Sixteen)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

struct Admission<'a>(&'a AtomicUsize);

impl Drop for Admission<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn admit(s: &AppState) -> ApiResult<Admission<'_>> {
    let prev = s.admitted.fetch_add(1, Ordering::SeqCst);
    let guard = Admission(&s.admitted);
    if prev >= s.queue_limit {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "model busy; request queue is full",
        ));
    }
    Ok(guard)
}

/// Runs the generation on a blocking worker once a slot is free.
async fn execute(
    s: &Arc<AppState>,
    image: Image,
    mask: Option<Image>,
    cfg: GenerationConfig,
) -> ApiResult<RunArtifacts> {
    let _admission = admit(s)?;
    let _permit = s
        .workers
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service shutting down"))?;
    let model = s.model.clone();
    tokio::task::spawn_blocking(move || run_attribution(&model, &image, &cfg, mask.as_ref()))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

fn response(art: &RunArtifacts, run_id: u64, seed: u64) -> GenerationResponse {
    GenerationResponse {
        counterfactual_png_b64: B64.encode(&art.counterfactual_png),
        vamap_png_b64: B64.encode(&art.vamap_png),
        overlay_png_b64: B64.encode(&art.overlay_png),
        ssim: art.attribution.ssim,
        localization: art.attribution.localization,
        run_id,
        seed,
    }
}

fn has_lesion(mask: &Image) -> bool {
    mask.pixels().iter().any(|&v| v > 0.5)
}

async fn handle_generation(
    s: Arc<AppState>,
    kind: RunKind,
    body: Result<Json<GenerationRequest>, JsonRejection>,
) -> ApiResult<Json<GenerationResponse>> {
    let Json(req) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let defaults = if kind == RunKind::Induce {
        &s.induce_defaults
    } else {
        &s.defaults
    };
    let seed = req.seed.unwrap_or_else(|| s.fresh_seed());
    let cfg = GenerationConfig {
        prompt: req
            .prompt
            .clone()
            .unwrap_or_else(|| defaults.prompt.clone()),
        strength: req.strength.unwrap_or(defaults.strength),
        guidance: req.guidance.unwrap_or(defaults.guidance),
        steps: req.steps.unwrap_or(defaults.steps),
        seed,
        control: None,
    };
    cfg.validate(s.model.schedule.steps())?;
    let (image, mask, input) = match (&req.scan_id, &req.image_b64) {
        (Some(id), None) => {
            let scan = find_scan(&s, id)?;
            let mask = has_lesion(&scan.lesion_mask).then(|| scan.lesion_mask.clone());
            let input = InputRef {
                source: format!("scan:{id}"),
                hash: scan.image.content_hash(),
            };
            (scan.image.clone(), mask, input)
        }
        (None, Some(b64)) => {
            let bytes = B64
                .decode(b64.as_bytes())
                .map_err(|e| ApiError::bad("image_b64", format!("image_b64 is not base64: {e}")))?;
            let image = decode_png(&bytes)
                .map_err(|e| ApiError::bad("image_b64", format!("image_b64: {e}")))?;
            let n = s.model.codec.config.image_size;
            if image.width() != n || image.height() != n {
                return Err(ApiError::bad(
                    "image_b64",
                    format!(
                        "image_b64 must be {n}x{n}, got {}x{}",
                        image.width(),
                        image.height()
                    ),
                ));
            }
            let name = format!("{}.png", bytes_hash(&bytes));
            std::fs::create_dir_all(&s.inputs_dir)
                .and_then(|_| std::fs::write(s.inputs_dir.join(&name), &bytes))
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
            let input = InputRef {
                source: format!("inline:{name}"),
                hash: image.content_hash(),
            };
            (image, None, input)
        }
        (Some(_), Some(_)) => {
            return Err(ApiError::bad(
                "scan_id",
                "give either scan_id or image_b64, not both",
            ))
        }
        (None, None) => return Err(ApiError::bad("scan_id", "scan_id or image_b64 is required")),
    };
    let art = execute(&s, image, mask, cfg.clone()).await?;
    let record = RunRecord {
        run_id: 0,
        timestamp: 0,
        kind,
        config: cfg,
        input,
        control: None,
        outputs: art.output_refs(),
        scores: art.scores(),
        checkpoint_id: s.checkpoint_id.clone(),
    };
    let record = s.runs.lock().expect("run log lock").append(record)?;
    Ok(Json(response(&art, record.run_id, seed)))
}

async fn post_counterfactual(
    State(s): State<Arc<AppState>>,
    body: Result<Json<GenerationRequest>, JsonRejection>,
) -> ApiResult<Json<GenerationResponse>> {
    handle_generation(s, RunKind::Counterfactual, body).await
}

async fn post_induce(
    State(s): State<Arc<AppState>>,
    body: Result<Json<GenerationRequest>, JsonRejection>,
) -> ApiResult<Json<GenerationResponse>> {
    handle_generation(s, RunKind::Induce, body).await
}

async fn list_runs(State(s): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    let runs = s.runs.lock().expect("run log lock").records()?;
    Ok(Json(json!({ "runs": runs })))
}

#[derive(Debug, Default, Deserialize)]
pub struct RunQuery {
    #[serde(default)]
    pub replay: bool,
}

fn load_input(s: &AppState, input: &InputRef) -> ApiResult<(Image, Option<Image>)> {
    if let Some(id) = input.source.strip_prefix("scan:") {
        let scan = find_scan(s, id)?;
        return Ok((
            scan.image.clone(),
            has_lesion(&scan.lesion_mask).then(|| scan.lesion_mask.clone()),
        ));
    }
    if let Some(name) = input.source.strip_prefix("inline:") {
        let bytes = std::fs::read(s.inputs_dir.join(name)).map_err(|_| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                format!("stored input {name} is missing"),
            )
        })?;
        return Ok((decode_png(&bytes)?, None));
    }
    Err(ApiError::new(
        StatusCode::NOT_FOUND,
        format!("unknown input source {}", input.source),
    ))
}

/// The stored record; with `?replay=true` the run is re-executed and the
/// fresh outputs returned alongside a hash comparison.
async fn get_run(
    State(s): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Json<serde_json::Value>> {
    let id: u64 = id
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")))?;
    let record = s
        .runs
        .lock()
        .expect("run log lock")
        .get(id)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown run {id}")))?;
    if !q.replay {
        return Ok(Json(json!({ "record": record })));
    }
    let (image, mask) = load_input(&s, &record.input)?;
    let art = execute(&s, image, mask, record.config.clone()).await?;
    let fresh = art.output_refs();
    let matches = fresh
        .iter()
        .all(|o| record.output_hash(&o.name).is_none_or(|h| h == o.hash));
    Ok(Json(json!({
        "record": record,
        "replay": response(&art, record.run_id, record.config.seed),
        "replay_matches": matches,
    })))
}

/// Loads the checkpoint and scans, then serves until interrupted.
pub fn serve_blocking(
    checkpoint: &Path,
    data: &Path,
    run_log: &Path,
    serve: &ServeConfig,
) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let id = ckpt.id()?;
    let scans = crate::commands::load_dataset(data)?;
    let cfg = crate::config::AppConfig::default();
    let state = AppState::new(
        ckpt.model,
        id,
        scans,
        run_log,
        serve,
        cfg.generation,
        cfg.induce,
    )?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    rt.block_on(async {
        let addr = format!("{}:{}", serve.host, serve.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Data(format!("bind {addr}: {e}")))?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .await
            .map_err(|e| CliError::Data(e.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use axum::body::Body;
    use axum::http::Request;
    use tower::ServiceExt;
    use vade_core::codec::Codec;
    use vade_core::diffusion::ModelConfig;
    use vade_core::text::Vocab;

    #[tokio::test]
    async fn full_queue_is_503() {
        let dir = tempfile::tempdir().unwrap();
        let mut mc = ModelConfig::tiny();
        mc.unet.control_channels = 0;
        let model = Model::new(mc, Vocab::default(), Codec::identity(16)).unwrap();
        let serve = ServeConfig {
            queue_limit: 1,
            ..ServeConfig::default()
        };
        let gen = GenerationConfig {
            steps: 4,
            ..GenerationConfig::default()
        };
        let s = AppState::new(
            model,
            "ck".into(),
            vec![],
            &dir.path().join("runs.jsonl"),
            &serve,
            gen.clone(),
            gen,
        )
        .unwrap();
        let img = B64.encode(encode_png(&Image::filled(16, 16, 0.3), BitDepth::Eight).unwrap());
        let body = serde_json::json!({ "image_b64": img, "seed": 1 }).to_string();
        let req = || {
            Request::post("/api/counterfactual")
                .header("content-type", "application/json")
                .body(Body::from(body.clone()))
                .unwrap()
        };

        let held = admit(&s).unwrap();
        let resp = router(s.clone()).oneshot(req()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::SERVICE_UNAVAILABLE);
        drop(held);
        let resp = router(s.clone()).oneshot(req()).await.unwrap();
        assert_eq!(resp.status(), StatusCode::OK);
        assert_eq!(s.admitted.load(Ordering::SeqCst), 0);
    }
}
