//! Read-mostly HTTP server over attention dumps.
//!
//! Each served model is one dump directory; its manifest names the
//! checkpoint and dataset it was made from. Browsing reads the dump, and
//! only `POST /whatif` runs forwards, at most `server.whatif_concurrency`
//! at a time. Numbers in responses are rounded to 6 significant digits, so
//! exact values are only available from the dump files themselves.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lens_core::data::{answer_vocab, Dataset, Function, InputKind, Sample, CATEGORIES, COLORS, MATERIALS, SIZES};
use lens_core::lab::{classify_mode, record_ks, KTable, ModeThresholds, Pooling};
use lens_core::model::{HeadAddress, PruneMask, VlTransformer};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::LabConfig;
use crate::dump::AttentionDump;
use crate::error::{Error, Result};
use crate::report;

pub struct ServedModel {
    pub name: String,
    pub dump: AttentionDump,
    pub model: VlTransformer,
    pub dataset: Arc<Dataset>,
    /// Dumped samples, in dump order.
    pub samples: Vec<Sample>,
    pub input: InputKind,
    pub checkpoint: Option<PathBuf>,
    pub table: KTable,
}

pub struct AppState {
    pub models: Vec<ServedModel>,
    pub theta: f64,
    pub thresholds: ModeThresholds,
    pub pooling: Pooling,
    pub whatif: Semaphore,
    pub cors_origin: Option<String>,
}

impl AppState {
    /// Loads `(name, dump dir)` pairs; models made from the same dataset
    /// share one copy of it.
    pub fn load(specs: &[(String, PathBuf)], config: &LabConfig) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("no models to serve".into()));
        }
        let theta = config.analysis.theta;
        let mut datasets: BTreeMap<String, Arc<Dataset>> = BTreeMap::new();
        let mut models = Vec::new();
        for (name, dir) in specs {
            if models.iter().any(|m: &ServedModel| &m.name == name) {
                return Err(Error::Config(format!("model name `{name}` given twice")));
            }
            let dump = AttentionDump::open(dir)?;
            let model = dump.load_model()?;
            let key = dump.manifest.data.as_ref().map(|d| d.fingerprint.clone()).unwrap_or_default();
            let dataset = match datasets.get(&key) {
                Some(d) => d.clone(),
                None => {
                    let d = Arc::new(dump.load_dataset()?);
                    datasets.insert(key, d.clone());
                    d
                }
            };
            let samples = dump.samples(&dataset)?.into_iter().cloned().collect();
            let table = report::ktable_from_dump(&dump, theta)?;
            models.push(ServedModel {
                name: name.clone(),
                input: dump.manifest.input,
                checkpoint: dump.manifest.checkpoint.as_ref().map(|c| c.path.clone()),
                dump,
                model,
                dataset,
                samples,
                table,
            });
        }
        Ok(Self {
            models,
            theta,
            thresholds: config.analysis.modes.clone(),
            pooling: config.analysis.pooling,
            whatif: Semaphore::new(config.server.whatif_concurrency),
            cors_origin: config.server.cors_origin.clone(),
        })
    }

    fn model(&self, name: &str) -> std::result::Result<&ServedModel, ApiError> {
        self.models.iter().find(|m| m.name == name).ok_or_else(|| ApiError::not_found(format!("unknown model `{name}`")))
    }
}

pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn not_found(msg: String) -> Self {
        Self { status: StatusCode::NOT_FOUND, body: json!({ "error": msg }) }
    }

    fn bad_request(msg: String, entry: Option<&str>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, body: json!({ "error": msg, "entry": entry }) }
    }

    fn internal(msg: String) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, body: json!({ "error": msg }) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let origin = match &state.cors_origin {
        Some(o) => HeaderValue::from_str(o).map(AllowOrigin::exact).unwrap_or_else(|_| AllowOrigin::any()),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/models", get(models))
        .route("/instances", get(instances))
        .route("/instance/{model}/{id}", get(instance))
        .route("/whatif/{model}/{id}", post(whatif))
        .route("/analysis", get(analysis))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(addr: &str, state: AppState) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::Runtime(format!("bind {addr}: {e}")))?;
    eprintln!("serving {} model(s) on http://{addr}", state.models.len());
    axum::serve(listener, router(Arc::new(state))).await.map_err(|e| Error::Runtime(e.to_string()))
}

/// Rounds to 6 significant digits.
pub fn round6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().unwrap_or(x)
}

/// Rounds every non-integer number in `v`.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|x| serde_json::Number::from_f64(round6(x)))
            .map(Value::Number)
            .unwrap_or(Value::Null),
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn respond(v: Value) -> ApiResult {
    Ok(Json(round_json(v)))
}

async fn models(State(s): State<Arc<AppState>>) -> ApiResult {
    let list: Vec<Value> = s
        .models
        .iter()
        .map(|m| {
            let c = m.model.config();
            json!({
                "name": m.name,
                "encoder": c.encoder,
                "input": m.input,
                "samples": m.samples.len(),
                "heads": m.dump.manifest.heads.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
                "cross_heads": c.cross_heads().len(),
                "config": c,
            })
        })
        .collect();
    respond(json!({ "format_version": crate::FORMAT_VERSION, "models": list }))
}

#[derive(Deserialize)]
struct InstancesQuery {
    model: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

pub const MAX_PAGE: usize = 500;

fn summary(m: &ServedModel, i: usize, alpha: f64) -> Value {
    let s = &m.samples[i];
    let d = &m.dump.manifest.samples[i];
    json!({
        "id": s.id,
        "question": s.question.text,
        "answer": answer_label(s.answer()),
        "prediction": answer_label(d.prediction),
        "correct": d.prediction == s.answer(),
        "functions": s.question.functions,
        "group": s.question.group,
        "tail": s.is_tail(alpha),
    })
}

async fn instances(State(s): State<Arc<AppState>>, Query(q): Query<InstancesQuery>) -> ApiResult {
    let m = match &q.model {
        Some(name) => s.model(name)?,
        None => &s.models[0],
    };
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(50).min(MAX_PAGE);
    let alpha = m.dataset.config.alpha_star;
    let end = offset.saturating_add(limit).min(m.samples.len());
    let items: Vec<Value> = (offset.min(end)..end).map(|i| summary(m, i, alpha)).collect();
    respond(json!({
        "format_version": crate::FORMAT_VERSION,
        "model": m.name,
        "total": m.samples.len(),
        "offset": offset,
        "limit": limit,
        "items": items,
    }))
}

fn answer_label(i: usize) -> String {
    answer_vocab().get(i).cloned().unwrap_or_else(|| format!("#{i}"))
}

fn bbox(b: &lens_core::data::BBox) -> Value {
    json!([b.x, b.y, b.w, b.h])
}

fn matrix(rows: usize, cols: usize, w: &[f32]) -> Vec<Vec<f32>> {
    (0..rows).map(|i| w[i * cols..(i + 1) * cols].to_vec()).collect()
}

fn record_json(r: &lens_core::model::AttentionRecord, theta: f64) -> Value {
    let ks: Vec<u16> = record_ks(r, theta).map(|v| v.into_iter().map(|(k, _)| k).collect()).unwrap_or_default();
    json!({
        "head": r.head.to_string(),
        "rows": r.rows,
        "cols": r.cols,
        "weights": matrix(r.rows, r.cols, &r.weights),
        "k": ks,
    })
}

fn locate(s: &AppState, model: &str, id: u64) -> std::result::Result<(usize, usize), ApiError> {
    let mi = s.models.iter().position(|m| m.name == model).ok_or_else(|| ApiError::not_found(format!("unknown model `{model}`")))?;
    let i = s.models[mi].dump.index_of(id).ok_or_else(|| ApiError::not_found(format!("sample {id} is not in the `{model}` dump")))?;
    Ok((mi, i))
}

async fn instance(State(s): State<Arc<AppState>>, Path((model, id)): Path<(String, u64)>) -> ApiResult {
    let (mi, i) = locate(&s, &model, id)?;
    let m = &s.models[mi];
    let sample = &m.samples[i];
    let records = m.dump.records(i).map_err(|e| ApiError::internal(e.to_string()))?;
    let mut predictions = serde_json::Map::new();
    for other in &s.models {
        if let Some(j) = other.dump.index_of(id) {
            let p = other.dump.manifest.samples[j].prediction;
            predictions.insert(
                other.name.clone(),
                json!({ "prediction": answer_label(p), "index": p, "correct": p == sample.answer() }),
            );
        }
    }
    let objects: Vec<Value> = sample
        .scene
        .objects
        .iter()
        .map(|o| {
            json!({
                "category": CATEGORIES[o.category as usize],
                "color": COLORS[o.color as usize],
                "material": MATERIALS[o.material as usize],
                "size": SIZES[o.size as usize],
                "bbox": bbox(&o.bbox),
            })
        })
        .collect();
    let detections: Vec<Value> = sample
        .detections
        .detections
        .iter()
        .map(|d| json!({ "category": CATEGORIES[d.category as usize], "bbox": bbox(&d.bbox), "source": d.source }))
        .collect();
    respond(json!({
        "format_version": crate::FORMAT_VERSION,
        "model": m.name,
        "id": id,
        "question": sample.question.text,
        "tokens": m.dataset.vocab.words(&sample.tokens),
        "functions": sample.question.functions,
        "group": sample.question.group,
        "answer": answer_label(sample.answer()),
        "tail": sample.is_tail(m.dataset.config.alpha_star),
        "scene": { "objects": objects },
        "detections": detections,
        "predictions": predictions,
        "logits": m.dump.manifest.samples[i].logits,
        "theta": s.theta,
        "attention": records.iter().map(|r| record_json(r, s.theta)).collect::<Vec<_>>(),
    }))
}

#[derive(Deserialize)]
pub struct WhatIfBody {
    #[serde(default)]
    pub pruned: Vec<String>,
}

async fn whatif(
    State(s): State<Arc<AppState>>,
    Path((model, id)): Path<(String, u64)>,
    Json(body): Json<WhatIfBody>,
) -> ApiResult {
    let (mi, i) = locate(&s, &model, id)?;
    let config = s.models[mi].model.config().clone();
    let mut heads = Vec::with_capacity(body.pruned.len());
    for entry in &body.pruned {
        let h: HeadAddress = entry.parse().map_err(|e| ApiError::bad_request(format!("{e}"), Some(entry)))?;
        config.check_head(h).map_err(|e| ApiError::bad_request(e.to_string(), Some(entry)))?;
        heads.push(h);
    }
    let mask = PruneMask::new(&config, heads).map_err(|e| ApiError::bad_request(e.to_string(), None))?;
    let _permit = s.whatif.acquire().await.map_err(|e| ApiError::internal(e.to_string()))?;
    let state = s.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<Value> {
        let m = &state.models[mi];
        let input = m.dataset.input(&m.samples[i], m.input);
        let out = m.model.forward(&input, &mask, true)?;
        let stored = m.dump.records(i)?;
        let changed: Vec<Value> = out
            .records
            .iter()
            .zip(&stored)
            .filter(|(a, b)| a.weights != b.weights)
            .map(|(a, _)| record_json(a, state.theta))
            .collect();
        let p = out.prediction();
        Ok(json!({
            "format_version": crate::FORMAT_VERSION,
            "model": m.name,
            "id": id,
            "pruned": mask.iter().map(|h| h.to_string()).collect::<Vec<_>>(),
            "logits": out.logits,
            "prediction": answer_label(p),
            "index": p,
            "correct": p == m.samples[i].answer(),
            "changed": changed,
        }))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::internal(e.to_string()))?;
    respond(result)
}

#[derive(Deserialize)]
struct AnalysisQuery {
    model: Option<String>,
    function: Option<String>,
    bins: Option<usize>,
}

async fn analysis(State(s): State<Arc<AppState>>, Query(q): Query<AnalysisQuery>) -> ApiResult {
    let m = match &q.model {
        Some(name) => s.model(name)?,
        None => &s.models[0],
    };
    let function = match &q.function {
        Some(f) => Some(f.parse::<Function>().map_err(|e| ApiError::bad_request(e.to_string(), Some(f)))?),
        None => None,
    };
    let bins = q.bins.unwrap_or(20).clamp(1, 200);
    let keep = |i: usize| function.is_none_or(|f| m.samples[i].question.functions.contains(&f));
    let selected = (0..m.samples.len()).filter(|&i| keep(i)).count();
    let heads: Vec<Value> = (0..m.table.heads.len())
        .map(|h| {
            let stat = m.table.stat(h, keep);
            let obs = stat.observations(s.pooling);
            let label = classify_mode(&obs, &s.thresholds);
            let mut hist = vec![0usize; bins];
            for r in &obs {
                hist[((r * bins as f64).ceil() as usize).clamp(1, bins) - 1] += 1;
            }
            json!({
                "head": stat.head.to_string(),
                "cross": stat.head.block.is_cross(),
                "median_ratio": stat.median_ratio(),
                "median_sample_ratio": stat.median_of_sample_medians(),
                "mode": label.mode,
                "low_mass": label.low_mass,
                "high_mass": label.high_mass,
                "observations": obs.len(),
                "histogram": hist,
            })
        })
        .collect();
    respond(json!({
        "format_version": crate::FORMAT_VERSION,
        "model": m.name,
        "theta": s.theta,
        "pooling": s.pooling,
        "thresholds": s.thresholds,
        "function": function,
        "samples": selected,
        "bins": bins,
        "heads": heads,
    }))
}
