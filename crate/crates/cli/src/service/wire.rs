//! JSON request and response bodies. Images travel as base64 PNG.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use wspace_core::imageio::{decode_gray_png, decode_rgb_png, encode_gray_png, encode_rgb_png};
use wspace_core::latent::{LayerSet, WCode};
use wspace_core::latent_opt::OptimTrace;
use wspace_core::pipeline::{EditKind, EditSession, EditStep};
use wspace_core::{Error, Result};
use wspace_tensor::Tensor;

use crate::artifacts::ModelInfo;

fn strip_data_url(s: &str) -> &str {
    s.find(";base64,").map_or(s, |i| &s[i + 8..])
}

fn b64_decode(s: &str) -> Result<Vec<u8>> {
    STANDARD.decode(strip_data_url(s).trim()).map_err(|e| Error::InvalidArgument(format!("base64: {e}")))
}

pub fn png_to_image(s: &str) -> Result<Tensor> {
    decode_rgb_png(&b64_decode(s)?)
}

pub fn png_to_gray(s: &str) -> Result<(Vec<u8>, usize, usize)> {
    decode_gray_png(&b64_decode(s)?)
}

pub fn image_to_png(img: &Tensor) -> Result<String> {
    Ok(STANDARD.encode(encode_rgb_png(img)?))
}

pub fn gray_to_png(values: &[u8], r: usize) -> Result<String> {
    Ok(STANDARD.encode(encode_gray_png(values, r, r)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    /// `"ok"` or `"loading"`.
    pub status: String,
    pub models: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct ModelsResponse {
    pub models: Vec<ModelInfo>,
    pub strategies: Vec<String>,
    pub similarity: Option<String>,
    pub resolution: Option<usize>,
    pub layers: Option<usize>,
    pub channels: Option<usize>,
    pub max_iterations: usize,
    pub max_images: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub flips: Vec<(String, f64)>,
    /// Slots whose flip rate reaches the threshold.
    pub owns: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LayersResponse {
    pub threshold: f64,
    pub layers: Vec<LayerRow>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InvertRequest {
    pub image: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CodeResponse {
    pub code: Vec<Vec<f64>>,
    pub code_hash: String,
    pub image: String,
}

impl CodeResponse {
    pub fn new(w: &WCode, image: &Tensor) -> Result<Self> {
        Ok(CodeResponse { code: w.rows(), code_hash: w.hash(), image: image_to_png(image)? })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub text: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub strategy: Option<String>,
    /// Grayscale PNG sketch.
    #[serde(default)]
    pub sketch: Option<String>,
    /// Grayscale PNG of part ids.
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub iterations: Option<usize>,
}

fn default_n() -> usize {
    4
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub strategy: String,
    pub images: Vec<CodeResponse>,
}

/// Start a session from `image`, or continue `session`.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManipulateRequest {
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    pub text: String,
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub iterations: Option<usize>,
    /// Return at once with 202 and let the client poll the trace.
    #[serde(default)]
    pub background: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoiEditRequest {
    #[serde(default)]
    pub session: Option<String>,
    #[serde(default)]
    pub image: Option<String>,
    /// Grayscale PNG; nonzero pixels may change.
    pub mask: String,
    pub text: String,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub background: bool,
}

/// A code given directly or as an image to invert.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CodeInput {
    Code { code: Vec<Vec<f64>> },
    Image { image: String },
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MixRequest {
    pub content: CodeInput,
    pub style: CodeInput,
    /// Layers copied from `style`.
    pub layers: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StepView {
    pub index: usize,
    pub instruction: String,
    pub kind: String,
    pub strategy: Option<String>,
    pub layers: Option<LayerSet>,
    pub result_hash: String,
    pub objective: Option<String>,
    pub initial_objective: Option<f64>,
    pub final_objective: Option<f64>,
}

impl StepView {
    pub fn new(index: usize, s: &EditStep) -> Self {
        let (kind, strategy) = match &s.kind {
            EditKind::Text { strategy } => ("text", Some(strategy.clone())),
            EditKind::Roi { .. } => ("roi", None),
        };
        StepView {
            index,
            instruction: s.instruction.clone(),
            kind: kind.into(),
            strategy,
            layers: s.layers.clone(),
            result_hash: s.result_hash.clone(),
            objective: s.trace.as_ref().map(|t| t.objective.clone()),
            initial_objective: s.trace.as_ref().and_then(OptimTrace::first_total),
            final_objective: s.trace.as_ref().and_then(OptimTrace::last_total),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub edits: usize,
    pub status: String,
    pub current_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    /// `"idle"`, `"running"`, `"cancelled"` or `"failed"`.
    pub status: String,
    pub last_error: Option<String>,
    pub source: String,
    pub current: String,
    pub current_hash: String,
    pub current_code: Option<Vec<Vec<f64>>>,
    pub history: Vec<StepView>,
}

impl SessionView {
    pub fn new(s: &EditSession, status: &str, last_error: Option<String>) -> Result<Self> {
        Ok(SessionView {
            id: s.id().into(),
            status: status.into(),
            last_error,
            source: image_to_png(s.source())?,
            current: image_to_png(s.current_image())?,
            current_hash: s.current_hash(),
            current_code: s.current_code().map(WCode::rows),
            history: s.history().iter().enumerate().map(|(i, st)| StepView::new(i, st)).collect(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub session: String,
    pub status: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceResponse {
    pub session: String,
    pub status: String,
    pub trace: OptimTrace,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CancelResponse {
    pub session: String,
    pub cancelled: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplayResponse {
    pub session: String,
    pub recorded: Vec<String>,
    pub replayed: Vec<String>,
    pub matches: bool,
}
