use std::path::Path;

use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use super::{manipulate_roi, Edited, Models, PipelineConfig, StrategyRegistry};
use crate::encoders::Mask;
use crate::error::{Error, Result};
use crate::imageio::{load_rgb, read_file, save_rgb, write_file};
use crate::latent::{LayerSet, WCode};
use crate::latent_opt::{OptimTrace, RunControl};
use crate::util::tensor_hash;

pub const SESSION_FILE: &str = "session.json";
const SOURCE_FILE: &str = "source.png";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditKind {
    /// Whole-image text edit with a named strategy.
    Text { strategy: String },
    /// Region edit; `roi` marks the editable pixels.
    Roi { roi: Mask },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditStep {
    pub instruction: String,
    #[serde(flatten)]
    pub kind: EditKind,
    pub config: PipelineConfig,
    pub layers: Option<LayerSet>,
    pub code: WCode,
    pub result_hash: String,
    pub trace: Option<OptimTrace>,
}

/// Linear edit history over one source image. Each edit starts from the
/// previous result; replaying the history reproduces every result hash.
#[derive(Clone, Debug)]
pub struct EditSession {
    id: String,
    source: Tensor,
    current: Tensor,
    history: Vec<EditStep>,
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    id: String,
    source_hash: String,
    current_shape: Vec<usize>,
    current: Vec<f64>,
    history: Vec<EditStep>,
}

/// Snap to the 8-bit grid so the PNG copy of the source is exact.
fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl EditSession {
    /// `source` is `[R, R, 3]`, snapped to 8-bit levels.
    pub fn new(id: &str, source: &Tensor) -> Result<Self> {
        if !valid_id(id) {
            return Err(Error::InvalidArgument(format!("session id {id:?} must be 1-64 of [A-Za-z0-9_-]")));
        }
        let s = source.shape();
        if s.len() != 3 || s[2] != 3 || s[0] != s[1] {
            return Err(Error::shape("[R, R, 3]", s));
        }
        let source = quantize(source);
        Ok(EditSession { id: id.into(), current: source.clone(), source, history: Vec::new() })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source(&self) -> &Tensor {
        &self.source
    }

    pub fn current_image(&self) -> &Tensor {
        &self.current
    }

    pub fn current_code(&self) -> Option<&WCode> {
        self.history.last().map(|s| &s.code)
    }

    pub fn current_hash(&self) -> String {
        tensor_hash(&self.current)
    }

    pub fn history(&self) -> &[EditStep] {
        &self.history
    }

    fn execute(
        kind: &EditKind,
        input: &Tensor,
        text: &str,
        models: &Models,
        registry: &StrategyRegistry,
        cfg: &PipelineConfig,
        control: Option<&RunControl>,
    ) -> Result<Edited> {
        match kind {
            EditKind::Text { strategy } => registry.get(strategy)?.manipulate(input, text, models, cfg, control),
            EditKind::Roi { roi } => manipulate_roi(input, roi, text, models, cfg, control),
        }
    }

    /// Run one edit on the current image and append it. On error, including
    /// cancellation, the session is left unchanged.
    pub fn apply(
        &mut self,
        kind: EditKind,
        text: &str,
        models: &Models,
        registry: &StrategyRegistry,
        cfg: &PipelineConfig,
        control: Option<&RunControl>,
    ) -> Result<&EditStep> {
        let kind = match kind {
            EditKind::Text { strategy } => EditKind::Text { strategy: registry.get(&strategy)?.name().to_string() },
            roi => roi,
        };
        let out = Self::execute(&kind, &self.current, text, models, registry, cfg, control)?;
        self.history.push(EditStep {
            instruction: text.into(),
            kind,
            config: cfg.clone(),
            layers: out.layers,
            code: out.w,
            result_hash: tensor_hash(&out.image),
            trace: out.trace,
        });
        self.current = out.image;
        Ok(self.history.last().expect("just pushed"))
    }

    /// Re-run the history from the source; returns each step's result hash.
    pub fn replay(&self, models: &Models, registry: &StrategyRegistry) -> Result<Vec<String>> {
        let mut image = self.source.clone();
        let mut hashes = Vec::with_capacity(self.history.len());
        for step in &self.history {
            let out = Self::execute(&step.kind, &image, &step.instruction, models, registry, &step.config, None)?;
            hashes.push(tensor_hash(&out.image));
            image = out.image;
        }
        Ok(hashes)
    }

    /// Whether [`Self::replay`] reproduces every recorded hash.
    pub fn verify_replay(&self, models: &Models, registry: &StrategyRegistry) -> Result<bool> {
        let hashes = self.replay(models, registry)?;
        Ok(hashes.iter().zip(&self.history).all(|(h, s)| *h == s.result_hash))
    }

    /// Writes `session.json`, `source.png` and one PNG per step result.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_rgb(&dir.join(SOURCE_FILE), &self.source)?;
        let file = SessionFile {
            id: self.id.clone(),
            source_hash: tensor_hash(&self.source),
            current_shape: self.current.shape().to_vec(),
            current: self.current.to_vec(),
            history: self.history.clone(),
        };
        write_file(&dir.join(SESSION_FILE), &serde_json::to_vec_pretty(&file)?)?;
        if let Some(last) = self.history.len().checked_sub(1) {
            save_rgb(&dir.join(format!("step-{last:03}.png")), &self.current)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: SessionFile = serde_json::from_slice(&read_file(&dir.join(SESSION_FILE))?)?;
        let source = load_rgb(&dir.join(SOURCE_FILE))?;
        if tensor_hash(&source) != file.source_hash {
            return Err(Error::InvalidArgument(format!("{}: source image does not match its recorded hash", dir.display())));
        }
        if file.current_shape.iter().product::<usize>() != file.current.len() {
            return Err(Error::shape(&file.current_shape, [file.current.len()]));
        }
        Ok(EditSession { id: file.id, source, current: Tensor::new(file.current_shape, file.current), history: file.history })
    }
}
