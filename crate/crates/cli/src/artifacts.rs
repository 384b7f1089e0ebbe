//! Where trained artifacts live under the work directory, and loading them
//! into a [`Models`] bundle.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use wspace_core::checkpoint::{Checkpoint, Persist};
use wspace_core::config::Config;
use wspace_core::encoders::ImageEncoder;
use wspace_core::features::AttributeClassifier;
use wspace_core::generator::GeneratorModel;
use wspace_core::guided::{SimilarityContext, SimilarityRegistry};
use wspace_core::latent::LayerAttributeTable;
use wspace_core::pipeline::Models;
use wspace_core::text_align::TextEncoder;
use wspace_core::util::sha256_hex;
use wspace_core::{Error, Result};

pub const GENERATOR: &str = "generator.ckpt";
pub const FEATURES: &str = "features.ckpt";
pub const INVERSION: &str = "inversion.ckpt";
pub const BASELINE: &str = "inversion-baseline.ckpt";
pub const SKETCH: &str = "sketch.ckpt";
pub const LABEL: &str = "label.ckpt";
pub const TEXT: &str = "text.ckpt";
pub const MASKED: &str = "masked.ckpt";
pub const SIMILARITY: &str = "similarity.ckpt";
pub const LAYERS: &str = "layers.json";

/// Metadata of one loaded artifact, as reported by the service.
#[derive(Clone, Debug, Serialize)]
pub struct ModelInfo {
    pub name: String,
    pub kind: String,
    pub path: PathBuf,
    pub file_hash: String,
    pub dataset_hash: Option<String>,
    pub seed: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

fn info(name: &str, path: &Path, ckpt: &Checkpoint) -> ModelInfo {
    ModelInfo {
        name: name.into(),
        kind: ckpt.meta.kind.clone(),
        path: path.to_path_buf(),
        file_hash: ckpt.hash(),
        dataset_hash: ckpt.meta.dataset_hash.clone(),
        seed: Some(ckpt.meta.seed),
        metrics: ckpt.meta.metrics.clone(),
    }
}

fn load_opt<T: Persist>(dir: &Path, file: &str, infos: &mut Vec<ModelInfo>) -> Result<Option<Arc<T>>> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok(None);
    }
    let ckpt = Checkpoint::load(&path)?;
    ckpt.expect_kind(T::KIND)?;
    let model = T::from_checkpoint(&ckpt)?;
    infos.push(info(file.trim_end_matches(".ckpt"), &path, &ckpt));
    Ok(Some(Arc::new(model)))
}

pub fn load_layer_table(path: &Path) -> Result<LayerAttributeTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Load every artifact present in the checkpoint directory. Missing files
/// leave the corresponding model empty.
pub fn load_models(cfg: &Config) -> Result<(Models, Vec<ModelInfo>)> {
    let dir = cfg.checkpoint_dir();
    let mut infos = Vec::new();
    let features = load_opt::<AttributeClassifier>(&dir, FEATURES, &mut infos)?;
    let mut models = Models {
        generator: load_opt::<GeneratorModel>(&dir, GENERATOR, &mut infos)?,
        features: features.clone(),
        inversion: load_opt::<ImageEncoder>(&dir, INVERSION, &mut infos)?,
        text: load_opt::<TextEncoder>(&dir, TEXT, &mut infos)?,
        masked: load_opt::<ImageEncoder>(&dir, MASKED, &mut infos)?,
        sketch: load_opt::<ImageEncoder>(&dir, SKETCH, &mut infos)?,
        label: load_opt::<ImageEncoder>(&dir, LABEL, &mut infos)?,
        similarity: None,
        layers: None,
    };
    let layers = dir.join(LAYERS);
    if layers.exists() {
        let bytes = std::fs::read(&layers).map_err(|e| Error::io(&layers, e))?;
        models.layers = Some(serde_json::from_slice(&bytes)?);
        infos.push(ModelInfo {
            name: "layers".into(),
            kind: "layer_table".into(),
            path: layers,
            file_hash: sha256_hex(&bytes),
            dataset_hash: None,
            seed: None,
            metrics: BTreeMap::new(),
        });
    }
    let ctx = SimilarityContext { oracle: features, oracle_temperature: cfg.guided.oracle_temperature };
    match SimilarityRegistry::default().resolve(&cfg.guided.similarity, &ctx) {
        Ok(s) => models.similarity = Some(s),
        Err(Error::MissingModel(what)) => log::info!("similarity model unavailable: {what}"),
        Err(e) => return Err(e),
    }
    Ok((models, infos))
}

/// Path of a named artifact.
pub fn artifact(cfg: &Config, file: &str) -> PathBuf {
    cfg.checkpoint_dir().join(file)
}
