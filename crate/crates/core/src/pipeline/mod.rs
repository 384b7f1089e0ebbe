//! Text- and modality-driven generation and editing built from the encoders,
//! layer mixing and the latent optimizers, with strategies chosen by name.

mod session;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use crate::encoders::{ImageEncoder, Mask, Modality};
use crate::error::{Error, Result};
use crate::features::AttributeClassifier;
use crate::generator::GeneratorModel;
use crate::guided::SimilarityModel;
use crate::latent::{diverse_variants, style_mix, LayerAttributeTable, LayerSet, WCode};
use crate::latent_opt::{guided_optimize_simple, guided_optimize_stable, instance_optimize, roi_optimize, OptimConfig, OptimTrace, RunControl};
use crate::text_align::TextEncoder;
use crate::toyfaces::{parse_text, Slot};
use crate::util::derive_seed;

pub use session::{EditKind, EditSession, EditStep, SESSION_FILE};

/// Default flip-rate threshold for counting a layer as owning a slot.
pub const LAYER_THRESHOLD: f64 = 0.5;

/// Layers whose probed flip rate reaches `threshold` for any slot the text mentions.
pub fn select_text_layers(text: &str, table: &LayerAttributeTable, threshold: f64) -> LayerSet {
    let q = parse_text(text);
    q.iter().fold(LayerSet::empty(), |acc, (slot, _)| acc.union(&table.layers_for(slot, threshold)))
}

/// Slots a sketch or label map determines on its own.
pub const SHAPE_SLOTS: [Slot; 5] = [Slot::GenderPresentation, Slot::HairLength, Slot::Glasses, Slot::Smile, Slot::Hat];

/// Everything a pipeline call may use. Absent models surface as
/// [`Error::MissingModel`] only when a call needs them.
#[derive(Clone, Default)]
pub struct Models {
    pub generator: Option<Arc<GeneratorModel>>,
    pub features: Option<Arc<AttributeClassifier>>,
    pub inversion: Option<Arc<ImageEncoder>>,
    pub text: Option<Arc<TextEncoder>>,
    pub masked: Option<Arc<ImageEncoder>>,
    pub sketch: Option<Arc<ImageEncoder>>,
    pub label: Option<Arc<ImageEncoder>>,
    pub similarity: Option<Arc<dyn SimilarityModel>>,
    pub layers: Option<LayerAttributeTable>,
}

fn need<'a, T: ?Sized>(m: &'a Option<Arc<T>>, what: &str) -> Result<&'a T> {
    m.as_deref().ok_or_else(|| Error::MissingModel(what.into()))
}

impl Models {
    pub fn generator(&self) -> Result<&GeneratorModel> {
        need(&self.generator, "generator")
    }

    pub fn features(&self) -> Result<&AttributeClassifier> {
        need(&self.features, "feature extractor")
    }

    pub fn inversion(&self) -> Result<&ImageEncoder> {
        need(&self.inversion, "inversion encoder")
    }

    pub fn text(&self) -> Result<&TextEncoder> {
        need(&self.text, "text encoder")
    }

    pub fn masked(&self) -> Result<&ImageEncoder> {
        need(&self.masked, "masked encoder")
    }

    pub fn similarity(&self) -> Result<&dyn SimilarityModel> {
        need(&self.similarity, "similarity model")
    }

    pub fn modality_encoder(&self, m: Modality) -> Result<&ImageEncoder> {
        match m {
            Modality::Photo => self.inversion(),
            Modality::Sketch => need(&self.sketch, "sketch encoder"),
            Modality::Label => need(&self.label, "label encoder"),
            Modality::Masked => self.masked(),
        }
    }

    pub fn layer_table(&self) -> Result<&LayerAttributeTable> {
        self.layers.as_ref().ok_or_else(|| Error::MissingModel("layer attribute table".into()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub layer_threshold: f64,
    pub optim: OptimConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { layer_threshold: LAYER_THRESHOLD, optim: OptimConfig::default() }
    }
}

/// A decoded code.
#[derive(Clone, Debug)]
pub struct Generated {
    pub w: WCode,
    pub image: Tensor,
}

/// Result of one text edit.
#[derive(Clone, Debug)]
pub struct Edited {
    pub w: WCode,
    pub image: Tensor,
    /// Layers taken from the text code, when the strategy mixes.
    pub layers: Option<LayerSet>,
    pub trace: Option<OptimTrace>,
}

/// One way of turning text into codes.
pub trait Strategy: Send + Sync {
    /// Canonical name.
    fn name(&self) -> &'static str;

    fn generate(&self, text: &str, n: usize, seed: u64, models: &Models, cfg: &PipelineConfig) -> Result<Vec<Generated>>;

    fn manipulate(
        &self,
        image: &Tensor,
        text: &str,
        models: &Models,
        cfg: &PipelineConfig,
        control: Option<&RunControl>,
    ) -> Result<Edited>;
}

fn decode_all(g: &GeneratorModel, codes: Vec<WCode>) -> Result<Vec<Generated>> {
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    let images = g.synthesize_batch(&codes)?.unstack();
    Ok(codes.into_iter().zip(images).map(|(w, image)| Generated { w, image }).collect())
}

/// Text code on the text-relevant layers, everything else from the image
/// code (editing) or from prior draws (generation).
pub struct EncoderMixing;

impl Strategy for EncoderMixing {
    fn name(&self) -> &'static str {
        "encoder_mixing"
    }

    fn generate(&self, text: &str, n: usize, seed: u64, models: &Models, cfg: &PipelineConfig) -> Result<Vec<Generated>> {
        let g = models.generator()?;
        let w_l = models.text()?.encode_text(text);
        let protected = select_text_layers(text, models.layer_table()?, cfg.layer_threshold);
        decode_all(g, diverse_variants(g, &w_l, &protected, n, seed)?)
    }

    fn manipulate(
        &self,
        image: &Tensor,
        text: &str,
        models: &Models,
        cfg: &PipelineConfig,
        control: Option<&RunControl>,
    ) -> Result<Edited> {
        let (g, ev, f) = (models.generator()?, models.inversion()?, models.features()?);
        let w_v = ev.invert(image)?;
        let w_l = models.text()?.encode_text(text);
        let layers = select_text_layers(text, models.layer_table()?, cfg.layer_threshold);
        let mixed = style_mix(&w_v, &w_l, &layers)?;
        let (w, trace) = instance_optimize(image, &mixed, ev, g, f, &cfg.optim, control)?;
        let image = g.synthesize(&w)?;
        Ok(Edited { w, image, layers: Some(layers), trace: Some(trace) })
    }
}

/// Similarity-guided latent search.
pub struct GuidedOptimization;

impl Strategy for GuidedOptimization {
    fn name(&self) -> &'static str {
        "guided_optimization"
    }

    fn generate(&self, text: &str, n: usize, seed: u64, models: &Models, cfg: &PipelineConfig) -> Result<Vec<Generated>> {
        let (g, ev, s) = (models.generator()?, models.inversion()?, models.similarity()?);
        let inits = g.sample_prior(n, seed);
        let codes = inits
            .iter()
            .enumerate()
            .map(|(i, z0)| {
                let c = OptimConfig { seed: derive_seed(seed, i as u64, 0), ..cfg.optim.clone() };
                guided_optimize_simple(z0, text, None, ev, g, s, &c, None).map(|(w, _)| w)
            })
            .collect::<Result<Vec<_>>>()?;
        decode_all(g, codes)
    }

    fn manipulate(
        &self,
        image: &Tensor,
        text: &str,
        models: &Models,
        cfg: &PipelineConfig,
        control: Option<&RunControl>,
    ) -> Result<Edited> {
        let (g, ev, f, s) = (models.generator()?, models.inversion()?, models.features()?, models.similarity()?);
        let (w, trace) = guided_optimize_stable(image, text, ev, g, f, s, &cfg.optim, control)?;
        let image = g.synthesize(&w)?;
        Ok(Edited { w, image, layers: None, trace: Some(trace) })
    }
}

/// Strategies by name, with short aliases.
pub struct StrategyRegistry {
    strategies: BTreeMap<String, Arc<dyn Strategy>>,
    aliases: BTreeMap<String, String>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        let mut r = StrategyRegistry { strategies: BTreeMap::new(), aliases: BTreeMap::new() };
        r.register(Arc::new(EncoderMixing), &["A", "a", "mixing"]);
        r.register(Arc::new(GuidedOptimization), &["B", "b", "guided"]);
        r
    }
}

impl StrategyRegistry {
    pub fn register(&mut self, s: Arc<dyn Strategy>, aliases: &[&str]) {
        let name = s.name().to_string();
        for a in aliases {
            self.aliases.insert((*a).to_string(), name.clone());
        }
        self.strategies.insert(name, s);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.strategies.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Strategy>> {
        let canonical = self.aliases.get(name).map_or(name, String::as_str);
        self.strategies.get(canonical).cloned().ok_or_else(|| {
            Error::Config(format!("unknown strategy {name:?} (known: {})", self.names().collect::<Vec<_>>().join(", ")))
        })
    }
}

pub fn generate_from_text(
    text: &str,
    n: usize,
    seed: u64,
    strategy: &dyn Strategy,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<Vec<Generated>> {
    strategy.generate(text, n, seed, models, cfg)
}

pub fn manipulate_with_text(
    image: &Tensor,
    text: &str,
    strategy: &dyn Strategy,
    models: &Models,
    cfg: &PipelineConfig,
    control: Option<&RunControl>,
) -> Result<Edited> {
    strategy.manipulate(image, text, models, cfg, control)
}

/// Codes from a sketch `[R, R, 1]` or one-hot label map `[R, R, parts]`,
/// with the text's layers taken from the text code and the layers neither
/// input pins down drawn from the prior.
pub fn generate_from_modality(
    input: &Tensor,
    modality: Modality,
    text: &str,
    n: usize,
    seed: u64,
    models: &Models,
    cfg: &PipelineConfig,
) -> Result<Vec<Generated>> {
    if !matches!(modality, Modality::Sketch | Modality::Label) {
        return Err(Error::InvalidArgument(format!("{} is not a conditioning modality", modality.name())));
    }
    let g = models.generator()?;
    let table = models.layer_table()?;
    let w_c = models.modality_encoder(modality)?.invert(input)?;
    let text_layers = select_text_layers(text, table, cfg.layer_threshold);
    let w = if text_layers.is_empty() { w_c } else { style_mix(&w_c, &models.text()?.encode_text(text), &text_layers)? };
    let shape_layers = SHAPE_SLOTS.iter().fold(LayerSet::empty(), |acc, &s| acc.union(&table.layers_for(s, cfg.layer_threshold)));
    decode_all(g, diverse_variants(g, &w, &text_layers.union(&shape_layers), n, seed)?)
}

/// Edit the painted region `roi` (1 = editable) towards `text`, holding
/// every other pixel.
pub fn manipulate_roi(
    image: &Tensor,
    roi: &Mask,
    text: &str,
    models: &Models,
    cfg: &PipelineConfig,
    control: Option<&RunControl>,
) -> Result<Edited> {
    let (g, em, f, s) = (models.generator()?, models.masked()?, models.features()?, models.similarity()?);
    let (w, trace) = roi_optimize(image, &roi.complement(), text, em, g, f, s, &cfg.optim, control)?;
    let image = g.synthesize(&w)?;
    Ok(Edited { w, image, layers: None, trace: Some(trace) })
}
