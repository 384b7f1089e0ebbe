use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use super::metrics::{attribute_accuracy, diversity_score, fid};
use crate::error::{Error, Result};
use crate::features::attribute_flips;
use crate::pipeline::{Models, PipelineConfig, StrategyRegistry};
use crate::text_align::heldout_descriptions;
use crate::toyfaces::{Dataset, Slot, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub strategy: String,
    pub prompts: usize,
    pub variants: usize,
    pub edits: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { strategy: "encoder_mixing".into(), prompts: 100, variants: 8, edits: 50, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    /// Generated vs held-out real images, in feature space.
    pub fid: f64,
    /// Mean over prompts of the pairwise feature distance of its variants.
    pub diversity: f64,
    /// Oracle agreement of generated images with their prompts.
    pub accuracy: f64,
    /// Same images scored against another prompt's text.
    pub shuffled_accuracy: f64,
    /// Fraction of unmentioned slots unchanged by single-attribute edits.
    pub preservation: f64,
    /// Fraction of those edits whose target slot took the requested value.
    pub edit_success: f64,
    pub n_samples: usize,
    pub seeds: BTreeMap<String, u64>,
    pub model_hashes: BTreeMap<String, String>,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        [self.fid, self.diversity, self.accuracy, self.shuffled_accuracy, self.preservation, self.edit_success]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Fixed-order `name value` lines.
    pub fn table(&self) -> String {
        let rows = [
            ("fid", self.fid),
            ("diversity", self.diversity),
            ("accuracy", self.accuracy),
            ("shuffled_accuracy", self.shuffled_accuracy),
            ("preservation", self.preservation),
            ("edit_success", self.edit_success),
        ];
        let mut s = format!("{:<18} {}\n", "strategy", self.strategy);
        for (k, v) in rows {
            s += &format!("{k:<18} {v:.6}\n");
        }
        s += &format!("{:<18} {}\n", "n_samples", self.n_samples);
        s
    }
}

/// Single-attribute edits used for the preservation measurement.
pub const EDIT_TARGETS: [(Slot, usize, &str); 3] =
    [(Slot::Glasses, 1, "wearing glasses"), (Slot::Hat, 1, "wears a hat"), (Slot::Smile, 1, "is smiling")];

pub fn model_hashes(models: &Models) -> BTreeMap<String, String> {
    let mut h = BTreeMap::new();
    if let Some(m) = &models.generator {
        h.insert("generator".into(), m.fingerprint());
    }
    if let Some(m) = &models.features {
        h.insert("features".into(), m.fingerprint());
    }
    if let Some(m) = &models.inversion {
        h.insert("inversion".into(), m.fingerprint());
    }
    if let Some(m) = &models.text {
        h.insert("text".into(), m.fingerprint());
    }
    if let Some(m) = &models.masked {
        h.insert("masked".into(), m.fingerprint());
    }
    h
}

/// Generation over held-out prompts plus single-attribute edits on held-out
/// photos, scored with the oracle classifier.
pub fn evaluate(models: &Models, ds: &Dataset, pcfg: &PipelineConfig, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.prompts < 2 || cfg.variants < 2 {
        return Err(Error::InvalidArgument("evaluation needs at least 2 prompts and 2 variants".into()));
    }
    let oracle = models.features()?;
    let strategy = StrategyRegistry::default().get(&cfg.strategy)?;
    let prompts = heldout_descriptions(ds, cfg.prompts, cfg.seed);
    let mut images = Vec::with_capacity(prompts.len() * cfg.variants);
    let mut texts = Vec::with_capacity(images.capacity());
    let mut diversity = 0.0;
    for (k, (_, text)) in prompts.iter().enumerate() {
        let out = strategy.generate(text, cfg.variants, cfg.seed.wrapping_add(k as u64), models, pcfg)?;
        let batch: Vec<Tensor> = out.into_iter().map(|g| g.image).collect();
        diversity += diversity_score(&Tensor::stack(&batch), oracle)?;
        texts.extend(std::iter::repeat_n(text.clone(), batch.len()));
        images.extend(batch);
    }
    let generated = Tensor::stack(&images);
    let accuracy = attribute_accuracy(&generated, &texts, oracle)?;
    let mut shuffled = texts.clone();
    shuffled.rotate_left(cfg.variants);
    let shuffled_accuracy = attribute_accuracy(&generated, &shuffled, oracle)?;

    let test = ds.indices(Split::Test);
    let real: Vec<usize> = test.iter().copied().take(images.len()).collect();
    let fid_value = fid(&oracle.features(&ds.images(&real)), &oracle.features(&generated))?;

    let (mut preserved, mut slots, mut hits, mut edits) = (0usize, 0usize, 0usize, 0usize);
    for (k, &i) in test.iter().enumerate() {
        if edits == cfg.edits {
            break;
        }
        let (slot, value, text) = EDIT_TARGETS[k % EDIT_TARGETS.len()];
        let sample = &ds.samples[i];
        if sample.attrs.discrete(slot) == Some(value) {
            continue;
        }
        let out = strategy.manipulate(&sample.image, text, models, pcfg, None)?;
        let (before, after) = (oracle.classify_one(&sample.image), oracle.classify_one(&out.image));
        hits += usize::from(after.discrete(slot) == Some(value));
        let flips = attribute_flips(&before, &after);
        for s in Slot::ALL.into_iter().filter(|&s| s != slot) {
            slots += 1;
            preserved += usize::from(!flips[s.index()]);
        }
        edits += 1;
    }
    let report = EvalReport {
        strategy: strategy.name().into(),
        fid: fid_value,
        diversity: diversity / prompts.len() as f64,
        accuracy,
        shuffled_accuracy,
        preservation: preserved as f64 / slots.max(1) as f64,
        edit_success: hits as f64 / edits.max(1) as f64,
        n_samples: images.len(),
        seeds: BTreeMap::from([("eval".to_string(), cfg.seed), ("optim".to_string(), pcfg.optim.seed)]),
        model_hashes: model_hashes(models),
    };
    if !report.all_finite() {
        return Err(Error::InvalidArgument("evaluation produced a non-finite metric".into()));
    }
    Ok(report)
}
