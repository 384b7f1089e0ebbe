//! The attribute classifier: test oracle for every slot and, through its
//! third conv block, the perceptual feature network `F`.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Adam, Bound, Linear, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Persist};
use crate::error::{Error, Result};
use crate::generator::Provenance;
use crate::nets::{flatten_batch, ConvStack};
use crate::toyfaces::render::render_jitter_mean;
use crate::toyfaces::{AttributeVector, Dataset, Gender, Glasses, HairColor, HairLength, Hat, SkinTone, Slot, Smile, Split};
use crate::util::{derive_seed, epoch_batches};

/// Hue predictions closer than this (on the unit circle of hues) count as equal.
pub const HUE_TOLERANCE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub widths: Vec<usize>,
    /// Zero-based conv block whose activations are the features.
    pub tap_block: usize,
    pub dense: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { resolution: 32, widths: vec![16, 32, 32, 64], tap_block: 2, dense: 128 }
    }
}

/// Differentiable outputs for a batch.
pub struct ClassifierOut {
    /// `[n, tap_dim]`
    pub tap: Var,
    /// Per discrete slot, `[n, k]` logits.
    pub logits: Vec<Var>,
    /// `[n, 2]` regression of `(cos 2πh, sin 2πh)`.
    pub hue: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub attrs: AttributeVector,
    /// Softmax probabilities per discrete slot, in `Slot::DISCRETE` order.
    pub probs: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    config: ClassifierConfig,
    params: ParamStore,
    stack: ConvStack,
    fc: Linear,
    heads: Linear,
    pub provenance: Provenance,
}

fn head_sizes() -> Vec<usize> {
    Slot::DISCRETE.iter().map(|s| s.cardinality().unwrap()).collect()
}

pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Which slots differ between two attribute vectors.
pub fn attribute_flips(a: &AttributeVector, b: &AttributeVector) -> [bool; 8] {
    let mut out = [false; 8];
    for slot in Slot::ALL {
        out[slot.index()] = match (a.discrete(slot), b.discrete(slot)) {
            (Some(x), Some(y)) => x != y,
            _ => circular_distance(a.background_hue, b.background_hue) > HUE_TOLERANCE,
        };
    }
    out
}

/// Number of slots on which two attribute vectors agree.
pub fn slot_agreement(a: &AttributeVector, b: &AttributeVector) -> usize {
    attribute_flips(a, b).iter().filter(|f| !**f).count()
}

fn attrs_from_indices(v: &[usize], hue: f64) -> AttributeVector {
    AttributeVector {
        gender_presentation: Gender::ALL[v[0]],
        skin_tone: SkinTone::ALL[v[1]],
        hair_color: HairColor::ALL[v[2]],
        hair_length: HairLength::ALL[v[3]],
        glasses: Glasses::ALL[v[4]],
        smile: Smile::ALL[v[5]],
        hat: Hat::ALL[v[6]],
        background_hue: hue,
    }
}

fn argmax(row: &[f64]) -> usize {
    (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
}

impl AttributeClassifier {
    pub fn init(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        crate::toyfaces::check_resolution(config.resolution)?;
        if config.widths.len() < 2 || config.tap_block >= config.widths.len() - 1 {
            return Err(Error::Config("classifier needs a tap block before the last conv block".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stack = ConvStack::new(&mut params, "cls", 3, &config.widths, &mut rng);
        let fc = Linear::new(&mut params, "cls.fc", stack.out_dim(config.resolution), config.dense, &mut rng);
        let heads = Linear::with_gain(&mut params, "cls.heads", config.dense, head_sizes().iter().sum::<usize>() + 2, 0.5, &mut rng);
        Ok(AttributeClassifier { config: config.clone(), params, stack, fc, heads, provenance: Provenance { seed, ..Default::default() } })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    /// Flattened size of the feature tap.
    pub fn feature_dim(&self) -> usize {
        let r = self.config.resolution >> (self.config.tap_block + 1);
        r * r * self.config.widths[self.config.tap_block]
    }

    /// Full forward pass on `[n, R, R, 3]`.
    pub fn forward(&self, p: &Bound, x: &Var) -> ClassifierOut {
        let acts = self.stack.forward_all(p, x);
        let tap = flatten_batch(&acts[self.config.tap_block]);
        let h = self.fc.forward(p, &flatten_batch(acts.last().unwrap())).silu();
        let out = self.heads.forward(p, &h);
        let mut logits = Vec::new();
        let mut off = 0;
        for k in head_sizes() {
            logits.push(out.narrow(1, off, k));
            off += k;
        }
        ClassifierOut { tap, logits, hue: out.narrow(1, off, 2) }
    }

    /// Tap activations only; skips the later blocks.
    pub fn features_var(&self, p: &Bound, x: &Var) -> Var {
        let mut h = x.clone();
        for c in &self.stack.convs[..=self.config.tap_block] {
            h = c.forward(p, &h).silu();
        }
        flatten_batch(&h)
    }

    /// `[n, feature_dim]` features of `[n, R, R, 3]` images.
    pub fn features(&self, images: &Tensor) -> Tensor {
        let p = self.bind(false);
        let parts: Vec<Tensor> =
            images.unstack().chunks(256).map(|c| self.features_var(&p, &Var::constant(Tensor::stack(c))).value().clone()).collect();
        let rows: Vec<Tensor> = parts.iter().flat_map(|t| t.unstack()).collect();
        Tensor::stack(&rows)
    }

    /// Feature vector of one `[R, R, 3]` image.
    pub fn extract_features(&self, image: &Tensor) -> Vec<f64> {
        self.features(&Tensor::stack(std::slice::from_ref(image))).to_vec()
    }

    pub fn predict(&self, images: &Tensor) -> Vec<Prediction> {
        let p = self.bind(false);
        let mut out = Vec::with_capacity(images.shape()[0]);
        for chunk in images.unstack().chunks(256) {
            let o = self.forward(&p, &Var::constant(Tensor::stack(chunk)));
            let probs: Vec<Tensor> = o.logits.iter().map(|l| l.softmax().value().clone()).collect();
            for i in 0..chunk.len() {
                let rows: Vec<Vec<f64>> = probs
                    .iter()
                    .map(|t| {
                        let k = t.shape()[1];
                        t.data()[i * k..(i + 1) * k].to_vec()
                    })
                    .collect();
                let idx: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
                let h = o.hue.value().data();
                let hue = (h[2 * i + 1].atan2(h[2 * i]) / TAU).rem_euclid(1.0) % 1.0;
                out.push(Prediction { attrs: attrs_from_indices(&idx, hue), probs: rows });
            }
        }
        out
    }

    pub fn classify(&self, images: &Tensor) -> Vec<AttributeVector> {
        self.predict(images).into_iter().map(|p| p.attrs).collect()
    }

    pub fn classify_one(&self, image: &Tensor) -> AttributeVector {
        self.classify(&Tensor::stack(std::slice::from_ref(image))).remove(0)
    }
}

impl Persist for AttributeClassifier {
    const KIND: &'static str = "classifier";

    fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            dataset_hash: self.provenance.dataset_hash.clone(),
            seed: self.provenance.seed,
            metrics: self.provenance.metrics.clone(),
            ..Default::default()
        };
        Checkpoint::new(Self::KIND, meta, &self.params)
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Self::KIND)?;
        let mut m = AttributeClassifier::init(&ckpt.config()?, ckpt.meta.seed)?;
        ckpt.fill(&mut m.params)?;
        m.provenance =
            Provenance { dataset_hash: ckpt.meta.dataset_hash.clone(), seed: ckpt.meta.seed, metrics: ckpt.meta.metrics.clone() };
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureTrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Every slot must reach this held-out accuracy.
    pub target_accuracy: f64,
    /// Probability of blending a training image toward the mean of its
    /// jittered renders, so the oracle also reads the smoother outputs of a
    /// decoder.
    pub smooth_prob: f64,
    /// Standard deviation of additive pixel noise during training.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        FeatureTrainConfig { max_epochs: 40, batch_size: 32, lr: 2e-3, target_accuracy: 0.985, smooth_prob: 0.5, noise_std: 0.02, seed: 0 }
    }
}

fn augment(batch: &Tensor, smooth: &[&Tensor], cfg: &FeatureTrainConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let imgs: Vec<Tensor> = batch
        .unstack()
        .into_iter()
        .zip(smooth)
        .map(|(img, m)| {
            let mut d = img.to_vec();
            if rng.gen::<f64>() < cfg.smooth_prob {
                let a: f64 = rng.gen();
                d.iter_mut().zip(m.data()).for_each(|(x, y)| *x = (1.0 - a) * *x + a * y);
            }
            if cfg.noise_std > 0.0 {
                let n = Tensor::randn(vec![d.len()], cfg.noise_std, &mut rng);
                d.iter_mut().zip(n.data()).for_each(|(x, e)| *x = (*x + e).clamp(0.0, 1.0));
            }
            Tensor::new(img.shape().to_vec(), d)
        })
        .collect();
    Tensor::stack(&imgs)
}

/// One-hot targets per discrete slot and hue targets for a batch.
fn targets(attrs: &[AttributeVector]) -> (Vec<Tensor>, Tensor) {
    let n = attrs.len();
    let onehots = Slot::DISCRETE
        .iter()
        .map(|&s| {
            let k = s.cardinality().unwrap();
            let mut d = vec![0.0; n * k];
            for (i, a) in attrs.iter().enumerate() {
                d[i * k + a.discrete(s).unwrap()] = 1.0;
            }
            Tensor::new(vec![n, k], d)
        })
        .collect();
    let hue = attrs.iter().flat_map(|a| [(TAU * a.background_hue).cos(), (TAU * a.background_hue).sin()]).collect();
    (onehots, Tensor::new(vec![n, 2], hue))
}

/// Per-slot accuracy of `cls` on the given samples, in `Slot::ALL` order.
pub fn per_slot_accuracy(cls: &AttributeClassifier, images: &Tensor, truth: &[AttributeVector]) -> [f64; 8] {
    let pred = cls.classify(images);
    let mut acc = [0.0; 8];
    for (p, t) in pred.iter().zip(truth) {
        for (i, f) in attribute_flips(p, t).iter().enumerate() {
            if !f {
                acc[i] += 1.0;
            }
        }
    }
    acc.map(|a| a / truth.len().max(1) as f64)
}

/// Train the classifier on the training split until every slot reaches
/// the target held-out accuracy.
pub fn train_feature_extractor(ds: &Dataset, cfg: &FeatureTrainConfig, ccfg: &ClassifierConfig) -> Result<AttributeClassifier> {
    if ds.resolution() != ccfg.resolution {
        return Err(Error::Config(format!("dataset resolution {} != classifier {}", ds.resolution(), ccfg.resolution)));
    }
    let mut cls = AttributeClassifier::init(ccfg, cfg.seed)?;
    let train = ds.indices(Split::Train);
    let mut held = ds.indices(Split::Test);
    if held.is_empty() {
        held = train.clone();
    }
    let held_images = ds.images(&held);
    let held_attrs: Vec<AttributeVector> = held.iter().map(|&i| ds.samples[i].attrs).collect();
    let smooth: Vec<Tensor> =
        train.iter().map(|&i| render_jitter_mean(&ds.samples[i].attrs, ds.resolution())).collect::<Result<_>>()?;
    let mut opt = Adam::new(cfg.lr);
    let mut last = [0.0; 8];
    for epoch in 0..cfg.max_epochs {
        for (b, batch) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let idx: Vec<usize> = batch.iter().map(|&j| train[j]).collect();
            let attrs: Vec<AttributeVector> = idx.iter().map(|&i| ds.samples[i].attrs).collect();
            let means: Vec<&Tensor> = batch.iter().map(|&j| &smooth[j]).collect();
            let x = augment(&ds.images(&idx), &means, cfg, derive_seed(cfg.seed, epoch as u64, b as u64));
            let (onehots, hue_t) = targets(&attrs);
            let p = cls.bind(true);
            let out = cls.forward(&p, &Var::constant(x));
            let n = idx.len() as f64;
            let mut loss = out.hue.sub(&Var::constant(hue_t)).square().sum().mul_scalar(1.0 / n);
            for (l, t) in out.logits.iter().zip(onehots) {
                loss = loss.add(&l.log_softmax().mul(&Var::constant(t)).sum().mul_scalar(-1.0 / n));
            }
            let grads = p.grads(&loss);
            opt.step(cls.params.values_mut(), &grads);
        }
        last = per_slot_accuracy(&cls, &held_images, &held_attrs);
        log::info!("classifier epoch {epoch}: heldout per-slot accuracy {last:?}");
        if last.iter().all(|&a| a >= cfg.target_accuracy) {
            cls.provenance.dataset_hash = Some(ds.hash());
            for (s, a) in Slot::ALL.iter().zip(last) {
                cls.provenance.metrics.insert(format!("accuracy.{}", s.name()), a);
            }
            return Ok(cls);
        }
    }
    Err(Error::NonConvergence {
        what: "attribute classifier".into(),
        metric: "min per-slot accuracy".into(),
        value: last.iter().cloned().fold(f64::INFINITY, f64::min),
        limit: cfg.target_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_distance_wraps() {
        assert!((circular_distance(0.95, 0.05) - 0.1).abs() < 1e-12);
        assert_eq!(circular_distance(0.3, 0.3), 0.0);
        assert!((circular_distance(0.0, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn shapes_and_feature_dim() {
        let cls = AttributeClassifier::init(&ClassifierConfig::default(), 0).unwrap();
        assert_eq!(cls.feature_dim(), 512);
        let x = Tensor::zeros(vec![2, 32, 32, 3]);
        let out = cls.forward(&cls.bind(false), &Var::constant(x.clone()));
        assert_eq!(out.tap.shape(), &[2, 512]);
        assert_eq!(out.logits.len(), 7);
        assert_eq!(out.logits[2].shape(), &[2, 4]);
        assert_eq!(cls.features(&x).shape(), &[2, 512]);
        assert_eq!(cls.features(&x), out.tap.value().clone());
    }
}
