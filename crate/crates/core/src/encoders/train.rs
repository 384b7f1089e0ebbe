use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Adam, Tensor, Var};

use super::losses::{encoder_loss, latent_regression_loss, masked_encoder_loss, masked_input, EncoderNets, EncoderTerms};
use super::mask::{half_mask, sample_mask, Mask};
use super::{critic_loss, Discriminator, EncoderConfig, ImageEncoder, Modality};
use crate::error::{Error, Result};
use crate::features::AttributeClassifier;
use crate::generator::{GeneratorModel, Variant};
use crate::latent::{sample_reference_prior, stack_codes, WCode};
use crate::toyfaces::render::render_centered;
use crate::toyfaces::{Dataset, Part, Split};
use crate::util::{derive_seed, epoch_batches, mean_abs_diff};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    /// Perceptual weight.
    pub lambda1: f64,
    /// Adversarial weight.
    pub lambda2: f64,
    /// Gradient-penalty weight.
    pub lambda3: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub seed: u64,
    /// Required held-out mean abs pixel error, if any.
    pub target_error: Option<f64>,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            lambda1: 5e-5,
            lambda2: 0.1,
            lambda3: 10.0,
            epochs: 4,
            batch_size: 32,
            lr: 1e-3,
            critic_lr: 2e-4,
            seed: 0,
            target_error: Some(0.06),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub terms: EncoderTerms,
    pub critic_loss: f64,
    pub heldout_error: f64,
}

fn modality_inputs(ds: &Dataset, idx: &[usize], modality: Modality) -> Result<Tensor> {
    match modality {
        Modality::Photo => Ok(ds.images(idx)),
        Modality::Sketch => Ok(ds.sketches(idx)),
        Modality::Label => Ok(ds.label_maps(idx)),
        Modality::Masked => Err(Error::InvalidArgument("masked encoders train on synthesized pairs".into())),
    }
}

fn heldout(ds: &Dataset) -> Vec<usize> {
    let t = ds.indices(Split::Test);
    if t.is_empty() {
        ds.indices(Split::Train)
    } else {
        t
    }
}

/// Mean abs pixel error of `G(E(u))` against the paired photos of the test split.
pub fn heldout_reconstruction_error(enc: &ImageEncoder, g: &GeneratorModel, ds: &Dataset) -> Result<f64> {
    let idx = heldout(ds);
    let codes = enc.encode_batch(&modality_inputs(ds, &idx, enc.modality())?)?;
    Ok(mean_abs_diff(&g.synthesize_batch(&codes)?, &ds.images(&idx)))
}

fn check_frozen(name: &str, before: &str, after: &str) -> Result<()> {
    if before != after {
        return Err(Error::FrozenModelChanged(name.into()));
    }
    Ok(())
}

#[allow(clippy::neg_cmp_op_on_partial_ord)] // a NaN error never meets the target
fn check_target(what: &str, value: f64, target: Option<f64>) -> Result<()> {
    match target {
        Some(limit) if !(value <= limit) => Err(Error::NonConvergence {
            what: what.into(),
            metric: "heldout mean abs error".into(),
            value,
            limit,
        }),
        _ => Ok(()),
    }
}

/// Photo encoder trained with the image-space objective against a critic.
pub fn train_inversion_encoder(
    ds: &Dataset,
    g: &GeneratorModel,
    f: &AttributeClassifier,
    cfg: &EncoderTrainConfig,
) -> Result<(ImageEncoder, Vec<EncoderEpochLog>)> {
    train_modality_encoder(Modality::Photo, ds, g, f, cfg)
}

/// Alternating critic and encoder updates; input is the given modality,
/// the target is always the paired photo. `G` and `F` stay frozen.
pub fn train_modality_encoder(
    modality: Modality,
    ds: &Dataset,
    g: &GeneratorModel,
    f: &AttributeClassifier,
    cfg: &EncoderTrainConfig,
) -> Result<(ImageEncoder, Vec<EncoderEpochLog>)> {
    if modality == Modality::Masked {
        return Err(Error::InvalidArgument("masked encoders train on synthesized pairs".into()));
    }
    if ds.resolution() != g.resolution() {
        return Err(Error::Config("dataset and generator resolutions differ".into()));
    }
    let (g_hash, f_hash) = (g.fingerprint(), f.fingerprint());
    let mut enc = ImageEncoder::init(&EncoderConfig::for_generator(g, modality), cfg.seed)?;
    let mut d = Discriminator::init(g.resolution(), 3, derive_seed(cfg.seed, 0, 9));
    let (mut opt_e, mut opt_d) = (Adam::new(cfg.lr), Adam::with_betas(cfg.critic_lr, 0.5, 0.9));
    let train = ds.indices(Split::Train);
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut log = EncoderEpochLog { epoch, ..Default::default() };
        for batch in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let idx: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
            let u = Var::constant(modality_inputs(ds, &idx, modality)?);
            let x = Var::constant(ds.images(&idx));
            let pg = g.bind(false);

            let fake = g.synthesize_var(&pg, &enc.forward(&enc.bind(false), &u)).detach();
            let pd = d.bind(true);
            let (dl, _) = critic_loss(&d, &pd, &x, &fake, cfg.lambda3);
            let grads = pd.grads(&dl);
            opt_d.step(d.params_mut().values_mut(), &grads);

            let (pe, pd, pf) = (enc.bind(true), d.bind(false), f.bind(false));
            let nets = EncoderNets {
                encode: &|v| enc.forward(&pe, v),
                synth: &|w| g.synthesize_var(&pg, w),
                features: &|img| f.features_var(&pf, img),
                critic: &|img| d.forward(&pd, img),
            };
            let (loss, terms) = encoder_loss(&u, &x, &nets, cfg.lambda1, cfg.lambda2);
            if !loss.item().is_finite() {
                return Err(Error::NonFinite { iteration: epoch });
            }
            let grads = pe.grads(&loss);
            opt_e.step(enc.params_mut().values_mut(), &grads);
            let w = idx.len() as f64 / train.len() as f64;
            log.loss += w * loss.item();
            log.critic_loss += w * dl.item();
            log.terms.reconstruction += w * terms.reconstruction;
            log.terms.perceptual += w * terms.perceptual;
            log.terms.adversarial += w * terms.adversarial;
        }
        log.heldout_error = heldout_reconstruction_error(&enc, g, ds)?;
        log::info!("{} encoder epoch {epoch}: loss {:.4} heldout {:.4}", modality.name(), log.loss, log.heldout_error);
        logs.push(log);
    }
    check_frozen("generator", &g_hash, &g.fingerprint())?;
    check_frozen("feature extractor", &f_hash, &f.fingerprint())?;
    let err = logs.last().map_or(f64::NAN, |l| l.heldout_error);
    finish(&mut enc, ds, g, err);
    check_target(&format!("{} encoder", modality.name()), err, cfg.target_error)?;
    Ok((enc, logs))
}

fn finish(enc: &mut ImageEncoder, ds: &Dataset, g: &GeneratorModel, err: f64) {
    enc.provenance.dataset_hash = Some(ds.hash());
    enc.provenance.metrics.insert("heldout_mae".into(), err);
    enc.generator_hash = Some(g.fingerprint());
}

/// Baseline photo encoder trained only to regress sampled codes from their
/// syntheses. Uses the same number of updates as the image-space encoder.
pub fn train_latent_regression_encoder(
    ds: &Dataset,
    g: &GeneratorModel,
    cfg: &EncoderTrainConfig,
) -> Result<(ImageEncoder, Vec<EncoderEpochLog>)> {
    let g_hash = g.fingerprint();
    let mut enc = ImageEncoder::init(&EncoderConfig::for_generator(g, Modality::Photo), cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let n_train = ds.indices(Split::Train).len();
    let steps = n_train.div_ceil(cfg.batch_size.max(1));
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut log = EncoderEpochLog { epoch, ..Default::default() };
        for step in 0..steps {
            let codes = g.sample_prior(cfg.batch_size, derive_seed(cfg.seed, (epoch * steps + step) as u64, 21));
            let z = Var::constant(stack_codes(&codes));
            let (pe, pg) = (enc.bind(true), g.bind(false));
            let loss = latent_regression_loss(&z, &|x| enc.forward(&pe, x), &|w| g.synthesize_var(&pg, w));
            let grads = pe.grads(&loss);
            opt.step(enc.params_mut().values_mut(), &grads);
            log.loss += loss.item() / steps as f64;
        }
        log.heldout_error = heldout_reconstruction_error(&enc, g, ds)?;
        log::info!("latent-regression encoder epoch {epoch}: loss {:.4} heldout {:.4}", log.loss, log.heldout_error);
        logs.push(log);
    }
    check_frozen("generator", &g_hash, &g.fingerprint())?;
    let err = logs.last().map_or(f64::NAN, |l| l.heldout_error);
    finish(&mut enc, ds, g, err);
    Ok((enc, logs))
}

/// Mixture of mask shapes used while training the masked encoder.
/// Weights need not sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSampler {
    /// Observed region is a random rectangle.
    pub rect: f64,
    /// Observed region is everything but a random rectangle.
    pub hole: f64,
    /// Observed region is everything but one face part.
    pub part_hole: f64,
    /// Fully observed.
    pub full: f64,
}

impl Default for MaskSampler {
    fn default() -> Self {
        MaskSampler { rect: 0.3, hole: 0.25, part_hole: 0.3, full: 0.15 }
    }
}

impl MaskSampler {
    /// One mask; `labels` enables the part-region mode.
    pub fn sample(&self, resolution: usize, seed: u64, labels: Option<&[u8]>) -> Mask {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = self.rect + self.hole + self.part_hole + self.full;
        let u = rng.gen::<f64>() * total;
        let rect = sample_mask(resolution, derive_seed(seed, 0, 1));
        if u < self.rect {
            return rect;
        }
        if u < self.rect + self.hole {
            return rect.complement();
        }
        if u < self.rect + self.hole + self.part_hole {
            if let Some(labels) = labels {
                let parts: Vec<Part> = [Part::Hair, Part::Glasses, Part::Mouth, Part::Hat, Part::Skin]
                    .into_iter()
                    .filter(|p| labels.contains(&p.id()))
                    .collect();
                if !parts.is_empty() {
                    let part = parts[rng.gen_range(0..parts.len())];
                    return Mask::from_part(labels, resolution, part).expect("label map matches resolution").complement();
                }
            }
            return rect.complement();
        }
        Mask::ones(resolution)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskedTrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub sampler: MaskSampler,
    /// Required error under a 50% mask, if any.
    pub target_error: Option<f64>,
    /// Held-out synthesized pairs used for reporting.
    pub eval_samples: usize,
}

impl Default for MaskedTrainConfig {
    fn default() -> Self {
        MaskedTrainConfig {
            lambda1: 5e-5,
            lambda2: 2.0,
            steps: 1500,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            sampler: MaskSampler::default(),
            target_error: Some(0.10),
            eval_samples: 200,
        }
    }
}

fn synth_pairs(g: &GeneratorModel, n: usize, seed: u64) -> (Vec<WCode>, Vec<Option<Vec<u8>>>) {
    match g.config().variant {
        Variant::Reference => sample_reference_prior(g.codebook(), g.layers(), n, seed)
            .into_iter()
            .map(|(a, w)| (w, render_centered(&a, g.resolution()).ok().map(|(_, l)| l)))
            .unzip(),
        Variant::Adversarial => (g.sample_prior(n, seed), vec![None; n]),
    }
}

/// Mean abs error of `G(E_m(x ⊙ m, m))` against `x = G(z)` for one fixed mask.
pub fn masked_recovery_error(enc: &ImageEncoder, g: &GeneratorModel, codes: &[WCode], m: &Mask) -> Result<f64> {
    let x = g.synthesize_batch(codes)?;
    let mt = Var::constant(Tensor::stack(&vec![m.to_tensor(); codes.len()]));
    let xm = masked_input(&Var::constant(x.clone()), &mt);
    let rec = g.synthesize_batch(&enc.encode_batch(xm.value())?)?;
    Ok(mean_abs_diff(&rec, &x))
}

/// Masked encoder trained on synthesized pairs `x = G(z)` with sampled masks.
pub fn train_masked_encoder(
    g: &GeneratorModel,
    f: &AttributeClassifier,
    cfg: &MaskedTrainConfig,
) -> Result<(ImageEncoder, Vec<EncoderEpochLog>)> {
    let (g_hash, f_hash) = (g.fingerprint(), f.fingerprint());
    let r = g.resolution();
    let mut enc = ImageEncoder::init(&EncoderConfig::for_generator(g, Modality::Masked), cfg.seed)?;
    let mut opt = Adam::new(cfg.lr);
    let (eval_codes, _) = synth_pairs(g, cfg.eval_samples.max(1), derive_seed(cfg.seed, 1, 77));
    let mut logs = Vec::new();
    let report_every = (cfg.steps / 10).max(1);
    let mut running = 0.0;
    for step in 0..cfg.steps {
        let (codes, labels) = synth_pairs(g, cfg.batch_size, derive_seed(cfg.seed, step as u64, 31));
        let masks: Vec<Tensor> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| cfg.sampler.sample(r, derive_seed(cfg.seed, step as u64, 1000 + i as u64), l.as_deref()).to_tensor())
            .collect();
        let z = Var::constant(stack_codes(&codes));
        let m = Var::constant(Tensor::stack(&masks));
        let (pe, pg, pf) = (enc.bind(true), g.bind(false), f.bind(false));
        let nets = EncoderNets {
            encode: &|v| enc.forward(&pe, v),
            synth: &|w| g.synthesize_var(&pg, w),
            features: &|img| f.features_var(&pf, img),
            critic: &|_| unreachable!("masked objective has no critic"),
        };
        let (loss, _) = masked_encoder_loss(&z, &m, &nets, cfg.lambda1, cfg.lambda2);
        if !loss.item().is_finite() {
            return Err(Error::NonFinite { iteration: step });
        }
        let grads = pe.grads(&loss);
        opt.step(enc.params_mut().values_mut(), &grads);
        running += loss.item();
        if (step + 1) % report_every == 0 || step + 1 == cfg.steps {
            let err = masked_recovery_error(&enc, g, &eval_codes, &half_mask(r))?;
            let seen = (step % report_every) + 1;
            log::info!("masked encoder step {}: loss {:.4} half-mask error {:.4}", step + 1, running / seen as f64, err);
            logs.push(EncoderEpochLog { epoch: step + 1, loss: running / seen as f64, heldout_error: err, ..Default::default() });
            running = 0.0;
        }
    }
    check_frozen("generator", &g_hash, &g.fingerprint())?;
    check_frozen("feature extractor", &f_hash, &f.fingerprint())?;
    let err = logs.last().map_or(f64::NAN, |l| l.heldout_error);
    enc.provenance.metrics.insert("half_mask_mae".into(), err);
    enc.generator_hash = Some(g.fingerprint());
    check_target("masked encoder", err, cfg.target_error)?;
    Ok((enc, logs))
}
