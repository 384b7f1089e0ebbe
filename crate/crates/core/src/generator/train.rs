use serde::{Deserialize, Serialize};
use wspace_tensor::{Adam, Tensor, Var};

use super::{GeneratorConfig, GeneratorModel, Variant};
use crate::encoders::{critic_loss, Discriminator};
use crate::error::{Error, Result};
use crate::latent::{stack_codes, JITTER_SIGMA};
use crate::toyfaces::{Dataset, Split};
use crate::util::{derive_seed, epoch_batches, mean_abs_diff};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceTrainConfig {
    pub max_epochs: usize,
    /// Train at least this many epochs before the target can stop training.
    pub min_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop once held-out mean abs pixel error reaches this.
    pub target_error: f64,
    pub seed: u64,
}

impl Default for ReferenceTrainConfig {
    fn default() -> Self {
        ReferenceTrainConfig { max_epochs: 40, min_epochs: 20, batch_size: 32, lr: 1e-3, target_error: 0.048, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_error: f64,
}

fn heldout_indices(ds: &Dataset) -> Vec<usize> {
    let test = ds.indices(Split::Test);
    if test.is_empty() {
        ds.indices(Split::Train)
    } else {
        test
    }
}

/// Mean abs pixel error of `G(codebook(attrs))` against the rendered images.
pub(crate) fn reference_error(g: &GeneratorModel, ds: &Dataset, idx: &[usize]) -> Result<f64> {
    let codes: Vec<_> = idx.iter().map(|&i| g.codebook().embed(&ds.samples[i].attrs, g.layers())).collect();
    Ok(mean_abs_diff(&g.synthesize_batch(&codes)?, &ds.images(idx)))
}

/// Supervised decoder fit: codebook code of each sample's attributes (with
/// fresh jitter every epoch) regressed onto its image.
pub fn train_reference_decoder(
    ds: &Dataset,
    gcfg: &GeneratorConfig,
    tcfg: &ReferenceTrainConfig,
) -> Result<(GeneratorModel, Vec<EpochLog>)> {
    if gcfg.variant != Variant::Reference {
        return Err(Error::Config("train_reference_decoder needs the reference variant".into()));
    }
    if ds.resolution() != gcfg.resolution {
        return Err(Error::Config(format!("dataset resolution {} != generator {}", ds.resolution(), gcfg.resolution)));
    }
    let mut g = GeneratorModel::init(gcfg, tcfg.seed)?;
    let train = ds.indices(Split::Train);
    let held = heldout_indices(ds);
    let mut opt = Adam::new(tcfg.lr);
    let mut logs = Vec::new();
    for epoch in 0..tcfg.max_epochs {
        let mut total = 0.0;
        for batch in epoch_batches(train.len(), tcfg.batch_size, tcfg.seed, epoch) {
            let idx: Vec<usize> = batch.iter().map(|&b| train[b]).collect();
            let codes: Vec<_> = idx
                .iter()
                .map(|&i| {
                    let noise = derive_seed(tcfg.seed, (epoch * ds.samples.len() + i) as u64, 5);
                    g.codebook().embed_jittered(&ds.samples[i].attrs, g.layers(), JITTER_SIGMA, noise)
                })
                .collect();
            let x = Var::constant(ds.images(&idx));
            let p = g.bind(true);
            let y = g.synthesize_var(&p, &Var::constant(stack_codes(&codes)));
            let loss = y.sub(&x).square().mean();
            total += loss.item() * idx.len() as f64;
            let grads = p.grads(&loss);
            opt.step(g.params_mut().values_mut(), &grads);
        }
        let heldout_error = reference_error(&g, ds, &held)?;
        let log = EpochLog { epoch, loss: total / train.len().max(1) as f64, heldout_error };
        log::info!("generator epoch {epoch}: loss {:.5} heldout {:.4}", log.loss, heldout_error);
        logs.push(log);
        if epoch + 1 >= tcfg.min_epochs && heldout_error <= tcfg.target_error {
            g.provenance.dataset_hash = Some(ds.hash());
            g.provenance.metrics.insert("heldout_mae".into(), heldout_error);
            g.provenance.metrics.insert("epochs".into(), (epoch + 1) as f64);
            return Ok((g, logs));
        }
    }
    Err(Error::NonConvergence {
        what: "reference decoder".into(),
        metric: "heldout mean abs error".into(),
        value: logs.last().map_or(f64::NAN, |l| l.heldout_error),
        limit: tcfg.target_error,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Gradient-penalty weight on real samples.
    pub penalty: f64,
    pub seed: u64,
}

impl Default for AdversarialTrainConfig {
    fn default() -> Self {
        AdversarialTrainConfig { steps: 400, batch_size: 32, lr: 5e-4, penalty: 10.0, seed: 0 }
    }
}

/// Alternating critic/generator updates of `f` and `G` on the training images.
///
/// Returns the model and per-step `(critic loss, generator loss)`.
pub fn train_adversarial_generator(
    ds: &Dataset,
    gcfg: &GeneratorConfig,
    tcfg: &AdversarialTrainConfig,
) -> Result<(GeneratorModel, Vec<(f64, f64)>)> {
    if gcfg.variant != Variant::Adversarial {
        return Err(Error::Config("train_adversarial_generator needs the adversarial variant".into()));
    }
    let mut g = GeneratorModel::init(gcfg, tcfg.seed)?;
    let mut d = Discriminator::init(gcfg.resolution, 3, derive_seed(tcfg.seed, 0, 9));
    let train = ds.indices(Split::Train);
    let (mut opt_g, mut opt_d) = (Adam::with_betas(tcfg.lr, 0.5, 0.9), Adam::with_betas(tcfg.lr, 0.5, 0.9));
    let mut log = Vec::with_capacity(tcfg.steps);
    let mut batches = Vec::new();
    let mut epoch = 0;
    for step in 0..tcfg.steps {
        if batches.is_empty() {
            batches = epoch_batches(train.len(), tcfg.batch_size, tcfg.seed, epoch);
            batches.reverse();
            epoch += 1;
        }
        let idx: Vec<usize> = batches.pop().unwrap().iter().map(|&b| train[b]).collect();
        let n = idx.len();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(derive_seed(tcfg.seed, step as u64, 11));
        let z = Var::constant(Tensor::randn(vec![n, gcfg.z_dim], 1.0, &mut rng));

        let fake = {
            let pg = g.bind(false);
            g.synthesize_var(&pg, &g.map_var(&pg, &z)).detach()
        };
        let pd = d.bind(true);
        let real = Var::leaf(ds.images(&idx));
        let (dl, _) = critic_loss(&d, &pd, &real, &fake, tcfg.penalty);
        let grads = pd.grads(&dl);
        opt_d.step(d.params_mut().values_mut(), &grads);

        let pg = g.bind(true);
        let pd = d.bind(false);
        let fake = g.synthesize_var(&pg, &g.map_var(&pg, &z));
        let gl = d.forward(&pd, &fake).mean().neg();
        let grads = pg.grads(&gl);
        opt_g.step(g.params_mut().values_mut(), &grads);
        if !dl.item().is_finite() || !gl.item().is_finite() {
            return Err(Error::NonConvergence {
                what: "adversarial generator".into(),
                metric: "loss".into(),
                value: f64::NAN,
                limit: 0.0,
            });
        }
        log.push((dl.item(), gl.item()));
    }
    g.provenance.dataset_hash = Some(ds.hash());
    Ok((g, log))
}
