//! Image-side encoders into W, the critic used to train them, and masks.

mod losses;
mod mask;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Bound, Linear, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Persist};
use crate::error::{Error, Result};
use crate::generator::{GeneratorModel, Provenance};
use crate::latent::{unstack_codes, WCode};
use crate::nets::{flatten_batch, ConvStack};
use crate::toyfaces::Part;

pub use losses::{
    batch_sq_dist, discriminator_loss, encoder_loss, latent_regression_loss, masked_encoder_loss, masked_input, CriticTerms,
    EncoderNets, EncoderTerms, MaskedTerms, VarFn,
};
pub use mask::{half_mask, sample_mask, Mask};
pub use train::{
    heldout_reconstruction_error, masked_recovery_error, train_inversion_encoder, train_latent_regression_encoder, train_masked_encoder,
    train_modality_encoder, EncoderEpochLog, EncoderTrainConfig, MaskSampler, MaskedTrainConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Photo,
    Sketch,
    Label,
    Masked,
}

impl Modality {
    pub fn in_channels(self) -> usize {
        match self {
            Modality::Photo => 3,
            Modality::Sketch => 1,
            Modality::Label => Part::COUNT,
            Modality::Masked => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Photo => "photo",
            Modality::Sketch => "sketch",
            Modality::Label => "label",
            Modality::Masked => "masked",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub layers: usize,
    pub channels: usize,
    pub widths: Vec<usize>,
    pub hidden: usize,
    pub modality: Modality,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { resolution: 32, layers: 8, channels: 32, widths: vec![16, 32, 64, 64], hidden: 256, modality: Modality::Photo }
    }
}

impl EncoderConfig {
    /// Matching shapes for a generator.
    pub fn for_generator(g: &GeneratorModel, modality: Modality) -> Self {
        EncoderConfig { resolution: g.resolution(), layers: g.layers(), channels: g.channels(), modality, ..Default::default() }
    }
}

/// Conv network from an `R×R×c` input to an `L×C` code.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    config: EncoderConfig,
    params: ParamStore,
    stack: ConvStack,
    fc1: Linear,
    fc2: Linear,
    pub provenance: Provenance,
    /// Fingerprint of the generator this encoder was trained against.
    pub generator_hash: Option<String>,
}

impl ImageEncoder {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        crate::toyfaces::check_resolution(config.resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stack = ConvStack::new(&mut params, "enc", config.modality.in_channels(), &config.widths, &mut rng);
        let fc1 = Linear::new(&mut params, "enc.fc1", stack.out_dim(config.resolution), config.hidden, &mut rng);
        let fc2 = Linear::with_gain(&mut params, "enc.fc2", config.hidden, config.layers * config.channels, 0.3, &mut rng);
        Ok(ImageEncoder {
            config: config.clone(),
            params,
            stack,
            fc1,
            fc2,
            provenance: Provenance { seed, ..Default::default() },
            generator_hash: None,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn modality(&self) -> Modality {
        self.config.modality
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    /// `[n, R, R, c]` → `[n, L, C]`
    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let n = x.shape()[0];
        let h = flatten_batch(&self.stack.forward(p, x));
        let h = self.fc1.forward(p, &h).silu();
        self.fc2.forward(p, &h).reshape(vec![n, self.config.layers, self.config.channels])
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let r = self.config.resolution;
        let c = self.config.modality.in_channels();
        let s = x.shape();
        if s.len() != 4 || s[1..] != [r, r, c] {
            return Err(Error::shape(["n", &r.to_string(), &r.to_string(), &c.to_string()], s));
        }
        Ok(())
    }

    /// Codes for a batch `[n, R, R, c]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Vec<WCode>> {
        self.check_input(x)?;
        let p = self.bind(false);
        let mut out = Vec::with_capacity(x.shape()[0]);
        for chunk in x.unstack().chunks(256) {
            out.extend(unstack_codes(self.forward(&p, &Var::constant(Tensor::stack(chunk))).value()));
        }
        Ok(out)
    }

    /// One forward pass on a single `[R, R, c]` input.
    pub fn invert(&self, x: &Tensor) -> Result<WCode> {
        Ok(self.encode_batch(&Tensor::stack(std::slice::from_ref(x)))?.remove(0))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderExtra {
    generator_hash: Option<String>,
}

impl Persist for ImageEncoder {
    const KIND: &'static str = "encoder";

    fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            config: serde_json::to_value(&self.config).expect("config serializes"),
            dataset_hash: self.provenance.dataset_hash.clone(),
            seed: self.provenance.seed,
            metrics: self.provenance.metrics.clone(),
            extra: serde_json::to_value(EncoderExtra { generator_hash: self.generator_hash.clone() }).expect("extra serializes"),
            ..Default::default()
        };
        Checkpoint::new(Self::KIND, meta, &self.params)
    }

    fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_kind(Self::KIND)?;
        let mut m = ImageEncoder::init(&ckpt.config()?, ckpt.meta.seed)?;
        ckpt.fill(&mut m.params)?;
        m.provenance =
            Provenance { dataset_hash: ckpt.meta.dataset_hash.clone(), seed: ckpt.meta.seed, metrics: ckpt.meta.metrics.clone() };
        let extra: EncoderExtra = serde_json::from_value(ckpt.meta.extra.clone())?;
        m.generator_hash = extra.generator_hash;
        Ok(m)
    }
}

/// Conv critic from an image to one unbounded score per sample.
#[derive(Clone, Debug)]
pub struct Discriminator {
    params: ParamStore,
    stack: ConvStack,
    fc: Linear,
}

impl Discriminator {
    pub fn init(resolution: usize, in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stack = ConvStack::new(&mut params, "disc", in_channels, &[16, 32, 64], &mut rng);
        let fc = Linear::with_gain(&mut params, "disc.fc", stack.out_dim(resolution), 1, 0.5, &mut rng);
        Discriminator { params, stack, fc }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    /// `[n, R, R, c]` → `[n]`
    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let n = x.shape()[0];
        self.fc.forward(p, &flatten_batch(&self.stack.forward(p, x))).reshape(vec![n])
    }
}

/// Critic objective for a concrete discriminator.
pub fn critic_loss(d: &Discriminator, p: &Bound, real: &Var, fake: &Var, lambda3: f64) -> (Var, CriticTerms) {
    discriminator_loss(real, fake, &|x| d.forward(p, x), lambda3)
}
