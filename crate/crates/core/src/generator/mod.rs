//! The fixed generator: an optional mapping network `f: Z → W` and a
//! layer-modulated synthesis network `G: W → image`.

mod train;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Bound, Linear, ParamStore, Tensor, Var};

use crate::checkpoint::{Checkpoint, CheckpointMeta, Persist};
use crate::error::{Error, Result};
use crate::latent::{num_layers, sample_reference_prior, stack_codes, unstack_codes, Codebook, WCode, ZCode};
use crate::nets::ModulatedMlp;
use crate::toyfaces::Slot;
use crate::util::derive_seed;

pub use train::{train_adversarial_generator, train_reference_decoder, AdversarialTrainConfig, EpochLog, ReferenceTrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Reference,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub resolution: usize,
    pub layers: usize,
    pub channels: usize,
    pub z_dim: usize,
    pub variant: Variant,
    /// Width of the synthesis MLP.
    pub hidden: usize,
    pub codebook_seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 32,
            layers: 8,
            channels: 32,
            z_dim: 64,
            variant: Variant::Reference,
            hidden: 256,
            codebook_seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        crate::toyfaces::check_resolution(self.resolution)?;
        let l = num_layers(self.resolution)?;
        if self.layers != l {
            return Err(Error::Config(format!("layers = {} but resolution {} needs {l}", self.layers, self.resolution)));
        }
        if self.layers < Slot::ALL.len() {
            return Err(Error::Config("need one layer per attribute slot".into()));
        }
        if self.variant == Variant::Reference && (!self.z_dim.is_multiple_of(self.layers) || self.z_dim / self.layers < 4) {
            return Err(Error::Config(format!("z_dim {} must split into {} blocks of >= 4", self.z_dim, self.layers)));
        }
        if self.hidden == 0 || self.channels == 0 {
            return Err(Error::Config("hidden and channels must be positive".into()));
        }
        Ok(())
    }

    /// Width of each layer's block of `z` in the reference mapping.
    pub fn z_block(&self) -> usize {
        self.z_dim / self.layers
    }
}

#[derive(Clone, Debug)]
struct MappingNet {
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_hash: Option<String>,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    params: ParamStore,
    net: ModulatedMlp,
    mapping: Option<MappingNet>,
    codebook: Codebook,
    pub provenance: Provenance,
}

impl GeneratorModel {
    /// Freshly initialized weights for `config`.
    pub fn init(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config;
        let net = ModulatedMlp::new(&mut params, "synth", c.layers, c.channels, c.hidden, c.resolution, &mut rng);
        let mapping = (c.variant == Variant::Adversarial).then(|| MappingNet {
            l1: Linear::new(&mut params, "map.l1", c.z_dim, c.hidden, &mut rng),
            l2: Linear::new(&mut params, "map.l2", c.hidden, c.hidden, &mut rng),
            l3: Linear::with_gain(&mut params, "map.l3", c.hidden, c.channels, 0.5, &mut rng),
        });
        Ok(GeneratorModel {
            config: c.clone(),
            params,
            net,
            mapping,
            codebook: Codebook::new(c.channels, c.codebook_seed)?,
            provenance: Provenance { seed, ..Default::default() },
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn layers(&self) -> usize {
        self.config.layers
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// SHA-256 of all weights; unchanged by anything downstream of training.
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        self.params.bind(trainable)
    }

    /// `f(z)`. Reference: block `i` of `z` holds mixture weights over the
    /// codebook vectors of slot `i`. Adversarial: MLP output copied to every layer.
    pub fn map_latent(&self, z: &ZCode) -> Result<WCode> {
        if z.dim() != self.config.z_dim {
            return Err(Error::shape([self.config.z_dim], [z.dim()]));
        }
        let (l, c) = (self.layers(), self.channels());
        match &self.mapping {
            None => {
                let b = self.config.z_block();
                let mut d = vec![0.0; l * c];
                for slot in Slot::ALL {
                    let i = slot.index();
                    let row = self.codebook.mixture(slot, &z.0[i * b..(i + 1) * b]);
                    d[i * c..(i + 1) * c].copy_from_slice(&row);
                }
                WCode::new(Tensor::new(vec![l, c], d))
            }
            Some(_) => {
                let zt = Var::constant(Tensor::new(vec![1, z.dim()], z.0.clone()));
                let w = self.map_var(&self.bind(false), &zt);
                WCode::new(w.value().reshape(vec![l, c]))
            }
        }
    }

    /// Adversarial mapping on a batch `[n, D_z]` → `[n, L, C]`.
    pub(crate) fn map_var(&self, p: &Bound, z: &Var) -> Var {
        let m = self.mapping.as_ref().expect("mapping network exists only for the adversarial variant");
        let n = z.shape()[0];
        let h = m.l2.forward(p, &m.l1.forward(p, z).silu()).silu();
        m.l3.forward(p, &h).reshape(vec![n, 1, self.channels()]).broadcast_to(&[n, self.layers(), self.channels()])
    }

    /// Prior draws in W. Reference: codebook embedding of random attributes
    /// plus jitter. Adversarial: `f(z)` with `z ~ N(0, I)`.
    pub fn sample_prior(&self, n: usize, seed: u64) -> Vec<WCode> {
        match self.config.variant {
            Variant::Reference => sample_reference_prior(&self.codebook, self.layers(), n, seed).into_iter().map(|(_, w)| w).collect(),
            Variant::Adversarial => (0..n)
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 3));
                    let z = Tensor::randn(vec![self.config.z_dim], 1.0, &mut rng);
                    self.map_latent(&ZCode(z.to_vec())).expect("z has configured size")
                })
                .collect(),
        }
    }

    /// Differentiable synthesis of `[n, L, C]` codes.
    pub fn synthesize_var(&self, p: &Bound, w: &Var) -> Var {
        self.net.forward(p, w)
    }

    pub fn synthesize(&self, w: &WCode) -> Result<Tensor> {
        Ok(self.synthesize_batch(std::slice::from_ref(w))?.unstack().remove(0))
    }

    /// `[n, R, R, 3]`
    pub fn synthesize_batch(&self, ws: &[WCode]) -> Result<Tensor> {
        for w in ws {
            w.check_shape(self.layers(), self.channels())?;
        }
        if ws.is_empty() {
            return Err(Error::InvalidArgument("no codes to synthesize".into()));
        }
        let p = self.bind(false);
        let mut outs = Vec::with_capacity(ws.len());
        for chunk in ws.chunks(256) {
            let y = self.synthesize_var(&p, &Var::constant(stack_codes(chunk)));
            outs.extend(y.value().unstack());
        }
        Ok(Tensor::stack(&outs))
    }

    /// Split a `[n, L, C]` tensor into codes.
    pub fn codes_from_tensor(&self, t: &Tensor) -> Vec<WCode> {
        unstack_codes(t)
    }
}

impl Persist for GeneratorModel {
    const KIND: &'static str = "generator";

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
        let config: GeneratorConfig = ckpt.config()?;
        let mut m = GeneratorModel::init(&config, ckpt.meta.seed)?;
        ckpt.fill(&mut m.params)?;
        m.provenance = Provenance {
            dataset_hash: ckpt.meta.dataset_hash.clone(),
            seed: ckpt.meta.seed,
            metrics: ckpt.meta.metrics.clone(),
        };
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toyfaces::sample_attributes;

    fn small(variant: Variant) -> GeneratorModel {
        let cfg = GeneratorConfig { hidden: 16, channels: 8, variant, ..Default::default() };
        GeneratorModel::init(&cfg, 1).unwrap()
    }

    #[test]
    fn reference_one_hot_z_is_exact_codebook_embedding() {
        let g = small(Variant::Reference);
        let a = sample_attributes(5);
        let b = g.config.z_block();
        let mut z = vec![0.0; g.config.z_dim];
        for slot in Slot::DISCRETE {
            z[slot.index() * b + a.discrete(slot).unwrap()] = 1.0;
        }
        let h = std::f64::consts::TAU * a.background_hue;
        z[7 * b] = h.cos();
        z[7 * b + 1] = h.sin();
        let w = g.map_latent(&ZCode(z)).unwrap();
        let want = g.codebook().embed(&a, 8);
        let err = w.tensor().sub(want.tensor()).max_abs();
        assert!(err < 1e-12, "max diff {err}");
    }

    #[test]
    fn adversarial_layers_are_identical() {
        let g = small(Variant::Adversarial);
        let w = &g.sample_prior(1, 3)[0];
        for i in 1..w.num_layers() {
            assert_eq!(w.layer(i), w.layer(0));
        }
        assert!(g.map_latent(&ZCode(vec![0.0; 3])).is_err());
    }

    #[test]
    fn synthesis_rejects_wrong_shape() {
        let g = small(Variant::Reference);
        assert!(g.synthesize(&WCode::zeros(8, 9)).is_err());
        let img = g.synthesize(&WCode::zeros(8, 8)).unwrap();
        assert_eq!(img.shape(), &[32, 32, 3]);
    }

    #[test]
    fn layer_count_must_match_resolution() {
        let cfg = GeneratorConfig { layers: 9, ..Default::default() };
        assert!(matches!(GeneratorModel::init(&cfg, 0), Err(Error::Config(_))));
    }
}
