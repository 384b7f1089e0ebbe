use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{style_mix, LayerSet, WCode, JITTER_SIGMA};
use crate::error::{Error, Result};
use crate::features::{attribute_flips, AttributeClassifier};
use crate::generator::{GeneratorModel, Variant};
use crate::toyfaces::{sample_attributes, AttributeVector, Slot};
use crate::util::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub trials: usize,
    pub seed: u64,
    /// Draw partners that differ from the base on every slot. Only the
    /// reference generator can do this; otherwise partners are prior draws.
    pub contrast: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { trials: 200, seed: 0, contrast: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotFlip {
    pub slot: Slot,
    pub flip_rate: f64,
}

/// For each layer, how often swapping only that layer flips each slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerAttributeTable(pub BTreeMap<usize, Vec<SlotFlip>>);

impl LayerAttributeTable {
    pub fn num_layers(&self) -> usize {
        self.0.len()
    }

    pub fn rate(&self, layer: usize, slot: Slot) -> f64 {
        self.0.get(&layer).and_then(|v| v.iter().find(|f| f.slot == slot)).map_or(0.0, |f| f.flip_rate)
    }

    /// Layers whose swap flips `slot` at least `threshold` of the time.
    pub fn layers_for(&self, slot: Slot, threshold: f64) -> LayerSet {
        self.0.keys().copied().filter(|&l| self.rate(l, slot) >= threshold).collect()
    }

    /// Slots flipped by `layer` at least `threshold` of the time.
    pub fn slots_for(&self, layer: usize, threshold: f64) -> Vec<Slot> {
        self.0.get(&layer).map_or_else(Vec::new, |v| v.iter().filter(|f| f.flip_rate >= threshold).map(|f| f.slot).collect())
    }
}

/// Attributes differing from `a` on every discrete slot, hue shifted by 0.25 to 0.75.
fn contrast_partner(a: &AttributeVector, seed: u64) -> AttributeVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = *a;
    for slot in Slot::DISCRETE {
        let k = slot.cardinality().expect("discrete slot");
        let v = (a.discrete(slot).expect("discrete slot") + rng.gen_range(1..k)) % k;
        b.set_discrete(slot, v);
    }
    b.background_hue = (a.background_hue + rng.gen_range(0.25..0.75)).rem_euclid(1.0) % 1.0;
    b
}

fn probe_pairs(g: &GeneratorModel, cfg: &ProbeConfig) -> Vec<(WCode, WCode)> {
    let (layers, cb) = (g.layers(), g.codebook());
    if cfg.contrast && g.config().variant == Variant::Reference {
        (0..cfg.trials as u64)
            .map(|i| {
                let a = sample_attributes(derive_seed(cfg.seed, i, 0));
                let b = contrast_partner(&a, derive_seed(cfg.seed, i, 1));
                let wa = cb.embed_jittered(&a, layers, JITTER_SIGMA, derive_seed(cfg.seed, i, 2));
                let wb = cb.embed_jittered(&b, layers, JITTER_SIGMA, derive_seed(cfg.seed, i, 3));
                (wa, wb)
            })
            .collect()
    } else {
        let base = g.sample_prior(cfg.trials, derive_seed(cfg.seed, 0, 4));
        let other = g.sample_prior(cfg.trials, derive_seed(cfg.seed, 0, 5));
        base.into_iter().zip(other).collect()
    }
}

/// Swap one layer at a time from a partner code into a base code and record
/// how often the classifier's reading of each slot changes.
pub fn probe_layer_attributes(g: &GeneratorModel, cls: &AttributeClassifier, cfg: &ProbeConfig) -> Result<LayerAttributeTable> {
    if cfg.trials == 0 {
        return Err(Error::InvalidArgument("probe needs at least one trial".into()));
    }
    let layers = g.layers();
    let pairs = probe_pairs(g, cfg);
    let mut codes = Vec::with_capacity(pairs.len() * (layers + 1));
    for (wa, wb) in &pairs {
        codes.push(wa.clone());
        for l in 0..layers {
            codes.push(style_mix(wa, wb, &LayerSet::from_iter([l]))?);
        }
    }
    let attrs = cls.classify(&g.synthesize_batch(&codes)?);
    let mut counts = vec![[0usize; 8]; layers];
    for chunk in attrs.chunks(layers + 1) {
        for (l, mixed) in chunk[1..].iter().enumerate() {
            for (c, flipped) in counts[l].iter_mut().zip(attribute_flips(&chunk[0], mixed)) {
                *c += usize::from(flipped);
            }
        }
    }
    let n = pairs.len() as f64;
    Ok(LayerAttributeTable(
        counts
            .into_iter()
            .enumerate()
            .map(|(l, c)| (l, Slot::ALL.iter().map(|&slot| SlotFlip { slot, flip_rate: c[slot.index()] as f64 / n }).collect()))
            .collect(),
    ))
}

/// `n` codes that keep `w` on the `protected` layers and take every other
/// layer from a fresh prior draw.
pub fn diverse_variants(g: &GeneratorModel, w: &WCode, protected: &LayerSet, n: usize, seed: u64) -> Result<Vec<WCode>> {
    w.check_shape(g.layers(), g.channels())?;
    let free = protected.complement(g.layers());
    g.sample_prior(n, seed).iter().map(|s| style_mix(w, s, &free)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrast_partner_differs_everywhere() {
        for s in 0..50 {
            let a = sample_attributes(s);
            let b = contrast_partner(&a, s + 1000);
            assert!(attribute_flips(&a, &b).iter().all(|&f| f));
            assert!(b.is_valid());
        }
    }

    #[test]
    fn table_queries() {
        let mut t = LayerAttributeTable::default();
        t.0.insert(0, vec![SlotFlip { slot: Slot::Hat, flip_rate: 0.95 }, SlotFlip { slot: Slot::Smile, flip_rate: 0.1 }]);
        t.0.insert(1, vec![SlotFlip { slot: Slot::Hat, flip_rate: 0.2 }]);
        assert_eq!(t.layers_for(Slot::Hat, 0.9).iter().collect::<Vec<_>>(), vec![0]);
        assert_eq!(t.slots_for(0, 0.5), vec![Slot::Hat]);
        assert_eq!(t.rate(1, Slot::Smile), 0.0);
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<LayerAttributeTable>(&json).unwrap(), t);
    }
}
