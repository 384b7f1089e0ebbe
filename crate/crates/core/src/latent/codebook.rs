use std::f64::consts::TAU;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wspace_tensor::Tensor;

use super::WCode;
use crate::error::{Error, Result};
use crate::toyfaces::{sample_attributes, AttributeVector, Gender, Glasses, HairColor, HairLength, Hat, SkinTone, Slot, Smile};
use crate::util::derive_seed;

pub const CODEBOOK_VERSION: &str = "codebook-1";
pub const JITTER_SIGMA: f64 = 0.05;

/// Fixed unit vectors for every attribute value; slot `i` lives in layer `i`.
///
/// Vectors of one slot are mutually orthonormal. The hue slot uses an
/// orthonormal pair `(u, v)` and embeds hue `h` as `cos(2πh)·u + sin(2πh)·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    channels: usize,
    seed: u64,
    /// `values[slot][value]`, discrete slots only
    values: Vec<Vec<Vec<f64>>>,
    hue: [Vec<f64>; 2],
}

fn orthonormal_set(n: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..channels).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

impl Codebook {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        let widest = Slot::DISCRETE.iter().filter_map(|s| s.cardinality()).max().unwrap_or(2);
        if channels < widest {
            return Err(Error::InvalidArgument(format!("codebook needs at least {widest} channels, got {channels}")));
        }
        let values = Slot::DISCRETE
            .iter()
            .map(|&s| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, s.index() as u64, 0xC0DE));
                orthonormal_set(s.cardinality().unwrap(), channels, &mut rng)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, Slot::BackgroundHue.index() as u64, 0xC0DE));
        let mut uv = orthonormal_set(2, channels, &mut rng);
        let v = uv.pop().unwrap();
        let u = uv.pop().unwrap();
        Ok(Codebook { channels, seed, values, hue: [u, v] })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn value_vector(&self, slot: Slot, v: usize) -> &[f64] {
        &self.values[slot.index()][v]
    }

    pub fn hue_vector(&self, hue: f64) -> Vec<f64> {
        let (c, s) = ((TAU * hue).cos(), (TAU * hue).sin());
        self.hue[0].iter().zip(&self.hue[1]).map(|(u, v)| c * u + s * v).collect()
    }

    /// Linear mixture of a slot's vectors. For the hue slot the first two
    /// weights multiply `u` and `v`.
    pub fn mixture(&self, slot: Slot, weights: &[f64]) -> Vec<f64> {
        let basis: Vec<&Vec<f64>> = match slot {
            Slot::BackgroundHue => self.hue.iter().collect(),
            s => self.values[s.index()].iter().collect(),
        };
        let mut out = vec![0.0; self.channels];
        for (b, &wt) in basis.iter().zip(weights) {
            out.iter_mut().zip(b.iter()).for_each(|(o, x)| *o += wt * x);
        }
        out
    }

    /// Clean embedding; layers beyond the eighth are zero.
    pub fn embed(&self, attrs: &AttributeVector, layers: usize) -> WCode {
        assert!(layers >= Slot::ALL.len(), "need one layer per attribute slot");
        let mut d = vec![0.0; layers * self.channels];
        for slot in Slot::ALL {
            let row = match attrs.discrete(slot) {
                Some(v) => self.value_vector(slot, v).to_vec(),
                None => self.hue_vector(attrs.background_hue),
            };
            d[slot.index() * self.channels..(slot.index() + 1) * self.channels].copy_from_slice(&row);
        }
        WCode::new(Tensor::new(vec![layers, self.channels], d)).expect("finite embedding")
    }

    /// Embedding plus i.i.d. Gaussian jitter of standard deviation `sigma`.
    pub fn embed_jittered(&self, attrs: &AttributeVector, layers: usize, sigma: f64, noise_seed: u64) -> WCode {
        let clean = self.embed(attrs, layers);
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = Tensor::randn(vec![layers, self.channels], sigma, &mut rng);
        WCode::new(clean.tensor().add(&noise)).expect("finite embedding")
    }

    /// Nearest-vector decoding of the attribute layers.
    pub fn decode(&self, w: &WCode) -> AttributeVector {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let nearest = |slot: Slot| {
            let row = w.layer(slot.index());
            (0..slot.cardinality().unwrap())
                .max_by(|&a, &b| dot(row, self.value_vector(slot, a)).total_cmp(&dot(row, self.value_vector(slot, b))))
                .unwrap()
        };
        let row = w.layer(Slot::BackgroundHue.index());
        let hue = dot(row, &self.hue[1]).atan2(dot(row, &self.hue[0])) / TAU;
        AttributeVector {
            gender_presentation: Gender::ALL[nearest(Slot::GenderPresentation)],
            skin_tone: SkinTone::ALL[nearest(Slot::SkinTone)],
            hair_color: HairColor::ALL[nearest(Slot::HairColor)],
            hair_length: HairLength::ALL[nearest(Slot::HairLength)],
            glasses: Glasses::ALL[nearest(Slot::Glasses)],
            smile: Smile::ALL[nearest(Slot::Smile)],
            hat: Hat::ALL[nearest(Slot::Hat)],
            background_hue: hue.rem_euclid(1.0) % 1.0,
        }
    }

    /// Expected code under uniform attributes: per-slot mean vector, zero for hue.
    pub fn mean(&self, layers: usize) -> WCode {
        let mut d = vec![0.0; layers * self.channels];
        for slot in Slot::DISCRETE {
            let vs = &self.values[slot.index()];
            for (c, o) in d[slot.index() * self.channels..(slot.index() + 1) * self.channels].iter_mut().enumerate() {
                *o = vs.iter().map(|v| v[c]).sum::<f64>() / vs.len() as f64;
            }
        }
        WCode::new(Tensor::new(vec![layers, self.channels], d)).expect("finite mean")
    }
}

/// `n` prior draws: attributes per code, embedded with jitter.
pub fn sample_reference_prior(cb: &Codebook, layers: usize, n: usize, seed: u64) -> Vec<(AttributeVector, WCode)> {
    (0..n)
        .map(|i| {
            let attrs = sample_attributes(derive_seed(seed, i as u64, 0));
            let w = cb.embed_jittered(&attrs, layers, JITTER_SIGMA, derive_seed(seed, i as u64, 1));
            (attrs, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vectors_are_orthonormal_within_slot() {
        let cb = Codebook::new(32, 0).unwrap();
        for slot in Slot::DISCRETE {
            let k = slot.cardinality().unwrap();
            for a in 0..k {
                for b in 0..k {
                    let d: f64 = cb.value_vector(slot, a).iter().zip(cb.value_vector(slot, b)).map(|(x, y)| x * y).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decode_inverts_embed() {
        let cb = Codebook::new(32, 3).unwrap();
        for s in 0..50 {
            let a = sample_attributes(s);
            let back = cb.decode(&cb.embed(&a, 8));
            assert_eq!(AttributeVector { background_hue: a.background_hue, ..back }, a);
            assert!((back.background_hue - a.background_hue).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_channels_is_an_error() {
        assert!(Codebook::new(3, 0).is_err());
    }
}
