//! The layerwise latent space: code types, the layer-count rule, style mixing,
//! the attribute codebook and layer probing.

mod codebook;
mod probe;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use crate::error::{Error, Result};
use crate::util::tensor_hash;

pub use codebook::{sample_reference_prior, Codebook, CODEBOOK_VERSION, JITTER_SIGMA};
pub use probe::{diverse_variants, probe_layer_attributes, LayerAttributeTable, ProbeConfig, SlotFlip};

/// Layer count of a style generator at `resolution`: `2·log2(R) − 2`.
pub fn num_layers(resolution: usize) -> Result<usize> {
    if resolution < 8 || !resolution.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("resolution {resolution} is not a power of two >= 8")));
    }
    Ok(2 * resolution.trailing_zeros() as usize - 2)
}

/// A layerwise code: `L` rows of `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct WCode(Tensor);

impl WCode {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape("[L, C]", t.shape()));
        }
        if !t.all_finite() {
            return Err(Error::InvalidArgument("code has non-finite entries".into()));
        }
        Ok(WCode(t))
    }

    pub fn zeros(layers: usize, channels: usize) -> Self {
        WCode(Tensor::zeros(vec![layers, channels]))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || c == 0 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::InvalidArgument("code rows must be non-empty and equal length".into()));
        }
        Self::new(Tensor::new(vec![rows.len(), c], rows.concat()))
    }

    pub fn num_layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_layers(), self.channels())
    }

    pub fn layer(&self, i: usize) -> &[f64] {
        let c = self.channels();
        &self.0.data()[i * c..(i + 1) * c]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_layers()).map(|i| self.layer(i).to_vec()).collect()
    }

    pub fn hash(&self) -> String {
        tensor_hash(&self.0)
    }

    pub fn check_shape(&self, layers: usize, channels: usize) -> Result<()> {
        if self.shape() != (layers, channels) {
            return Err(Error::shape([layers, channels], [self.num_layers(), self.channels()]));
        }
        Ok(())
    }
}

impl Serialize for WCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for WCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        WCode::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Batch codes into `[n, L, C]`.
pub fn stack_codes(codes: &[WCode]) -> Tensor {
    Tensor::stack(&codes.iter().map(|w| w.0.clone()).collect::<Vec<_>>())
}

/// Split `[n, L, C]` back into codes.
pub fn unstack_codes(t: &Tensor) -> Vec<WCode> {
    t.unstack().into_iter().map(WCode).collect()
}

/// An input-space latent vector of length `D_z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZCode(pub Vec<f64>);

impl ZCode {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// A set of layer indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LayerSet(BTreeSet<usize>);

impl LayerSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn all(layers: usize) -> Self {
        LayerSet((0..layers).collect())
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn insert(&mut self, i: usize) {
        self.0.insert(i);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &LayerSet) -> LayerSet {
        LayerSet(self.0.union(&other.0).copied().collect())
    }

    pub fn complement(&self, layers: usize) -> LayerSet {
        LayerSet((0..layers).filter(|i| !self.0.contains(i)).collect())
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.0.iter().find(|&&i| i >= layers) {
            Some(i) => Err(Error::InvalidArgument(format!("layer index {i} out of range for {layers} layers"))),
            None => Ok(()),
        }
    }
}

impl FromIterator<usize> for LayerSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        LayerSet(iter.into_iter().collect())
    }
}

/// Take the rows in `layers` from `w_s` and all others from `w_c`.
pub fn style_mix(w_c: &WCode, w_s: &WCode, layers: &LayerSet) -> Result<WCode> {
    if w_c.shape() != w_s.shape() {
        return Err(Error::shape([w_c.num_layers(), w_c.channels()], [w_s.num_layers(), w_s.channels()]));
    }
    layers.validate(w_c.num_layers())?;
    let rows: Vec<f64> = (0..w_c.num_layers())
        .flat_map(|i| if layers.contains(i) { w_s.layer(i) } else { w_c.layer(i) }.iter().copied())
        .collect();
    Ok(WCode(Tensor::new(w_c.0.shape().to_vec(), rows)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn num_layers_rejects_non_powers() {
        assert!(num_layers(48).is_err());
        assert!(num_layers(4).is_err());
        assert_eq!(num_layers(8).unwrap(), 4);
        assert_eq!(num_layers(64).unwrap(), 10);
    }

    #[test]
    fn code_json_is_nested_rows() {
        let w = WCode::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.5]]).unwrap();
        let s = serde_json::to_string(&w).unwrap();
        assert_eq!(s, "[[1.0,2.0],[3.0,4.5]]");
        assert_eq!(serde_json::from_str::<WCode>(&s).unwrap(), w);
        assert!(serde_json::from_str::<WCode>("[[1.0],[2.0,3.0]]").is_err());
    }

    #[test]
    fn mix_rejects_bad_inputs() {
        let a = WCode::zeros(3, 2);
        assert!(style_mix(&a, &WCode::zeros(2, 2), &LayerSet::empty()).is_err());
        assert!(style_mix(&a, &a, &[3].into_iter().collect()).is_err());
    }
}
