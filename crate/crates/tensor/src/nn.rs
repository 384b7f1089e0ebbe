//! Parameter storage and the handful of layers the models are built from.
//!
//! Weights live in a [`ParamStore`] as plain tensors. A forward pass binds
//! the store into [`Bound`] vars, either trainable leaves or constants.

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tensor::{ConvGeom, Tensor};
use crate::var::{grad, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Replace values by name; every stored name must be present with the same shape.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<(), String> {
        for (name, slot) in self.names.iter().zip(self.values.iter_mut()) {
            let t = lookup(name).ok_or_else(|| format!("missing parameter {name}"))?;
            if t.shape() != slot.shape() {
                return Err(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    slot.shape(),
                    t.shape()
                ));
            }
            *slot = t;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and raw bits of every weight.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (n, t) in self.iter() {
            buf.clear();
            buf.extend_from_slice(n.as_bytes());
            t.write_bytes(&mut buf);
            h.update(&buf);
        }
        hex(&h.finalize())
    }

    pub fn bind(&self, trainable: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| {
                    if trainable {
                        Var::leaf(t.clone())
                    } else {
                        Var::constant(t.clone())
                    }
                })
                .collect(),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A store bound into the current graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }

    /// Gradients of `loss` for every bound parameter, in store order.
    pub fn grads(&self, loss: &Var) -> Vec<Tensor> {
        let refs: Vec<&Var> = self.vars.iter().collect();
        grad(loss, &refs, false)
            .into_iter()
            .map(|v| v.value().clone())
            .collect()
    }
}

fn he_normal<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self::with_gain(ps, name, d_in, d_out, 1.0, rng)
    }

    /// He-normal weights scaled by `gain`.
    pub fn with_gain<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), he_normal(vec![d_in, d_out], d_in, rng).scale(gain));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![d_out]));
        Self { w, b, d_in, d_out }
    }

    /// `[n, d_in]` → `[n, d_out]`
    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        x.matmul(p.var(self.w)).add(p.var(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = k * k * c_in;
        let w = ps.add(format!("{name}.w"), he_normal(vec![fan_in, c_out], fan_in, rng));
        let b = ps.add(format!("{name}.b"), Tensor::zeros(vec![c_out]));
        Self { w, b, c_in, c_out, k, stride, pad: k / 2 }
    }

    /// NHWC `[n,h,w,c_in]` → `[n,oh,ow,c_out]`
    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        let s = x.shape();
        assert_eq!(s.len(), 4, "conv input must be NHWC, got {s:?}");
        assert_eq!(s[3], self.c_in, "conv expects {} channels, got {}", self.c_in, s[3]);
        let geom = ConvGeom { n: s[0], h: s[1], w: s[2], c: s[3], k: self.k, stride: self.stride, pad: self.pad };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        x.unfold(geom)
            .matmul(p.var(self.w))
            .add(p.var(self.b))
            .reshape(vec![s[0], oh, ow, self.c_out])
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut R) -> Self {
        let table = ps.add(format!("{name}.table"), Tensor::randn(vec![vocab, dim], 1.0 / (dim as f64).sqrt(), rng));
        Self { table, vocab, dim }
    }

    pub fn forward(&self, p: &Bound, ids: &[usize]) -> Var {
        p.var(self.table).index_select(ids)
    }
}
