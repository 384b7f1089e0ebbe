//! Network bodies shared by the models: a layer-modulated MLP decoder, a
//! strided conv stack and a bag-of-embeddings text tower.

use rand::Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::{Bound, Conv2d, Embedding, Linear, ParamId, ParamStore, Tensor, Var};

/// Decoder from `[n, L, C]` codes to `[n, R, R, 3]` images in (0, 1).
///
/// Layer `i` of the code only enters block `i`:
/// `h ← silu(lin_i(h ⊙ (1 + scale_i(w_i))) + shift_i(w_i))`.
#[derive(Clone, Debug)]
pub struct ModulatedMlp {
    h0: ParamId,
    blocks: Vec<(Linear, Linear, Linear)>,
    out: Linear,
    resolution: usize,
}

impl ModulatedMlp {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        layers: usize,
        channels: usize,
        hidden: usize,
        resolution: usize,
        rng: &mut R,
    ) -> Self {
        let h0 = ps.add(format!("{name}.h0"), Tensor::randn(vec![1, hidden], 1.0, rng));
        let blocks = (0..layers)
            .map(|i| {
                let scale = Linear::with_gain(ps, &format!("{name}.b{i}.scale"), channels, hidden, 0.3, rng);
                let shift = Linear::with_gain(ps, &format!("{name}.b{i}.shift"), channels, hidden, 1.0, rng);
                let lin = Linear::with_gain(ps, &format!("{name}.b{i}.lin"), hidden, hidden, 0.8, rng);
                (scale, shift, lin)
            })
            .collect();
        let out = Linear::with_gain(ps, &format!("{name}.out"), hidden, resolution * resolution * 3, 0.5, rng);
        Self { h0, blocks, out, resolution }
    }

    pub fn forward(&self, p: &Bound, w: &Var) -> Var {
        let s = w.shape().to_vec();
        assert_eq!(s.len(), 3, "codes must be [n, L, C], got {s:?}");
        assert_eq!(s[1], self.blocks.len(), "expected {} layers, got {}", self.blocks.len(), s[1]);
        let n = s[0];
        let hidden = p.var(self.h0).shape()[1];
        let mut h = p.var(self.h0).broadcast_to(&[n, hidden]);
        for (i, (scale, shift, lin)) in self.blocks.iter().enumerate() {
            let wi = w.narrow(1, i, 1).reshape(vec![n, s[2]]);
            let m = scale.forward(p, &wi).add_scalar(1.0);
            h = lin.forward(p, &h.mul(&m)).add(&shift.forward(p, &wi)).silu();
        }
        let r = self.resolution;
        self.out.forward(p, &h).sigmoid().reshape(vec![n, r, r, 3])
    }
}

/// Stride-2 3×3 convolutions with SiLU, each halving the resolution.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub convs: Vec<Conv2d>,
}

impl ConvStack {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, c_in: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut prev = c_in;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(ps, &format!("{name}.conv{i}"), prev, w, 3, 2, rng);
                prev = w;
                c
            })
            .collect();
        Self { convs }
    }

    /// Activations after every block, NHWC.
    pub fn forward_all(&self, p: &Bound, x: &Var) -> Vec<Var> {
        let mut outs = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for c in &self.convs {
            h = c.forward(p, &h).silu();
            outs.push(h.clone());
        }
        outs
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Var {
        self.forward_all(p, x).pop().expect("non-empty stack")
    }

    /// Flattened size of the last block's output for a square input.
    pub fn out_dim(&self, resolution: usize) -> usize {
        let r = resolution >> self.convs.len();
        r * r * self.convs.last().map_or(0, |c| c.c_out)
    }
}

/// Flatten all but the batch axis.
pub fn flatten_batch(x: &Var) -> Var {
    let n = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    x.reshape(vec![n, rest])
}

/// Mean of token embeddings followed by a two-layer MLP.
#[derive(Clone, Debug)]
pub struct BagOfEmbeddings {
    pub embed: Embedding,
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub out: usize,
}

impl BagOfEmbeddings {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, d: &BagDims, rng: &mut R) -> Self {
        Self {
            embed: Embedding::new(ps, &format!("{name}.embed"), d.vocab, d.embed, rng),
            hidden: Linear::new(ps, &format!("{name}.hidden"), d.embed, d.hidden, rng),
            out: Linear::with_gain(ps, &format!("{name}.out"), d.hidden, d.out, 0.5, rng),
        }
    }

    /// One row per token list; every list must be non-empty.
    pub fn forward(&self, p: &Bound, batch: &[Vec<usize>]) -> Var {
        let n = batch.len();
        let flat: Vec<usize> = batch.iter().flatten().copied().collect();
        let mut pool = vec![0.0; n * flat.len()];
        let mut col = 0;
        for (r, ids) in batch.iter().enumerate() {
            assert!(!ids.is_empty(), "token list {r} is empty");
            for _ in ids {
                pool[r * flat.len() + col] = 1.0 / ids.len() as f64;
                col += 1;
            }
        }
        let pool = Var::constant(Tensor::new(vec![n, flat.len()], pool));
        let pooled = pool.matmul(&self.embed.forward(p, &flat));
        self.out.forward(p, &self.hidden.forward(p, &pooled).silu())
    }
}
