//! Encoder and critic objectives over plain closures, so the same formulas
//! serve training, gradient checks and hand-computed cases.

use serde::{Deserialize, Serialize};
use wspace_tensor::{grad, Var};

use crate::nets::flatten_batch;

pub type VarFn<'a> = &'a dyn Fn(&Var) -> Var;

/// Mean over the batch of per-sample squared L2 distances.
pub fn batch_sq_dist(a: &Var, b: &Var) -> Var {
    let n = a.shape()[0] as f64;
    flatten_batch(&a.sub(b)).square().sum().mul_scalar(1.0 / n)
}

/// `‖z_s − E(G(z_s))‖²`, batch mean.
pub fn latent_regression_loss(z_s: &Var, encode: VarFn, synth: VarFn) -> Var {
    batch_sq_dist(z_s, &encode(&synth(z_s)))
}

/// Weighted contributions; `total()` reproduces the scalar loss exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTerms {
    pub reconstruction: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl EncoderTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.perceptual + self.adversarial
    }
}

/// The networks an encoder objective is built from.
pub struct EncoderNets<'a> {
    pub encode: VarFn<'a>,
    pub synth: VarFn<'a>,
    pub features: VarFn<'a>,
    pub critic: VarFn<'a>,
}

/// `‖x − G(E(u))‖² + λ1‖F(x) − F(G(E(u)))‖² − λ2·E[D(G(E(u)))]`.
///
/// `u` is the encoder input (the photo itself, or a sketch or label map
/// paired with photo `x`).
pub fn encoder_loss(u: &Var, x: &Var, nets: &EncoderNets, lambda1: f64, lambda2: f64) -> (Var, EncoderTerms) {
    let xr = (nets.synth)(&(nets.encode)(u));
    let rec = batch_sq_dist(x, &xr);
    let perc = batch_sq_dist(&(nets.features)(x), &(nets.features)(&xr)).mul_scalar(lambda1);
    let adv = (nets.critic)(&xr).mean().mul_scalar(-lambda2);
    let terms = EncoderTerms { reconstruction: rec.item(), perceptual: perc.item(), adversarial: adv.item() };
    (rec.add(&perc).add(&adv), terms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticTerms {
    pub fake: f64,
    pub real: f64,
    pub penalty: f64,
}

impl CriticTerms {
    pub fn total(&self) -> f64 {
        self.fake - self.real + self.penalty
    }
}

/// `E[D(fake)] − E[D(real)] + (λ3/2)·E[‖∇ₓD(real)‖²]`, penalty at the real samples.
pub fn discriminator_loss(real: &Var, fake: &Var, critic: VarFn, lambda3: f64) -> (Var, CriticTerms) {
    let real = if real.requires_grad() { real.clone() } else { Var::leaf(real.value().clone()) };
    let d_real = critic(&real);
    let d_fake = critic(fake).mean();
    let gx = grad(&d_real.sum(), &[&real], true).remove(0);
    let n = real.shape()[0] as f64;
    let penalty = flatten_batch(&gx).square().sum().mul_scalar(lambda3 / (2.0 * n));
    let d_real = d_real.mean();
    let terms = CriticTerms { fake: d_fake.item(), real: d_real.item(), penalty: penalty.item() };
    (d_fake.sub(&d_real).add(&penalty), terms)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskedTerms {
    pub reconstruction: f64,
    pub perceptual: f64,
    pub latent: f64,
}

impl MaskedTerms {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.perceptual + self.latent
    }
}

/// Encoder input for a masked image: `x ⊙ m` and `m` stacked on channels.
pub fn masked_input(x: &Var, m: &Var) -> Var {
    Var::concat(&[x.mul(m), m.broadcast_to(&[x.shape()[0], x.shape()[1], x.shape()[2], 1])], 3)
}

/// With `x = G(z)`, `x_m = (x ⊙ m, m)` and `x_r = G(E_m(x_m))`:
/// `‖x − x_r‖² + λ1‖F(x) − F(x_r)‖² + λ2‖z − E_m(x_m)‖²`.
/// `nets.critic` is unused.
pub fn masked_encoder_loss(z: &Var, m: &Var, nets: &EncoderNets, lambda1: f64, lambda2: f64) -> (Var, MaskedTerms) {
    let x = (nets.synth)(z);
    let zr = (nets.encode)(&masked_input(&x, m));
    let xr = (nets.synth)(&zr);
    let rec = batch_sq_dist(&x, &xr);
    let perc = batch_sq_dist(&(nets.features)(&x), &(nets.features)(&xr)).mul_scalar(lambda1);
    let lat = batch_sq_dist(z, &zr).mul_scalar(lambda2);
    let terms = MaskedTerms { reconstruction: rec.item(), perceptual: perc.item(), latent: lat.item() };
    (rec.add(&perc).add(&lat), terms)
}
