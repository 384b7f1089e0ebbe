//! Small random instances of every training and editing objective, each
//! checked against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wspace_core::encoders::{discriminator_loss, encoder_loss, masked_encoder_loss, EncoderNets};
use wspace_core::latent_opt::{AnchoredObjective, Objective, OptNets, ReconstructionObjective, RegionObjective};
use wspace_core::text_align::{ranking_loss, vl_similarity_loss};
use wspace_tensor::gradcheck::{compare, numeric_grad};
use wspace_tensor::{grad, Tensor, Var};

pub const INSTANCES: u64 = 20;
const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const N: usize = 2;
const R: usize = 4;
const L: usize = 2;
const C: usize = 3;
const PIX: usize = R * R * 3;

fn randn(shape: Vec<usize>, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, scale, rng)
}

/// Weights of a toy generator, encoder, feature map, critic and similarity head.
struct Toy {
    g: Tensor,
    e: Tensor,
    f: Tensor,
    d1: Tensor,
    d2: Tensor,
    s: Tensor,
}

impl Toy {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Toy {
            g: randn(vec![L * C, PIX], 0.4, rng),
            e: randn(vec![PIX + R * R, L * C], 0.15, rng),
            f: randn(vec![PIX, 5], 0.2, rng),
            d1: randn(vec![PIX, 4], 0.2, rng),
            d2: randn(vec![4, 1], 0.5, rng),
            s: randn(vec![PIX, 1], 0.3, rng),
        }
    }
}

fn synth(g: &Var, w: &Var) -> Var {
    let n = w.shape()[0];
    w.reshape(vec![n, L * C]).matmul(g).tanh().mul_scalar(0.5).add_scalar(0.5).reshape(vec![n, R, R, 3])
}

/// Accepts photos (3 channels) or masked inputs (4 channels).
fn encode(e: &Var, u: &Var) -> Var {
    let n = u.shape()[0];
    let k = u.value().numel() / n;
    u.reshape(vec![n, k]).matmul(&e.narrow(0, 0, k)).reshape(vec![n, L, C])
}

fn features(f: &Var, x: &Var) -> Var {
    let n = x.shape()[0];
    x.reshape(vec![n, PIX]).matmul(f).tanh()
}

fn critic(d1: &Var, d2: &Var, x: &Var) -> Var {
    let n = x.shape()[0];
    x.reshape(vec![n, PIX]).matmul(d1).silu().matmul(d2).reshape(vec![n])
}

fn similarity(s: &Var, x: &Var) -> Var {
    let n = x.shape()[0];
    x.reshape(vec![n, PIX]).matmul(s).sigmoid().reshape(vec![n])
}

/// Worst per-coordinate relative error between `loss`'s autodiff gradient
/// at `x` and central differences.
fn check(loss: impl Fn(&Var) -> Var, x: &Tensor) -> f64 {
    let v = Var::leaf(x.clone());
    let analytic = grad(&loss(&v), &[&v], false).remove(0);
    let numeric = numeric_grad(&mut |t: &Tensor| loss(&Var::constant(t.clone())).item(), x, EPS);
    let idx: Vec<usize> = (0..x.numel()).collect();
    let r = compare(analytic.value(), &numeric, &idx, FLOOR);
    assert!(analytic.value().data().iter().any(|g| g.abs() > 1e-8), "gradient vanished");
    r.max_rel_err
}

/// Worst relative error of `case` over [`INSTANCES`] seeds.
pub fn worst_error(case: Case) -> f64 {
    (0..INSTANCES).map(|seed| case(&mut ChaCha8Rng::seed_from_u64(seed))).fold(0.0, f64::max)
}

fn c(t: &Tensor) -> Var {
    Var::constant(t.clone())
}

fn opt_case(rng: &mut ChaCha8Rng, build: impl Fn(OptNets, &Tensor, &Tensor) -> f64) -> f64 {
    let t = Toy::new(rng);
    let target = randn(vec![1, R, R, 3], 0.3, rng).map(|v| (v + 0.5).clamp(0.0, 1.0));
    let z = randn(vec![1, L, C], 1.0, rng);
    let (g, e, f, s) = (c(&t.g), c(&t.e), c(&t.f), c(&t.s));
    let sy = |w: &Var| synth(&g, w);
    let en = |u: &Var| encode(&e, u);
    let fe = |x: &Var| features(&f, x);
    let si = |x: &Var| similarity(&s, x);
    build(OptNets { synth: &sy, encode: &en, features: &fe, similarity: Some(&si) }, &target, &z)
}

fn encoder_case(rng: &mut ChaCha8Rng) -> f64 {
    let t = Toy::new(rng);
    let x = randn(vec![N, R, R, 3], 0.5, rng).map(|v| v.clamp(-1.0, 1.0) * 0.5 + 0.5);
    let (g, f, d1, d2) = (c(&t.g), c(&t.f), c(&t.d1), c(&t.d2));
    check(
        |e| {
            let nets = EncoderNets {
                encode: &|u| encode(e, u),
                synth: &|w| synth(&g, w),
                features: &|img| features(&f, img),
                critic: &|img| critic(&d1, &d2, img),
            };
            encoder_loss(&c(&x), &c(&x), &nets, 0.8, 0.1).0
        },
        &t.e,
    )
}

fn critic_case(rng: &mut ChaCha8Rng) -> f64 {
    let t = Toy::new(rng);
    let real = randn(vec![N, R, R, 3], 0.5, rng);
    let fake = randn(vec![N, R, R, 3], 0.5, rng);
    let d2 = c(&t.d2);
    let first = check(|d1| discriminator_loss(&c(&real), &c(&fake), &|img| critic(d1, &d2, img), 10.0).0, &t.d1);
    let d1 = c(&t.d1);
    let second = check(|d2| discriminator_loss(&c(&real), &c(&fake), &|img| critic(&d1, d2, img), 10.0).0, &t.d2);
    first.max(second)
}

fn penalty_case(rng: &mut ChaCha8Rng) -> f64 {
    let t = Toy::new(rng);
    let real = randn(vec![N, R, R, 3], 0.5, rng);
    let d2 = c(&t.d2);
    check(
        |d1| {
            let crit = |img: &Var| critic(d1, &d2, img);
            let with = discriminator_loss(&c(&real), &c(&real), &crit, 10.0).0;
            let without = discriminator_loss(&c(&real), &c(&real), &crit, 0.0).0;
            with.sub(&without)
        },
        &t.d1,
    )
}

fn alignment_case(rng: &mut ChaCha8Rng) -> f64 {
    let n = 6;
    let wv = randn(vec![n, L, C], 1.0, rng);
    let wl = randn(vec![n, L, C], 1.0, rng);
    let p = [0.7, 1.3];
    let matched = [true, false, true, false, false, true];
    let a = check(|w| vl_similarity_loss(&c(&wv), w, &p, false).unwrap(), &wl);
    let b = check(|w| vl_similarity_loss(&c(&wv), w, &p, true).unwrap(), &wl);
    let r = check(
        |w| vl_similarity_loss(&c(&wv), w, &p, false).unwrap().add(&ranking_loss(&c(&wv), w, &matched, 2.0).unwrap().mul_scalar(0.5)),
        &wl,
    );
    a.max(b).max(r)
}

fn instance_case(rng: &mut ChaCha8Rng) -> f64 {
    opt_case(rng, |nets, target, z| {
        let obj = ReconstructionObjective::new(nets, target, 0.5, 2.0, 0.0);
        check(|v| obj.value(v), z)
    })
}

fn anchored_case(rng: &mut ChaCha8Rng) -> f64 {
    let anchor = randn(vec![1, L, C], 1.0, rng);
    opt_case(rng, |nets, _, z| {
        let obj = AnchoredObjective { nets, anchor: c(&anchor), lambda: 3.0 };
        check(|v| obj.value(v), z)
    })
}

fn stable_case(rng: &mut ChaCha8Rng) -> f64 {
    opt_case(rng, |nets, target, z| {
        let obj = ReconstructionObjective::new(nets, target, 0.5, 2.0, 4.0);
        check(|v| obj.value(v), z)
    })
}

fn masked_case(rng: &mut ChaCha8Rng) -> f64 {
    let t = Toy::new(rng);
    let z = randn(vec![N, L, C], 1.0, rng);
    let m = Tensor::new(vec![N, R, R, 1], (0..N * R * R).map(|i| ((i * 5) % 3 != 0) as u8 as f64).collect());
    let (g, f) = (c(&t.g), c(&t.f));
    check(
        |e| {
            let nets = EncoderNets {
                encode: &|u| encode(e, u),
                synth: &|w| synth(&g, w),
                features: &|img| features(&f, img),
                critic: &|img| img.clone(),
            };
            masked_encoder_loss(&c(&z), &c(&m), &nets, 0.8, 1.5).0
        },
        &t.e,
    )
}

fn region_case(rng: &mut ChaCha8Rng) -> f64 {
    let anchor = randn(vec![1, L, C], 1.0, rng);
    let mask = Tensor::new(vec![R, R, 1], (0..R * R).map(|i| (i % 3 != 1) as u8 as f64).collect());
    opt_case(rng, |nets, target, z| {
        let copy = OptNets { synth: nets.synth, encode: nets.encode, features: nets.features, similarity: nets.similarity };
        let obj = RegionObjective::new(nets, target, &mask, &anchor, 0.5, 2.0, 4.0, false);
        let plain = check(|v| obj.value(v), z);
        let masked = RegionObjective::new(copy, target, &mask, &anchor, 0.5, 2.0, 4.0, true);
        plain.max(check(|v| masked.value(v), z))
    })
}

/// One random instance of an objective, returning its relative gradient error.
pub type Case = fn(&mut ChaCha8Rng) -> f64;

/// Every suite by name.
pub const SUITES: [(&str, Case); 9] = [
    ("encoder", encoder_case),
    ("critic", critic_case),
    ("penalty", penalty_case),
    ("alignment", alignment_case),
    ("instance", instance_case),
    ("anchored", anchored_case),
    ("stable", stable_case),
    ("masked", masked_case),
    ("region", region_case),
];
