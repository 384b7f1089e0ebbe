//! Gradient-based refinement of a latent code against a fixed, frozen set of
//! networks: reconstruction, similarity-guided and region-restricted editing.
//!
//! Objectives are written over plain closures so the same formulas serve the
//! model-backed entry points and small hand-built instances in gradient checks.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use wspace_tensor::{grad, Adam, Tensor, Var};

use crate::encoders::{batch_sq_dist, masked_input, ImageEncoder, Mask, VarFn};
use crate::error::{Error, Result};
use crate::features::AttributeClassifier;
use crate::generator::GeneratorModel;
use crate::guided::SimilarityModel;
use crate::latent::WCode;
use crate::util::tensor_hash;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    /// Perceptual weight.
    pub lambda1: f64,
    /// Encoder-consistency weight.
    pub lambda2: f64,
    /// Similarity weight in the stabilized and region objectives.
    pub lambda3: f64,
    /// Similarity weight in the two-term guided objective.
    pub lambda: f64,
    pub iterations: usize,
    pub step_size: f64,
    /// Recorded with every run; the optimizer itself draws no randomness.
    pub seed: u64,
    /// Region objective: compare features of the preserved region only
    /// instead of the full images.
    pub masked_perceptual: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lambda1: 5e-5,
            lambda2: 2.0,
            lambda3: 200.0,
            lambda: 100.0,
            iterations: 20,
            step_size: 0.01,
            seed: 0,
            masked_perceptual: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3), ("lambda", self.lambda)];
        for (name, v) in w {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("optim.{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("optim.iterations must be ≥ 1".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("optim.step_size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iteration: usize,
    pub total: f64,
    /// Weighted contributions, in summation order.
    pub terms: Vec<TermValue>,
    pub code_hash: String,
}

impl TraceStep {
    pub fn term(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.name == name).map(|t| t.value)
    }

    /// Left-to-right sum of the terms; equals `total` exactly.
    pub fn term_sum(&self) -> f64 {
        let mut it = self.terms.iter().map(|t| t.value);
        let first = it.next().unwrap_or(0.0);
        it.fold(first, |acc, v| acc + v)
    }
}

/// One entry per evaluated code: the initial state and every iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimTrace {
    pub objective: String,
    pub steps: Vec<TraceStep>,
}

impl OptimTrace {
    pub fn first_total(&self) -> Option<f64> {
        self.steps.first().map(|s| s.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.steps.last().map(|s| s.total)
    }
}

/// Shared handle for observing and cancelling a run from another thread.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    cancelled: Arc<AtomicBool>,
    progress: Arc<Mutex<OptimTrace>>,
}

impl RunControl {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
    }

    pub fn is_cancelled(&self) -> bool {
        self.cancelled.load(Ordering::SeqCst)
    }

    /// The steps recorded so far.
    pub fn progress(&self) -> OptimTrace {
        self.progress.lock().expect("progress lock").clone()
    }

    fn start(&self, objective: &str) {
        *self.progress.lock().expect("progress lock") = OptimTrace { objective: objective.into(), steps: Vec::new() };
    }

    fn record(&self, step: &TraceStep) {
        self.progress.lock().expect("progress lock").steps.push(step.clone());
    }
}

/// A scalar objective of a code `[1, L, C]`, split into named weighted terms
/// whose left-to-right sum is the objective.
pub trait Objective {
    fn name(&self) -> &'static str;
    fn terms(&self, z: &Var) -> Vec<(&'static str, Var)>;

    fn value(&self, z: &Var) -> Var {
        let terms = self.terms(z);
        let mut it = terms.into_iter().map(|(_, v)| v);
        let first = it.next().expect("objective has at least one term");
        it.fold(first, |acc, v| acc.add(&v))
    }
}

/// The frozen networks an objective is built from, as closures over batches.
pub struct OptNets<'a> {
    pub synth: VarFn<'a>,
    pub encode: VarFn<'a>,
    pub features: VarFn<'a>,
    /// Image batch → similarity score per image in `[0, 1]`.
    pub similarity: Option<VarFn<'a>>,
}

fn similarity_term(nets: &OptNets, x: &Var, weight: f64) -> Var {
    let s = nets.similarity.expect("similarity network required when its weight is positive");
    s(x).mean().rsub_scalar(1.0).mul_scalar(weight)
}

/// `‖x − G(z)‖² + λ1‖F(x) − F(G(z))‖² + λ2‖z − E(G(z))‖² [+ λ3·(1 − S(G(z)))]`.
/// With `lambda3 = 0` the similarity term is omitted entirely.
pub struct ReconstructionObjective<'a> {
    pub nets: OptNets<'a>,
    pub target: Var,
    pub target_features: Var,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl<'a> ReconstructionObjective<'a> {
    pub fn new(nets: OptNets<'a>, target: &Tensor, lambda1: f64, lambda2: f64, lambda3: f64) -> Self {
        let target = Var::constant(target.clone());
        let target_features = Var::constant((nets.features)(&target).value().clone());
        ReconstructionObjective { nets, target, target_features, lambda1, lambda2, lambda3 }
    }
}

impl Objective for ReconstructionObjective<'_> {
    fn name(&self) -> &'static str {
        if self.lambda3 > 0.0 {
            "stable"
        } else {
            "instance"
        }
    }

    fn terms(&self, z: &Var) -> Vec<(&'static str, Var)> {
        let x = (self.nets.synth)(z);
        let mut t = vec![
            ("reconstruction", batch_sq_dist(&self.target, &x)),
            ("perceptual", batch_sq_dist(&self.target_features, &(self.nets.features)(&x)).mul_scalar(self.lambda1)),
            ("latent", batch_sq_dist(z, &(self.nets.encode)(&x)).mul_scalar(self.lambda2)),
        ];
        if self.lambda3 > 0.0 {
            t.push(("similarity", similarity_term(&self.nets, &x, self.lambda3)));
        }
        t
    }
}

/// `‖z − a‖² + λ·(1 − S(G(z)))` with a fixed anchor `a`.
pub struct AnchoredObjective<'a> {
    pub nets: OptNets<'a>,
    pub anchor: Var,
    pub lambda: f64,
}

impl Objective for AnchoredObjective<'_> {
    fn name(&self) -> &'static str {
        "guided"
    }

    fn terms(&self, z: &Var) -> Vec<(&'static str, Var)> {
        let mut t = vec![("anchor", batch_sq_dist(z, &self.anchor))];
        if self.lambda > 0.0 {
            t.push(("similarity", similarity_term(&self.nets, &(self.nets.synth)(z), self.lambda)));
        }
        t
    }
}

/// `‖x⊙m − G(z)⊙m‖² + λ1‖F(x) − F(G(z))‖² + λ2‖z − a‖² + λ3·(1 − S(G(z)))`
/// where `m` marks the preserved pixels and `a` is the masked-encoder code.
pub struct RegionObjective<'a> {
    pub nets: OptNets<'a>,
    pub target: Var,
    pub mask: Var,
    pub target_features: Var,
    pub anchor: Var,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub masked_perceptual: bool,
}

impl<'a> RegionObjective<'a> {
    /// `target` is `[1, R, R, 3]`, `mask` is `[R, R, 1]`, `anchor` is `[1, L, C]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        nets: OptNets<'a>,
        target: &Tensor,
        mask: &Tensor,
        anchor: &Tensor,
        lambda1: f64,
        lambda2: f64,
        lambda3: f64,
        masked_perceptual: bool,
    ) -> Self {
        let target = Var::constant(target.clone());
        let mask = Var::constant(mask.clone());
        let fin = if masked_perceptual { target.mul(&mask) } else { target.clone() };
        let target_features = Var::constant((nets.features)(&fin).value().clone());
        RegionObjective {
            nets,
            target,
            mask,
            target_features,
            anchor: Var::constant(anchor.clone()),
            lambda1,
            lambda2,
            lambda3,
            masked_perceptual,
        }
    }
}

impl Objective for RegionObjective<'_> {
    fn name(&self) -> &'static str {
        "roi"
    }

    fn terms(&self, z: &Var) -> Vec<(&'static str, Var)> {
        let x = (self.nets.synth)(z);
        let fx = if self.masked_perceptual { x.mul(&self.mask) } else { x.clone() };
        let mut t = vec![
            ("reconstruction", batch_sq_dist(&self.target.mul(&self.mask), &x.mul(&self.mask))),
            ("perceptual", batch_sq_dist(&self.target_features, &(self.nets.features)(&fx)).mul_scalar(self.lambda1)),
            ("latent", batch_sq_dist(z, &self.anchor).mul_scalar(self.lambda2)),
        ];
        if self.lambda3 > 0.0 {
            t.push(("similarity", similarity_term(&self.nets, &x, self.lambda3)));
        }
        t
    }
}

fn evaluate(obj: &dyn Objective, z: &Var, iteration: usize) -> Result<(Var, TraceStep)> {
    let terms = obj.terms(z);
    let mut values = Vec::with_capacity(terms.len());
    let mut total: Option<Var> = None;
    for (name, v) in terms {
        values.push(TermValue { name: name.into(), value: v.item() });
        total = Some(match total {
            Some(t) => t.add(&v),
            None => v,
        });
    }
    let total = total.expect("objective has at least one term");
    let step = TraceStep { iteration, total: total.item(), terms: values, code_hash: tensor_hash(z.value()) };
    if !step.total.is_finite() {
        return Err(Error::NonFinite { iteration });
    }
    Ok((total, step))
}

/// Adam on `z_init` for `cfg.iterations` steps. The trace holds the initial
/// state and every update; a non-finite objective or a cancellation aborts
/// with the steps so far left in `control`.
pub fn optimize(obj: &dyn Objective, z_init: &Tensor, cfg: &OptimConfig, control: Option<&RunControl>) -> Result<(Tensor, OptimTrace)> {
    cfg.validate()?;
    let mut trace = OptimTrace { objective: obj.name().into(), steps: Vec::with_capacity(cfg.iterations + 1) };
    if let Some(c) = control {
        c.start(obj.name());
    }
    let mut z = [z_init.clone()];
    let mut adam = Adam::new(cfg.step_size);
    for it in 0..=cfg.iterations {
        if control.is_some_and(RunControl::is_cancelled) {
            return Err(Error::Cancelled);
        }
        let zv = Var::leaf(z[0].clone());
        let (total, step) = evaluate(obj, &zv, it)?;
        if let Some(c) = control {
            c.record(&step);
        }
        trace.steps.push(step);
        if it == cfg.iterations {
            break;
        }
        let g = grad(&total, &[&zv], false).remove(0);
        adam.step(&mut z, &[g.value().clone()]);
    }
    let [z] = z;
    Ok((z, trace))
}

fn batch1(t: &Tensor) -> Tensor {
    Tensor::stack(std::slice::from_ref(t))
}

/// Closures over frozen models, bound once per run.
struct Frozen<'m> {
    g: &'m GeneratorModel,
    e: &'m ImageEncoder,
    f: &'m AttributeClassifier,
    gp: wspace_tensor::Bound,
    ep: wspace_tensor::Bound,
    fp: wspace_tensor::Bound,
}

impl<'m> Frozen<'m> {
    fn new(g: &'m GeneratorModel, e: &'m ImageEncoder, f: &'m AttributeClassifier) -> Self {
        Frozen { g, e, f, gp: g.bind(false), ep: e.bind(false), fp: f.bind(false) }
    }

    fn synth(&self, w: &Var) -> Var {
        self.g.synthesize_var(&self.gp, w)
    }

    fn encode(&self, x: &Var) -> Var {
        self.e.forward(&self.ep, x)
    }

    fn features(&self, x: &Var) -> Var {
        self.f.features_var(&self.fp, x)
    }
}

fn check_image(g: &GeneratorModel, x: &Tensor) -> Result<()> {
    let r = g.resolution();
    if x.shape() != [r, r, 3] {
        return Err(Error::shape([r, r, 3], x.shape()));
    }
    Ok(())
}

fn finish(z: Tensor, g: &GeneratorModel) -> Result<WCode> {
    WCode::new(z.reshape(vec![g.layers(), g.channels()]))
}

/// Reconstruction refinement of `z_init` towards image `x`.
pub fn instance_optimize(
    x: &Tensor,
    z_init: &WCode,
    ev: &ImageEncoder,
    g: &GeneratorModel,
    f: &AttributeClassifier,
    cfg: &OptimConfig,
    control: Option<&RunControl>,
) -> Result<(WCode, OptimTrace)> {
    check_image(g, x)?;
    z_init.check_shape(g.layers(), g.channels())?;
    let m = Frozen::new(g, ev, f);
    let (synth, encode, features) = (|w: &Var| m.synth(w), |x: &Var| m.encode(x), |x: &Var| m.features(x));
    let nets = OptNets { synth: &synth, encode: &encode, features: &features, similarity: None };
    let obj = ReconstructionObjective::new(nets, &batch1(x), cfg.lambda1, cfg.lambda2, 0.0);
    let (z, trace) = optimize(&obj, &batch1(z_init.tensor()), cfg, control)?;
    Ok((finish(z, g)?, trace))
}

/// Two-term guided search from `z_init`. The anchor is `E(x_ref)` when a
/// reference image is given and `z_init` otherwise.
#[allow(clippy::too_many_arguments)]
pub fn guided_optimize_simple(
    z_init: &WCode,
    text: &str,
    x_ref: Option<&Tensor>,
    ev: &ImageEncoder,
    g: &GeneratorModel,
    s: &dyn SimilarityModel,
    cfg: &OptimConfig,
    control: Option<&RunControl>,
) -> Result<(WCode, OptimTrace)> {
    z_init.check_shape(g.layers(), g.channels())?;
    let anchor = match x_ref {
        Some(x) => {
            check_image(g, x)?;
            ev.invert(x)?
        }
        None => z_init.clone(),
    };
    let gp = g.bind(false);
    let synth = |w: &Var| g.synthesize_var(&gp, w);
    let unused = |x: &Var| x.clone();
    let sim = |x: &Var| s.score_var(x, text);
    let nets = OptNets { synth: &synth, encode: &unused, features: &unused, similarity: Some(&sim) };
    let obj = AnchoredObjective { nets, anchor: Var::constant(batch1(anchor.tensor())), lambda: cfg.lambda };
    let (z, trace) = optimize(&obj, &batch1(z_init.tensor()), cfg, control)?;
    Ok((finish(z, g)?, trace))
}

/// Reconstruction plus similarity, started from the inverted code of `x`.
#[allow(clippy::too_many_arguments)]
pub fn guided_optimize_stable(
    x: &Tensor,
    text: &str,
    ev: &ImageEncoder,
    g: &GeneratorModel,
    f: &AttributeClassifier,
    s: &dyn SimilarityModel,
    cfg: &OptimConfig,
    control: Option<&RunControl>,
) -> Result<(WCode, OptimTrace)> {
    check_image(g, x)?;
    let z_init = ev.invert(x)?;
    guided_optimize_stable_from(x, &z_init, text, ev, g, f, s, cfg, control)
}

/// [`guided_optimize_stable`] from an explicit starting code.
#[allow(clippy::too_many_arguments)]
pub fn guided_optimize_stable_from(
    x: &Tensor,
    z_init: &WCode,
    text: &str,
    ev: &ImageEncoder,
    g: &GeneratorModel,
    f: &AttributeClassifier,
    s: &dyn SimilarityModel,
    cfg: &OptimConfig,
    control: Option<&RunControl>,
) -> Result<(WCode, OptimTrace)> {
    check_image(g, x)?;
    z_init.check_shape(g.layers(), g.channels())?;
    let m = Frozen::new(g, ev, f);
    let (synth, encode, features) = (|w: &Var| m.synth(w), |x: &Var| m.encode(x), |x: &Var| m.features(x));
    let sim = |x: &Var| s.score_var(x, text);
    let nets = OptNets { synth: &synth, encode: &encode, features: &features, similarity: Some(&sim) };
    let obj = ReconstructionObjective::new(nets, &batch1(x), cfg.lambda1, cfg.lambda2, cfg.lambda3);
    let (z, trace) = optimize(&obj, &batch1(z_init.tensor()), cfg, control)?;
    Ok((finish(z, g)?, trace))
}

/// Masked-encoder code of `x` observed on `m`.
pub fn masked_invert(em: &ImageEncoder, x: &Tensor, m: &Mask) -> Result<WCode> {
    let xm = masked_input(&Var::constant(batch1(x)), &Var::constant(m.to_tensor()));
    Ok(em.encode_batch(xm.value())?.remove(0))
}

/// Edit the complement of `m` towards `text` while holding the `m` pixels.
/// `m` marks the PRESERVED region.
#[allow(clippy::too_many_arguments)]
pub fn roi_optimize(
    x: &Tensor,
    m: &Mask,
    text: &str,
    em: &ImageEncoder,
    g: &GeneratorModel,
    f: &AttributeClassifier,
    s: &dyn SimilarityModel,
    cfg: &OptimConfig,
    control: Option<&RunControl>,
) -> Result<(WCode, OptimTrace)> {
    check_image(g, x)?;
    if m.resolution() != g.resolution() {
        return Err(Error::shape([g.resolution()], [m.resolution()]));
    }
    let z_init = masked_invert(em, x, m)?;
    let fm = Frozen::new(g, em, f);
    let (synth, features) = (|w: &Var| fm.synth(w), |x: &Var| fm.features(x));
    let unused = |x: &Var| x.clone();
    let sim = |x: &Var| s.score_var(x, text);
    let nets = OptNets { synth: &synth, encode: &unused, features: &features, similarity: Some(&sim) };
    let z0 = batch1(z_init.tensor());
    let obj =
        RegionObjective::new(nets, &batch1(x), &m.to_tensor(), &z0, cfg.lambda1, cfg.lambda2, cfg.lambda3, cfg.masked_perceptual);
    let (z, trace) = optimize(&obj, &z0, cfg, control)?;
    Ok((finish(z, g)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_nets_eval(z: &Var) -> Var {
        z.tanh()
    }

    #[test]
    fn trace_has_initial_state_and_exact_term_sums() {
        let synth = |w: &Var| toy_nets_eval(w);
        let id = |x: &Var| x.clone();
        let nets = OptNets { synth: &synth, encode: &id, features: &id, similarity: None };
        let target = Tensor::new(vec![1, 2, 3], vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4]);
        let obj = ReconstructionObjective::new(nets, &target, 0.5, 2.0, 0.0);
        let cfg = OptimConfig { iterations: 7, ..Default::default() };
        let (_, trace) = optimize(&obj, &Tensor::zeros(vec![1, 2, 3]), &cfg, None).unwrap();
        assert_eq!(trace.steps.len(), 8);
        for s in &trace.steps {
            assert_eq!(s.term_sum(), s.total);
        }
    }

    #[test]
    fn cancelled_run_stops_before_first_step() {
        let synth = |w: &Var| toy_nets_eval(w);
        let id = |x: &Var| x.clone();
        let nets = OptNets { synth: &synth, encode: &id, features: &id, similarity: None };
        let obj = AnchoredObjective { nets, anchor: Var::constant(Tensor::zeros(vec![1, 1, 2])), lambda: 0.0 };
        let c = RunControl::new();
        c.cancel();
        let r = optimize(&obj, &Tensor::ones(vec![1, 1, 2]), &OptimConfig::default(), Some(&c));
        assert!(matches!(r, Err(Error::Cancelled)));
        assert!(c.progress().steps.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig::default().validate().is_ok());
        assert!(OptimConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { lambda3: -1.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
    }
}
