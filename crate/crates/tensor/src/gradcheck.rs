//! Central finite differences, used as an independent oracle for gradients.
//!
//! Only forward evaluations of `f` are used here; nothing in this module
//! touches the backward rules it is meant to check.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Numeric gradient of scalar `f` at `x` by central differences.
pub fn numeric_grad(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    numeric_grad_at(f, x, eps, &(0..x.numel()).collect::<Vec<_>>())
}

/// Numeric partial derivatives at selected flat indices; others left 0.
pub fn numeric_grad_at(f: &mut dyn FnMut(&Tensor) -> f64, x: &Tensor, eps: f64, idx: &[usize]) -> Tensor {
    let mut out = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for &i in idx {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        out[i] = (fp - fm) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Relative error `|a-n| / max(|a|, |n|, floor)` maximized over `idx`.
///
/// The floor keeps coordinates whose true derivative is ~0 from dominating.
pub fn compare(analytic: &Tensor, numeric: &Tensor, idx: &[usize], floor: f64) -> GradCheck {
    let mut worst = GradCheck { max_rel_err: -1.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    for &i in idx {
        let a = analytic.data()[i];
        let n = numeric.data()[i];
        let denom = a.abs().max(n.abs()).max(floor);
        let e = (a - n).abs() / denom;
        if e > worst.max_rel_err {
            worst = GradCheck { max_rel_err: e, worst_index: i, analytic: a, numeric: n };
        }
    }
    worst.max_rel_err = worst.max_rel_err.max(0.0);
    worst
}

/// Relative error of whole gradient vectors: `‖a-n‖ / max(‖a‖, ‖n‖, floor)` over `idx`.
pub fn compare_norm(analytic: &Tensor, numeric: &Tensor, idx: &[usize], floor: f64) -> f64 {
    let (mut d, mut na, mut nn) = (0.0, 0.0, 0.0);
    for &i in idx {
        let a = analytic.data()[i];
        let n = numeric.data()[i];
        d += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    d.sqrt() / na.sqrt().max(nn.sqrt()).max(floor)
}
