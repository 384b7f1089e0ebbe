use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    /// Pixels above this quantile of gradient magnitude become edges.
    pub quantile: f64,
    /// Magnitudes at or below this are never edges, whatever the quantile gives.
    pub min_magnitude: f64,
}

impl Default for SketchConfig {
    fn default() -> Self {
        SketchConfig { quantile: 0.7, min_magnitude: 0.12 }
    }
}

/// Central-difference RGB gradient magnitude, edges clamped.
pub fn gradient_magnitude(img: &Tensor) -> Vec<f64> {
    let s = img.shape();
    assert!(s.len() == 3 && s[2] == 3, "expected [h, w, 3] image, got {s:?}");
    let (h, w) = (s[0], s[1]);
    let d = img.data();
    let at = |y: usize, x: usize, c: usize| d[(y * w + x) * 3 + c];
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut m = 0.0;
            for c in 0..3 {
                let gx = (at(y, (x + 1).min(w - 1), c) - at(y, x.saturating_sub(1), c)) / 2.0;
                let gy = (at((y + 1).min(h - 1), x, c) - at(y.saturating_sub(1), x, c)) / 2.0;
                m += gx * gx + gy * gy;
            }
            out.push(m.sqrt());
        }
    }
    out
}

/// Binary edge map `[h, w, 1]` (0.0 or 1.0).
pub fn extract_sketch(img: &Tensor, cfg: &SketchConfig) -> Tensor {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let mag = gradient_magnitude(img);
    let mut sorted = mag.clone();
    sorted.sort_by(f64::total_cmp);
    let q = cfg.quantile.clamp(0.0, 1.0);
    let k = ((sorted.len() - 1) as f64 * q).round() as usize;
    let thresh = sorted[k].max(cfg.min_magnitude);
    let data = mag.iter().map(|&m| if m > thresh { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![h, w, 1], data)
}
