use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use crate::error::{Error, Result};
use crate::toyfaces::Part;

/// Binary `R×R` mask. What 1 means depends on the caller: observed pixels
/// for the masked encoder, preserved pixels for region edits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    resolution: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(resolution: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != resolution * resolution {
            return Err(Error::shape([resolution * resolution], [data.len()]));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Mask { resolution, data })
    }

    pub fn filled(resolution: usize, v: u8) -> Self {
        Mask { resolution, data: vec![v.min(1); resolution * resolution] }
    }

    pub fn ones(resolution: usize) -> Self {
        Self::filled(resolution, 1)
    }

    pub fn zeros(resolution: usize) -> Self {
        Self::filled(resolution, 0)
    }

    /// Pixels whose label equals `part`.
    pub fn from_part(labels: &[u8], resolution: usize, part: Part) -> Result<Self> {
        Self::new(resolution, labels.iter().map(|&l| u8::from(l == part.id())).collect())
    }

    /// Axis-aligned rectangle `[y0, y1) × [x0, x1)`.
    pub fn rect(resolution: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut data = vec![0; resolution * resolution];
        for y in y0..y1.min(resolution) {
            for x in x0..x1.min(resolution) {
                data[y * resolution + x] = 1;
            }
        }
        Mask { resolution, data }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.resolution + x] == 1
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn complement(&self) -> Mask {
        Mask { resolution: self.resolution, data: self.data.iter().map(|&v| 1 - v).collect() }
    }

    /// Grow the set pixels by `radius` in the Chebyshev metric.
    pub fn dilate(&self, radius: usize) -> Mask {
        let r = self.resolution;
        let mut data = vec![0; r * r];
        for y in 0..r {
            for x in 0..r {
                let near = (y.saturating_sub(radius)..(y + radius + 1).min(r))
                    .any(|yy| (x.saturating_sub(radius)..(x + radius + 1).min(r)).any(|xx| self.get(yy, xx)));
                data[y * r + x] = u8::from(near);
            }
        }
        Mask { resolution: r, data }
    }

    /// `[R, R, 1]`
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.resolution, self.resolution, 1], self.data.iter().map(|&v| v as f64).collect())
    }
}

/// Random rectangle covering 10–60% of the image.
pub fn sample_mask(resolution: usize, seed: u64) -> Mask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = (resolution * resolution) as f64;
    loop {
        let h = rng.gen_range(1..=resolution);
        let w = rng.gen_range(1..=resolution);
        let cov = (h * w) as f64 / total;
        if (0.1..=0.6).contains(&cov) {
            let y0 = rng.gen_range(0..=resolution - h);
            let x0 = rng.gen_range(0..=resolution - w);
            return Mask::rect(resolution, y0, y0 + h, x0, x0 + w);
        }
    }
}

/// The left half of the image.
pub fn half_mask(resolution: usize) -> Mask {
    Mask::rect(resolution, 0, resolution, 0, resolution / 2)
}
