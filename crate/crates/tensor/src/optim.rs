use crate::tensor::Tensor;

/// Adaptive-moment gradient descent with a fixed step size.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self { beta1, beta2, ..Self::new(lr) }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "grad shape mismatch for param {i}");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pd[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, 1.0])];
        let g = vec![Tensor::new(vec![2], vec![3.0, -0.001])];
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g);
        let d = p[0].data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![5.0])];
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let g = vec![p[0].scale(2.0)];
            opt.step(&mut p, &g);
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }
}
