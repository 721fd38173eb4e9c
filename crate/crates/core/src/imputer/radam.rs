//! Rectified Adam. When the variance of the adaptive step is intractable
//! (rho_t <= 5) the update falls back to bias-corrected momentum SGD.

#[derive(Clone, Debug)]
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl RAdam {
    /// One moment buffer per tensor, sized from `sizes`.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        RAdam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every tensor.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), self.first.len(), "tensor count changed");
        assert_eq!(grads.len(), self.first.len(), "gradient count mismatch");
        self.step += 1;
        let t = self.step as f64;
        let b1t = self.beta1.powf(t);
        let b2t = self.beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = if rho_t > 5.0 {
            Some(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt(),
            )
        } else {
            None
        };
        let bias2 = (1.0 - b2t).sqrt();
        for (slot, (theta, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[slot];
            let v = &mut self.second[slot];
            assert_eq!(theta.len(), g.len());
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / (1.0 - b1t);
                let delta = match rect {
                    Some(r) => self.lr * m_hat * r * bias2 / (v[i].sqrt() + self.eps),
                    None => self.lr * m_hat,
                };
                theta[i] -= delta;
            }
        }
    }
}
