//! Adam optimizer with bias correction.

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
/// Slot order must match the parameter order handed to `step`.
#[derive(Clone, Debug)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, param_sizes: &[usize]) -> Self {
        Self {
            config,
            t: 0,
            m: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![T::ZERO; n]).collect(),
        }
    }

    /// One update over all parameters:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
    /// `p <- p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), self.m.len(), "parameter/slot count mismatch");
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.config.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.config.beta2.powi(self.t as i32);
        for (slot, param) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[slot] else {
                // Unused parameter this step: zero gradient, no movement of m/v
                // would be wrong — Adam still decays the moments.
                for i in 0..self.m[slot].len() {
                    let m = self.config.beta1 * self.m[slot][i].to_f64();
                    let v = self.config.beta2 * self.v[slot][i].to_f64();
                    self.m[slot][i] = T::from_f64(m);
                    self.v[slot][i] = T::from_f64(v);
                    let update = self.config.lr * (m / bc1) / ((v / bc2).sqrt() + self.config.eps);
                    let p = param.values()[i].to_f64() - update;
                    param.values_mut()[i] = T::from_f64(p);
                }
                continue;
            };
            assert_eq!(
                grad.shape(),
                param.shape(),
                "gradient shape mismatch in slot {slot}"
            );
            for (i, &g) in grad.values().iter().enumerate() {
                let g = g.to_f64();
                let m = self.config.beta1 * self.m[slot][i].to_f64()
                    + (1.0 - self.config.beta1) * g;
                let v = self.config.beta2 * self.v[slot][i].to_f64()
                    + (1.0 - self.config.beta2) * g * g;
                self.m[slot][i] = T::from_f64(m);
                self.v[slot][i] = T::from_f64(v);
                let update = self.config.lr * (m / bc1) / ((v / bc2).sqrt() + self.config.eps);
                let p = param.values()[i].to_f64() - update;
                param.values_mut()[i] = T::from_f64(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f64>::new(&[3], vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let grads = vec![Some(Tensor::zeros(&[3]))];
        state.step(&mut [&mut p], &grads);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_magnitude_is_close_to_lr() {
        // With g = 1 the bias-corrected m_hat = v_hat = 1, so the update is
        // lr / (1 + eps) which is lr up to eps.
        let mut p = Tensor::<f64>::scalar(0.0);
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, &[1]);
        let grads = vec![Some(Tensor::scalar(1.0))];
        state.step(&mut [&mut p], &grads);
        let update = -p.item();
        assert!((update - cfg.lr).abs() < cfg.lr * 1e-6, "update {update}");
    }

    #[test]
    fn converges_on_scalar_quadratic() {
        // f(p) = p^2, gradient 2p, from p = 1 with lr 0.1.
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut state = AdamState::new(
            AdamConfig {
                lr: 0.1,
                ..AdamConfig::default()
            },
            &[1],
        );
        for _ in 0..100 {
            let g = 2.0 * p.item();
            let grads = vec![Some(Tensor::scalar(g))];
            state.step(&mut [&mut p], &grads);
        }
        assert!(p.item().abs() < 0.05, "p = {}", p.item());
    }
}
