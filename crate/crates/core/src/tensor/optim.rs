use super::{Scalar, Tensor};

/// First-order parameter update.
pub trait Optimizer<S: Scalar> {
    /// Updates `params` in place; `grads[i]` matches `params[i]` element-wise.
    fn step(&mut self, params: &mut [Tensor<S>], grads: &[Vec<S>]);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl<S: Scalar> Optimizer<S> for Sgd {
    fn step(&mut self, params: &mut [Tensor<S>], grads: &[Vec<S>]) {
        let lr = S::of(self.lr);
        for (p, g) in params.iter_mut().zip(grads) {
            assert_eq!(p.len(), g.len(), "gradient shape mismatch");
            for (w, &d) in p.data_mut().iter_mut().zip(g) {
                *w = *w - lr * d;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar = f64> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, params: &mut [Tensor<S>], grads: &[Vec<S>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = S::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps, one) = (S::of(c.lr), S::of(c.eps), S::one());
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "gradient shape mismatch");
            for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * d;
                *vi = b2 * *vi + (one - b2) * d * d;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(x: f64) -> Vec<Tensor> {
        vec![Tensor::from_f64(&[1], &[x]).unwrap()]
    }

    #[test]
    fn sgd_single_step() {
        let mut p = one(0.0);
        Sgd { lr: 0.1 }.step(&mut p, &[vec![1.0]]);
        assert_eq!(p[0].data(), &[-0.1]);
    }

    #[test]
    fn adam_first_step_is_about_lr() {
        let mut p = one(0.0);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[vec![1.0]]);
        // m̂ = 1, v̂ = 1 → Δ = -lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = one(0.25);
        Sgd { lr: 0.1 }.step(&mut p, &[vec![0.0]]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut p, &[vec![0.0]]);
        assert_eq!(p[0].data(), &[0.25]);
    }
}
