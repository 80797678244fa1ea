use super::{Param, Real};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2.0e-4,
            beta1: 0.5,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update from the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer bound to a different parameter set");
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::lit(c.lr * bc2.sqrt() / bc1);
        let eps = T::lit(c.eps * bc2.sqrt());
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (T::one() - b1) * g;
                v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                p.value[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Stochastic gradient descent with classical momentum and optional L2 decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>]) {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (lr, mom, wd) = (T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay));
        for (p, vel) in params.iter_mut().zip(&mut self.velocity) {
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                vel[i] = mom * vel[i] + g;
                p.value[i] -= lr * vel[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut p = Param::new(vec![3.0f64, -2.0]);
        let mut opt = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 });
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut p]);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = Param::new(vec![1.0f64]);
        p.grad = vec![123.0];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p]);
        assert!((1.0 - p.value[0] - 2.0e-4).abs() < 1e-9);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = Param::new(vec![0.0f64]);
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        p.grad = vec![1.0];
        opt.step(&mut [&mut p]);
        opt.step(&mut [&mut p]);
        assert!((p.value[0] + 0.1 + 0.19).abs() < 1e-12);
    }
}
