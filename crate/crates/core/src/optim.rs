//! Parameter containers and first-order optimizers.

use serde::{Deserialize, Serialize};

/// A bag of dense tensors that optimizers can walk in a fixed order.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

pub trait Optimizer<P: Parameters> {
    fn step(&mut self, params: &mut P, grads: &P, learning_rate: f64);
}

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct Adam<P> {
    config: AdamConfig,
    first: P,
    second: P,
    timestep: u64,
}

impl<P: Parameters> Adam<P> {
    pub fn new(like: &P, config: AdamConfig) -> Self {
        Self { config, first: like.zeros_like(), second: like.zeros_like(), timestep: 0 }
    }

    pub fn timestep(&self) -> u64 {
        self.timestep
    }
}

impl<P: Parameters> Optimizer<P> for Adam<P> {
    fn step(&mut self, params: &mut P, grads: &P, learning_rate: f64) {
        self.timestep += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powi(self.timestep as i32);
        let c2 = 1.0 - beta2.powi(self.timestep as i32);
        let p = params.tensors_mut();
        let g = grads.tensors();
        let m = self.first.tensors_mut();
        let v = self.second.tensors_mut();
        for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
    }
}

/// Plain gradient descent.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sgd;

impl<P: Parameters> Optimizer<P> for Sgd {
    fn step(&mut self, params: &mut P, grads: &P, learning_rate: f64) {
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (p, g) in p.iter_mut().zip(g) {
                *p -= learning_rate * g;
            }
        }
    }
}

pub fn make_optimizer<P: Parameters + 'static>(
    kind: OptimizerKind,
    like: &P,
    adam: AdamConfig,
) -> Box<dyn Optimizer<P>> {
    match kind {
        OptimizerKind::Adam => Box::new(Adam::new(like, adam)),
        OptimizerKind::Sgd => Box::new(Sgd),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Flat(Vec<f64>);

    impl Parameters for Flat {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Flat(vec![1.0, -2.0, 3.0]);
        let start = p.clone();
        let mut adam = Adam::new(&p, AdamConfig::default());
        for _ in 0..100 {
            adam.step(&mut p, &Flat(vec![0.0; 3]), 0.01);
        }
        assert_eq!(p, start);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 on step one, so the update is lr * g / (|g| + eps)
        let mut p = Flat(vec![0.0, 0.0]);
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &Flat(vec![3.0, -0.5]), 0.01);
        assert!((p.0[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
        assert!((p.0[1] - 0.01 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert_eq!(adam.timestep(), 1);
    }

    #[test]
    fn identical_streams_identical_trajectories() {
        let run = || {
            let mut p = Flat(vec![0.5, 0.5]);
            let mut adam = Adam::new(&p, AdamConfig::default());
            for t in 0..50 {
                let g = Flat(vec![(t as f64).sin(), p.0[0] - p.0[1]]);
                adam.step(&mut p, &g, 0.02);
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sgd_step() {
        let mut p = Flat(vec![1.0]);
        Sgd.step(&mut p, &Flat(vec![2.0]), 0.1);
        assert!((p.0[0] - 0.8).abs() < 1e-15);
    }
}
