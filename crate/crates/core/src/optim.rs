//! First-order optimizers over flat parameter slices.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            step_size: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(len: usize, params: AdamParams) -> Self {
        AdamState {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn set_step_size(&mut self, step_size: f64) {
        self.params.step_size = step_size;
    }

    pub fn timestep(&self) -> u32 {
        self.t
    }

    /// One bias-corrected update of `w` along `-grad`.
    pub fn step(&mut self, w: &mut [f64], grad: &[f64]) {
        assert_eq!(w.len(), self.m.len(), "parameter length changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        let AdamParams {
            step_size,
            beta1,
            beta2,
            epsilon,
        } = self.params;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..w.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            w[i] -= step_size * m_hat / (v_hat.sqrt() + epsilon);
        }
    }
}

/// Heavy-ball SGD: `v ← μ v − lr g; w ← w + v`.
#[derive(Debug, Clone)]
pub struct MomentumState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<f64>,
}

impl MomentumState {
    pub fn new(len: usize, learning_rate: f64, momentum: f64) -> Self {
        MomentumState {
            learning_rate,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) {
        self.learning_rate = learning_rate;
    }

    pub fn step(&mut self, w: &mut [f64], grad: &[f64]) {
        for ((w, g), v) in w.iter_mut().zip(grad).zip(&mut self.velocity) {
            *v = self.momentum * *v - self.learning_rate * g;
            *w += *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_w() {
        let mut s = AdamState::new(3, AdamParams::default());
        let mut w = vec![1.0, -2.0, 0.5];
        s.step(&mut w, &[0.0; 3]);
        assert_eq!(w, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn constant_gradient_step_tends_to_step_size() {
        // Direct simulation of the recurrence: with g constant, m_hat = g and
        // v_hat = g², so each step approaches step_size · g/(|g| + ε).
        for g in [3.0, 1e-3, -0.2] {
            let mut s = AdamState::new(1, AdamParams::default());
            let mut w = [0.0];
            let mut last = 0.0;
            for _ in 0..500 {
                let before = w[0];
                s.step(&mut w, &[g]);
                last = (w[0] - before).abs();
            }
            assert!((last - 0.01).abs() / 0.01 < 0.01, "g={g}: step {last}");
        }
    }

    #[test]
    fn coordinates_are_independent() {
        let p = AdamParams::default();
        let mut joint = AdamState::new(2, p);
        let mut a = AdamState::new(1, p);
        let mut b = AdamState::new(1, p);
        let mut w = [0.3, -0.7];
        let (mut wa, mut wb) = ([0.3], [-0.7]);
        for k in 0..20 {
            let g = [k as f64 * 0.1 - 1.0, (k as f64).sin()];
            joint.step(&mut w, &g);
            a.step(&mut wa, &g[..1]);
            b.step(&mut wb, &g[1..]);
        }
        assert_eq!(w, [wa[0], wb[0]]);
    }

    #[test]
    fn momentum_accumulates() {
        let mut s = MomentumState::new(1, 0.1, 0.9);
        let mut w = [0.0];
        s.step(&mut w, &[1.0]);
        s.step(&mut w, &[1.0]);
        assert!((w[0] - (-0.1 - 0.19)).abs() < 1e-15);
    }
}
