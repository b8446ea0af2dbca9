//! Adaptive-moment gradient descent on flat parameter vectors.
//!
//! Operates on the flattened form produced by `ParamSet::flatten`, so one
//! optimizer instance covers a whole network. State is exposed as plain
//! vectors for checkpointing; restoring state and continuing reproduces the
//! uninterrupted run bit-for-bit.

use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;

/// Serializable optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with the standard defaults β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// One update: `p ← p − lr·m̂/(√v̂ + ε)` with bias-corrected moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter/optimizer dimension mismatch");
        assert_eq!(grads.len(), self.m.len(), "gradient/optimizer dimension mismatch");
        self.t += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (fmath::sqrt(v_hat) + self.eps);
        }
    }

    pub fn state(&self) -> AdamState {
        AdamState { t: self.t, m: self.m.clone(), v: self.v.clone() }
    }

    /// Restore from a checkpointed state. The β powers are rebuilt by the
    /// same multiplication sequence the live run used, so a resumed run is
    /// bit-identical to an uninterrupted one.
    pub fn restore(&mut self, state: &AdamState) {
        assert_eq!(state.m.len(), self.m.len(), "restored state has wrong dimension");
        assert_eq!(state.v.len(), self.v.len(), "restored state has wrong dimension");
        self.t = state.t;
        self.m = state.m.clone();
        self.v = state.v.clone();
        self.beta1_pow = 1.0;
        self.beta2_pow = 1.0;
        for _ in 0..state.t {
            self.beta1_pow *= self.beta1;
            self.beta2_pow *= self.beta2;
        }
    }
}
