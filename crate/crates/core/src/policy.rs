//! Feedback policies consumed by the simulator.

use crate::market::{admissible_budget, project_feasible};

/// A rebalancing rule: weights at step `k` given the wealth ratio and the
/// current drift estimate. Implementations may return slightly infeasible
/// weights; the simulator projects them onto the admissible set.
pub trait Policy: Send + Sync {
    fn dim(&self) -> usize;
    fn weights(&self, k: usize, r: f64, bhat: &[f64]) -> Vec<f64>;
}

/// Constant weights, rescaled into the admissible set when needed.
#[derive(Debug, Clone)]
pub struct ConstantPolicy {
    pub weights: Vec<f64>,
}

impl Policy for ConstantPolicy {
    fn dim(&self) -> usize {
        self.weights.len()
    }

    fn weights(&self, _k: usize, _r: f64, _bhat: &[f64]) -> Vec<f64> {
        self.weights.clone()
    }
}

/// Splits the cushion `x − q z` evenly across the `d` assets.
#[derive(Debug, Clone)]
pub struct EqualWeightPolicy {
    pub q: f64,
    pub d: usize,
}

impl Policy for EqualWeightPolicy {
    fn dim(&self) -> usize {
        self.d
    }

    fn weights(&self, _k: usize, r: f64, _bhat: &[f64]) -> Vec<f64> {
        let budget = admissible_budget(self.q, r.clamp(self.q, 1.0)).unwrap_or(0.0);
        vec![budget / self.d as f64; self.d]
    }
}

/// Applies `project_feasible` to another policy's output.
pub fn feasible_weights(policy: &dyn Policy, q: f64, k: usize, r: f64, bhat: &[f64]) -> Vec<f64> {
    let budget = admissible_budget(q, r.clamp(q, 1.0)).unwrap_or(0.0);
    project_feasible(&policy.weights(k, r, bhat), budget)
}
