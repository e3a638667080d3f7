//! Task-loss weighting strategies.

use rand_distr::{Distribution, StandardNormal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Linear scalarization: the mean of task losses.
    Ls,
    /// Uncertainty weighting: `Σ_k exp(−s_k)·L_k/2 + s_k/2` with learnable `s_k`.
    Uw,
    /// Random loss weighting: per-batch softmax of `K` standard normals.
    Rlw,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ls => "ls",
            Strategy::Uw => "uw",
            Strategy::Rlw => "rlw",
        }
    }
}

/// Mutable state of a strategy across batches.
#[derive(Clone, Debug)]
pub struct WeightingState {
    pub kind: Strategy,
    /// UW log-variances `s_k`.
    pub log_vars: Vec<f64>,
    uw_opt: Adam<f64>,
    rng: rng::Rng,
}

impl WeightingState {
    pub fn new(kind: Strategy, tasks: usize, seed: u64) -> Self {
        Self {
            kind,
            log_vars: vec![0.0; tasks],
            uw_opt: Adam::new(AdamConfig::default()),
            rng: rng::stream(rng::derive_seed(seed, "rlw"), 0),
        }
    }

    pub fn tasks(&self) -> usize {
        self.log_vars.len()
    }

    /// Weights for one batch. Draws fresh RLW weights on every call.
    pub fn weights(&mut self) -> Vec<f64> {
        let k = self.tasks();
        match self.kind {
            Strategy::Ls => vec![1.0 / k as f64; k],
            Strategy::Uw => self.log_vars.iter().map(|s| (-s).exp() / 2.0).collect(),
            Strategy::Rlw => {
                let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                softmax(&z)
            }
        }
    }

    /// Constant offset added to the weighted sum (`Σ s_k/2` for UW).
    pub fn offset(&self) -> f64 {
        match self.kind {
            Strategy::Uw => self.log_vars.iter().sum::<f64>() / 2.0,
            _ => 0.0,
        }
    }

    /// Updates UW log-variances from the batch's task losses; no-op otherwise.
    pub fn update(&mut self, losses: &[f64], lr: f64) -> Result<()> {
        if self.kind != Strategy::Uw {
            return Ok(());
        }
        let grad: Vec<f64> = self
            .log_vars
            .iter()
            .zip(losses)
            .map(|(s, l)| -(-s).exp() * l / 2.0 + 0.5)
            .collect();
        let k = self.tasks();
        let mut s = Tensor::new([k], std::mem::take(&mut self.log_vars))?;
        self.uw_opt.set_lr(lr);
        let r = self.uw_opt.step(&mut [&mut s], &[Tensor::new([k], grad)?]);
        self.log_vars = s.into_data();
        r
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Combines task losses into one scalar. Returns the scalar and the weights used.
pub fn weighted_mtl_loss(losses: &[f64], state: &mut WeightingState) -> Result<(f64, Vec<f64>)> {
    if losses.len() != state.tasks() || losses.is_empty() {
        return Err(Error::invalid(format!("{} losses for {} tasks", losses.len(), state.tasks())));
    }
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("task loss"));
    }
    let w = state.weights();
    let total = losses.iter().zip(&w).map(|(l, w)| l * w).sum::<f64>() + state.offset();
    Ok((total, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Strategy;

    #[test]
    fn ls_is_the_mean() {
        let mut s = WeightingState::new(Strategy::Ls, 3, 0);
        let (total, w) = weighted_mtl_loss(&[1.0, 2.0, 3.0], &mut s).unwrap();
        assert_eq!(total, 2.0);
        assert!(w.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn uw_at_zero_log_variance_halves_the_sum() {
        let mut s = WeightingState::new(Strategy::Uw, 3, 0);
        let (total, _) = weighted_mtl_loss(&[1.0, 2.0, 3.0], &mut s).unwrap();
        assert_eq!(total, 3.0);
    }

    #[test]
    fn uw_log_variance_moves_toward_loss() {
        // stationary point of exp(−s)L/2 + s/2 is s = ln L
        let mut s = WeightingState::new(Strategy::Uw, 1, 0);
        for _ in 0..5000 {
            s.update(&[4.0], 1e-2).unwrap();
        }
        assert!((s.log_vars[0] - 4f64.ln()).abs() < 1e-2, "{}", s.log_vars[0]);
    }

    #[test]
    fn single_task_reduces_to_task_loss() {
        for kind in [Strategy::Ls, Strategy::Rlw] {
            let mut s = WeightingState::new(kind, 1, 3);
            let (total, w) = weighted_mtl_loss(&[0.7], &mut s).unwrap();
            assert!((total - 0.7).abs() < 1e-15 && (w[0] - 1.0).abs() < 1e-15);
        }
        // UW with one task is a positive rescaling plus a constant
        let mut s = WeightingState::new(Strategy::Uw, 1, 3);
        let (_, w) = weighted_mtl_loss(&[0.7], &mut s).unwrap();
        assert!(w[0] > 0.0);
    }

    proptest! {
        #[test]
        fn weights_are_valid(k in 1usize..8, seed in any::<u64>(), draws in 1usize..5) {
            for kind in [Strategy::Ls, Strategy::Uw, Strategy::Rlw] {
                let mut s = WeightingState::new(kind, k, seed);
                for _ in 0..draws {
                    let w = s.weights();
                    prop_assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
                    if kind != Strategy::Uw {
                        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }
}
