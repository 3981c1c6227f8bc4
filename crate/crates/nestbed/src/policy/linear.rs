//! Reduced design policy: linear features through the same squashed
//! Gaussian head.
//!
//! Five parameters: three feature weights on `[q, qdot, xi_prev]`, a bias,
//! and the log standard deviation. Memoryless by construction (the state is
//! just the features of the last trajectory element), which makes closed
//! hand computations possible in tests where the recurrent policy would be
//! opaque. Implements the same contract as the full policy, including
//! scoring.

use serde::{Deserialize, Serialize};

use super::{PolicyError, PolicyState};
use crate::model::AugmentedState;

pub const LINEAR_PARAM_COUNT: usize = 5;
const LOG_STD_IDX: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    params: Vec<f64>,
}

impl LinearPolicy {
    /// Zero feature weights and bias; designs start centered.
    pub fn init(init_log_std: f64) -> Self {
        let mut params = vec![0.0; LINEAR_PARAM_COUNT];
        params[LOG_STD_IDX] = init_log_std;
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self, PolicyError> {
        if params.len() != LINEAR_PARAM_COUNT {
            return Err(PolicyError::BadArch(format!(
                "linear policy takes {LINEAR_PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        LINEAR_PARAM_COUNT
    }

    fn features(z: &AugmentedState) -> [f64; 4] {
        [z.x[0], z.x[1], z.xi_prev.unwrap_or(0.0), 1.0]
    }

    pub fn init_state(&self) -> PolicyState {
        PolicyState {
            layers: vec![vec![0.0, 0.0, 0.0, 1.0]],
            step: 0,
        }
    }

    pub fn step(&self, state: &PolicyState, z: &AugmentedState) -> PolicyState {
        PolicyState {
            layers: vec![Self::features(z).to_vec()],
            step: state.step + 1,
        }
    }

    pub fn mean_log_std(&self, state: &PolicyState) -> (f64, f64) {
        let feat = &state.layers[0];
        let mu: f64 = feat.iter().zip(self.params.iter()).map(|(f, w)| f * w).sum();
        (mu, self.params[LOG_STD_IDX])
    }

    /// Gradient of the summed design log-densities; same contract as the
    /// recurrent policy's score.
    pub fn score(&self, traj: &[AugmentedState]) -> Result<Vec<f64>, PolicyError> {
        if traj.is_empty() {
            return Err(PolicyError::TrajectoryTooShort);
        }
        let log_std = self.params[LOG_STD_IDX];
        let sd2 = (2.0 * log_std).exp();
        let mut grads = vec![0.0; LINEAR_PARAM_COUNT];
        for t in 0..traj.len() - 1 {
            let xi = traj[t + 1]
                .xi_prev
                .ok_or(PolicyError::DesignMissing { index: t + 1 })?;
            if xi.abs() >= 1.0 {
                return Err(PolicyError::DesignOutOfRange { xi });
            }
            let feat = Self::features(&traj[t]);
            let mu: f64 = feat.iter().zip(self.params.iter()).map(|(f, w)| f * w).sum();
            let resid = xi.atanh() - mu;
            let dmu = resid / sd2;
            for (g, f) in grads.iter_mut().zip(feat.iter()) {
                *g += dmu * f;
            }
            grads[LOG_STD_IDX] += resid * resid / sd2 - 1.0;
        }
        Ok(grads)
    }
}
