//! The recurrent design policy: encoder, two GRU cells, Gaussian head.
//!
//! The policy consumes the experiment trajectory one element at a time.
//! Each element (state plus previous design) is encoded by a small MLP,
//! pushed through two stacked GRU cells, and the final hidden state is
//! mapped by the head MLP to the mean of a Gaussian over the pre-squash
//! design; a learnable state-independent log standard deviation completes
//! the distribution. The design itself is `tanh` of a draw from that
//! Gaussian, so scoring happens through a change of variables handled in
//! the parent module.
//!
//! `score` runs truncation-free backpropagation through time over a whole
//! trajectory and returns the gradient of the summed design log-densities
//! with respect to every parameter. The squash Jacobian is parameter-free
//! and drops out of the gradient. Correctness of the backward pass is
//! pinned against central finite differences in the tests at the bottom.

use serde::{Deserialize, Serialize};

use super::arch::{Layout, PolicyArchConfig};
use super::net::{
    dense_backward, dense_forward, gru_backward, gru_forward, relu_backward, relu_inplace, GruCache,
};
use super::{PolicyError, PolicyState};
use crate::model::AugmentedState;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruPolicy {
    arch: PolicyArchConfig,
    params: Vec<f64>,
}

struct StepCache {
    enc_in: Vec<f64>,
    enc_a1: Vec<f64>,
    enc_a2: Vec<f64>,
    gru: [GruCache; 2],
    h2: Vec<f64>,
    head_a1: Vec<f64>,
    head_a2: Vec<f64>,
    mu: f64,
}

impl GruPolicy {
    /// Fresh policy with near-zero initial design means: hidden layers get
    /// fan-in scaled uniform weights and small uniform biases, the last head
    /// layer is shrunk hard so early designs are dominated by exploration
    /// noise rather than an arbitrary initial mean.
    pub fn init(arch: PolicyArchConfig, rng: &mut RngStream) -> Result<Self, PolicyError> {
        arch.validate().map_err(PolicyError::BadArch)?;
        if arch.input_dim != 3 {
            return Err(PolicyError::BadArch(
                "input_dim must be 3: two state components plus the previous design".into(),
            ));
        }
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut fill = |span: super::arch::Span, limit: f64, params: &mut Vec<f64>| {
            for v in span.slice_mut(params) {
                *v = rng.uniform(-limit, limit);
            }
        };
        for d in layout.enc.iter().chain(layout.head.iter().take(2)) {
            let limit = (6.0 / d.nin as f64).sqrt();
            fill(d.w, limit, &mut params);
            // Small nonzero biases matter here: the first trajectory element
            // can be exactly zero (resting start, no previous design), and
            // with zero biases every ReLU unit would then sit exactly at its
            // kink, making the first design independent of all encoder
            // weights and the gradient ill-defined there.
            fill(d.b, 0.1, &mut params);
        }
        for g in &layout.gru {
            let wl = (6.0 / (g.nin + g.nh) as f64).sqrt();
            let ul = (6.0 / (2 * g.nh) as f64).sqrt();
            for s in [g.wr, g.wu, g.wc] {
                fill(s, wl, &mut params);
            }
            for s in [g.ur, g.uu, g.uc] {
                fill(s, ul, &mut params);
            }
        }
        let out = layout.head[2];
        let limit = 0.01 * (6.0 / (out.nin + out.nout) as f64).sqrt();
        fill(out.w, limit, &mut params);
        for v in layout.log_std.slice_mut(&mut params) {
            *v = arch.init_log_std;
        }
        Ok(Self { arch, params })
    }

    pub fn from_parts(arch: PolicyArchConfig, params: Vec<f64>) -> Result<Self, PolicyError> {
        arch.validate().map_err(PolicyError::BadArch)?;
        let expect = Layout::new(&arch).total;
        if params.len() != expect {
            return Err(PolicyError::BadArch(format!(
                "parameter vector has {} entries, architecture needs {}",
                params.len(),
                expect
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &PolicyArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch)
    }

    pub fn init_state(&self) -> PolicyState {
        PolicyState {
            layers: vec![
                vec![0.0; self.arch.recurrent[0]],
                vec![0.0; self.arch.recurrent[1]],
            ],
            step: 0,
        }
    }

    fn encode_input(&self, z: &AugmentedState) -> Vec<f64> {
        vec![z.x[0], z.x[1], z.xi_prev.unwrap_or(0.0)]
    }

    fn encoder_forward(
        &self,
        layout: &Layout,
        input: &[f64],
        mut cache: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
    ) -> Vec<f64> {
        let mut a1 = vec![0.0; layout.enc[0].nout];
        dense_forward(&layout.enc[0], &self.params, input, &mut a1);
        relu_inplace(&mut a1);
        let mut a2 = vec![0.0; layout.enc[1].nout];
        dense_forward(&layout.enc[1], &self.params, &a1, &mut a2);
        relu_inplace(&mut a2);
        let mut code = vec![0.0; layout.enc[2].nout];
        dense_forward(&layout.enc[2], &self.params, &a2, &mut code);
        if let Some((c1, c2)) = cache.take() {
            *c1 = a1;
            *c2 = a2;
        }
        code
    }

    fn head_forward(
        &self,
        layout: &Layout,
        h: &[f64],
        mut cache: Option<(&mut Vec<f64>, &mut Vec<f64>)>,
    ) -> f64 {
        let mut a1 = vec![0.0; layout.head[0].nout];
        dense_forward(&layout.head[0], &self.params, h, &mut a1);
        relu_inplace(&mut a1);
        let mut a2 = vec![0.0; layout.head[1].nout];
        dense_forward(&layout.head[1], &self.params, &a1, &mut a2);
        relu_inplace(&mut a2);
        let mut out = vec![0.0; 1];
        dense_forward(&layout.head[2], &self.params, &a2, &mut out);
        if let Some((c1, c2)) = cache.take() {
            *c1 = a1;
            *c2 = a2;
        }
        out[0]
    }

    /// Advances the recurrent state by one trajectory element.
    pub fn step(&self, state: &PolicyState, z: &AugmentedState) -> PolicyState {
        assert_eq!(state.layers.len(), 2, "state does not belong to this policy");
        let layout = self.layout();
        let input = self.encode_input(z);
        let code = self.encoder_forward(&layout, &input, None);
        let h1 = gru_forward(&layout.gru[0], &self.params, &code, &state.layers[0], None);
        let h2 = gru_forward(&layout.gru[1], &self.params, &h1, &state.layers[1], None);
        PolicyState {
            layers: vec![h1, h2],
            step: state.step + 1,
        }
    }

    /// Design distribution at the current state: pre-squash mean and log
    /// standard deviation.
    pub fn mean_log_std(&self, state: &PolicyState) -> (f64, f64) {
        let layout = self.layout();
        let mu = self.head_forward(&layout, &state.layers[1], None);
        (mu, layout.log_std.slice(&self.params)[0])
    }

    /// Gradient of `sum_t log pi(xi_t | z_{0:t})` over the trajectory, with
    /// one entry per parameter. Designs are read from `traj[t + 1].xi_prev`.
    pub fn score(&self, traj: &[AugmentedState]) -> Result<Vec<f64>, PolicyError> {
        if traj.is_empty() {
            return Err(PolicyError::TrajectoryTooShort);
        }
        let layout = self.layout();
        let n_steps = traj.len() - 1;
        let log_std = layout.log_std.slice(&self.params)[0];
        let sd2 = (2.0 * log_std).exp();

        // Forward with caches.
        let mut caches: Vec<StepCache> = Vec::with_capacity(n_steps);
        let mut h = self.init_state();
        for t in 0..n_steps {
            let input = self.encode_input(&traj[t]);
            let mut a1 = Vec::new();
            let mut a2 = Vec::new();
            let code = self.encoder_forward(&layout, &input, Some((&mut a1, &mut a2)));
            let mut g1 = Vec::new();
            let mut g2 = Vec::new();
            let h1 = gru_forward(&layout.gru[0], &self.params, &code, &h.layers[0], Some(&mut g1));
            let h2 = gru_forward(&layout.gru[1], &self.params, &h1, &h.layers[1], Some(&mut g2));
            let mut b1 = Vec::new();
            let mut b2 = Vec::new();
            let mu = self.head_forward(&layout, &h2, Some((&mut b1, &mut b2)));
            caches.push(StepCache {
                enc_in: input,
                enc_a1: a1,
                enc_a2: a2,
                gru: [g1.pop().expect("cache filled"), g2.pop().expect("cache filled")],
                h2: h2.clone(),
                head_a1: b1,
                head_a2: b2,
                mu,
            });
            h = PolicyState {
                layers: vec![h1, h2],
                step: h.step + 1,
            };
        }

        // Backward through time.
        let mut grads = vec![0.0; layout.total];
        let mut carry1 = vec![0.0; self.arch.recurrent[0]];
        let mut carry2 = vec![0.0; self.arch.recurrent[1]];
        for t in (0..n_steps).rev() {
            let xi = traj[t + 1]
                .xi_prev
                .ok_or(PolicyError::DesignMissing { index: t + 1 })?;
            if !(xi.is_finite() && xi.abs() < 1.0) {
                return Err(PolicyError::DesignOutOfRange { xi });
            }
            let cache = &caches[t];
            let a = xi.atanh();
            let resid = a - cache.mu;
            let dmu = resid / sd2;
            grads[layout.log_std.off] += resid * resid / sd2 - 1.0;

            // Head backward.
            let mut db2 = vec![0.0; layout.head[2].nin];
            dense_backward(
                &layout.head[2],
                &self.params,
                &mut grads,
                &cache.head_a2,
                &[dmu],
                Some(&mut db2),
            );
            relu_backward(&cache.head_a2, &mut db2);
            let mut db1 = vec![0.0; layout.head[1].nin];
            dense_backward(
                &layout.head[1],
                &self.params,
                &mut grads,
                &cache.head_a1,
                &db2,
                Some(&mut db1),
            );
            relu_backward(&cache.head_a1, &mut db1);
            let mut dh2 = vec![0.0; layout.head[0].nin];
            dense_backward(
                &layout.head[0],
                &self.params,
                &mut grads,
                &cache.h2,
                &db1,
                Some(&mut dh2),
            );

            // Recurrent backward; add the carry from step t + 1.
            for (d, c) in dh2.iter_mut().zip(carry2.iter()) {
                *d += c;
            }
            let (dh1_from2, new_carry2) =
                gru_backward(&layout.gru[1], &self.params, &mut grads, &cache.gru[1], &dh2);
            carry2 = new_carry2;
            let mut dh1 = dh1_from2;
            for (d, c) in dh1.iter_mut().zip(carry1.iter()) {
                *d += c;
            }
            let (dcode, new_carry1) =
                gru_backward(&layout.gru[0], &self.params, &mut grads, &cache.gru[0], &dh1);
            carry1 = new_carry1;

            // Encoder backward.
            let mut da2 = vec![0.0; layout.enc[2].nin];
            dense_backward(
                &layout.enc[2],
                &self.params,
                &mut grads,
                &cache.enc_a2,
                &dcode,
                Some(&mut da2),
            );
            relu_backward(&cache.enc_a2, &mut da2);
            let mut da1 = vec![0.0; layout.enc[1].nin];
            dense_backward(
                &layout.enc[1],
                &self.params,
                &mut grads,
                &cache.enc_a1,
                &da2,
                Some(&mut da1),
            );
            relu_backward(&cache.enc_a1, &mut da1);
            dense_backward(
                &layout.enc[0],
                &self.params,
                &mut grads,
                &cache.enc_in,
                &da1,
                None,
            );
        }
        Ok(grads)
    }

    /// Summed design log-density along a trajectory; the quantity whose
    /// gradient [`Self::score`] computes. Used by tests and diagnostics.
    pub fn trajectory_logpdf(&self, traj: &[AugmentedState]) -> Result<f64, PolicyError> {
        if traj.is_empty() {
            return Err(PolicyError::TrajectoryTooShort);
        }
        let mut state = self.init_state();
        let mut total = 0.0;
        for t in 0..traj.len() - 1 {
            state = self.step(&state, &traj[t]);
            let xi = traj[t + 1]
                .xi_prev
                .ok_or(PolicyError::DesignMissing { index: t + 1 })?;
            let (mu, log_std) = self.mean_log_std(&state);
            total += super::squashed_gaussian_logpdf(xi, mu, log_std);
        }
        Ok(total)
    }
}
