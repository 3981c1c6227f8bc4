//! State-space model contract and the stochastic pendulum benchmark.
//!
//! The experimental-design machinery in this crate works on discrete-time
//! state-space models with a controlled transition kernel
//! `f(x_{t+1} | x_t, xi_t, theta)`, where `xi_t` is the design chosen at
//! step `t` and `theta` the unknown parameter vector the experimenter wants
//! to learn. The [`Model`] trait captures exactly what the filter, smoother,
//! and evaluators need: an initial state, a parameter prior, transition
//! sampling, and transition log-densities.
//!
//! The shipped benchmark is a damped pendulum driven by a torque design,
//! discretized with Euler-Maruyama at step `dt`:
//!
//! ```text
//! q_{t+1}    = q_t + qdot_t * dt                                  (exact)
//! qdot_{t+1} = qdot_t + h(x_t, xi_t) . theta * dt + w_t,
//!              w_t ~ Normal(0, diffusion^2 * dt)
//! h(x, xi)   = [-sin q, -qdot, xi]
//! ```
//!
//! The drift is linear in `theta = (3g/2l, 3d/(m l^2), 3/(m l^2))`, so with
//! a Gaussian prior the posterior over `theta` stays Gaussian: observing a
//! transition is a scalar Bayesian linear regression with regressor
//! `h(x, xi) * dt` and noise variance `diffusion^2 * dt`. [`GaussianBelief`]
//! plus the [`ConjugateOracle`] impl carry that closed form; it is both a
//! production inference strategy and the ground truth that particle-based
//! strategies are validated against.
//!
//! Two log-densities, one support caveat: the position component of the
//! pendulum transition is deterministic, so `transition_logpdf` returns
//! `-inf` whenever `x_next`'s position disagrees with `q_t + qdot_t * dt`
//! (tolerance 1e-9) and the Gaussian density of the velocity increment
//! otherwise. Cross-trajectory comparisons (backward smoothing weights) need
//! a density that does not vanish when two distinct particles are spliced;
//! `innovation_logpdf` evaluates only the noise-driven coordinates and is
//! finite for any position pair. On the support of a realized transition the
//! two agree exactly.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

/// State vector; for the pendulum `[angle, angular velocity]`.
pub type State = Vector2<f64>;

/// Model parameter vector.
pub type Theta = Vector3<f64>;

/// One element of an experiment trajectory: the outcome together with the
/// design that produced it. The initial state carries no design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: State,
    /// Design applied on the transition into `x`; `None` at time zero.
    pub xi_prev: Option<f64>,
}

impl AugmentedState {
    pub fn initial(x: State) -> Self {
        Self { x, xi_prev: None }
    }

    pub fn step(x: State, xi: f64) -> Self {
        Self { x, xi_prev: Some(xi) }
    }
}

const POSITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("covariance is not symmetric (max asymmetry {max_asym:.3e})")]
    AsymmetricCovariance { max_asym: f64 },
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    #[error("history element {index} carries no design")]
    MissingDesign { index: usize },
}

/// Gaussian distribution over `theta`, the conjugate posterior family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    mean: Theta,
    cov: Matrix3<f64>,
}

impl GaussianBelief {
    /// Validates symmetry and positive definiteness.
    pub fn new(mean: Theta, cov: Matrix3<f64>) -> Result<Self, ModelError> {
        if mean.iter().any(|x| !x.is_finite()) || cov.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFinite { context: "belief" });
        }
        let max_asym = (cov - cov.transpose()).abs().max();
        if max_asym > 1e-9 {
            return Err(ModelError::AsymmetricCovariance { max_asym });
        }
        if cov.cholesky().is_none() {
            return Err(ModelError::NotPositiveDefinite);
        }
        Ok(Self { mean, cov })
    }

    pub fn from_diag(mean: [f64; 3], var: [f64; 3]) -> Result<Self, ModelError> {
        let cov = Matrix3::from_diagonal(&Vector3::new(var[0], var[1], var[2]));
        Self::new(Theta::from_row_slice(&mean), cov)
    }

    pub fn mean(&self) -> &Theta {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix3<f64> {
        &self.cov
    }

    /// `log det` of the covariance, via Cholesky.
    pub fn log_det_cov(&self) -> f64 {
        let chol = self.cov.cholesky().expect("validated at construction");
        2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Differential entropy, `(3/2) ln(2 pi e) + (1/2) ln det Cov`.
    pub fn entropy(&self) -> f64 {
        1.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln() + 0.5 * self.log_det_cov()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Theta {
        let l = self.cov.cholesky().expect("validated at construction").l();
        let eps = Theta::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal());
        self.mean + l * eps
    }

    pub fn logpdf(&self, theta: &Theta) -> f64 {
        let chol = self.cov.cholesky().expect("validated at construction");
        let diff = theta - self.mean;
        let solved = chol.solve(&diff);
        let quad = diff.dot(&solved);
        -0.5 * quad - 0.5 * self.log_det_cov() - 1.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Closed-form parameter inference for conditionally linear-Gaussian models.
pub trait ConjugateOracle {
    fn prior_belief(&self) -> GaussianBelief;

    /// Posterior after observing one transition `(x, xi) -> x_next`.
    fn update(
        &self,
        belief: &GaussianBelief,
        x: &State,
        xi: f64,
        x_next: &State,
    ) -> Result<GaussianBelief, ModelError>;

    /// `log p(x_next | x, xi)` with `theta` marginalized under `belief`.
    fn marginal_loglik(&self, belief: &GaussianBelief, x: &State, xi: f64, x_next: &State) -> f64;
}

/// What the filtering, smoothing, and evaluation layers require of a model.
pub trait Model: Sync {
    fn init_state(&self) -> State;

    fn sample_prior_theta(&self, rng: &mut RngStream) -> Theta;

    /// Log-density of the parameter prior at `theta`.
    fn prior_logpdf(&self, theta: &Theta) -> f64;

    /// Per-dimension prior standard deviation; sets the reference scale for
    /// the particle-jittering kernel. Zero entries are allowed (degenerate
    /// prior dimensions get no jitter).
    fn prior_theta_std(&self) -> Vector3<f64>;

    fn sample_transition(&self, x: &State, xi: f64, theta: &Theta, rng: &mut RngStream) -> State;

    /// Full transition log-density, `-inf` off the model's support.
    fn transition_logpdf(&self, x_next: &State, x: &State, xi: f64, theta: &Theta) -> f64;

    /// Log-density of the noise-driven coordinates only.
    ///
    /// Agrees with [`Model::transition_logpdf`] on the support of a realized
    /// transition. Finite even when deterministic coordinates of `x_next`
    /// could not have followed from `x`, which is what lets backward
    /// smoothing weigh a splice of two distinct trajectories. Models without
    /// deterministic coordinates can keep the default.
    fn innovation_logpdf(&self, x_next: &State, x: &State, xi: f64, theta: &Theta) -> f64 {
        self.transition_logpdf(x_next, x, xi, theta)
    }

    /// Log-posterior kernel of `theta` given a whole trajectory prefix:
    /// prior plus the sum of transition terms. `history[0]` is the initial
    /// augmented state; every later element must carry the design that
    /// produced it. A `-inf` term short-circuits.
    ///
    /// Full-history rejuvenation calls this once per proposal, so the
    /// provided body keeps the per-transition evaluations statically
    /// dispatched; override only if the model has a cheaper sufficient
    /// statistic.
    fn history_loglik(&self, history: &[AugmentedState], theta: &Theta) -> Result<f64, ModelError> {
        history_loglik_impl(self, history, theta)
    }

    /// Closed-form posterior oracle, when the model has one.
    fn conjugate(&self) -> Option<&dyn ConjugateOracle> {
        None
    }
}

fn history_loglik_impl<M: Model + ?Sized>(
    model: &M,
    history: &[AugmentedState],
    theta: &Theta,
) -> Result<f64, ModelError> {
    let mut lp = model.prior_logpdf(theta);
    for s in 1..history.len() {
        let xi = history[s]
            .xi_prev
            .ok_or(ModelError::MissingDesign { index: s })?;
        lp += model.transition_logpdf(&history[s].x, &history[s - 1].x, xi, theta);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
    }
    Ok(lp)
}

/// Pendulum benchmark configuration, including the parameter prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumConfig {
    /// Euler-Maruyama step size.
    pub dt: f64,
    /// Number of experiments in one episode.
    pub horizon: usize,
    /// Diffusion coefficient on the velocity component.
    pub diffusion: f64,
    /// Initial state `[q, qdot]`.
    pub x0: [f64; 2],
    /// Prior mean over `theta`.
    pub prior_mean: [f64; 3],
    /// Prior variances (diagonal covariance).
    pub prior_var: [f64; 3],
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            dt: 0.05,
            horizon: 50,
            diffusion: 0.1,
            x0: [0.0, 0.0],
            prior_mean: [14.7, 0.0, 3.0],
            prior_var: [0.1, 0.01, 0.1],
        }
    }
}

/// The stochastic pendulum with torque designs.
#[derive(Debug, Clone)]
pub struct Pendulum {
    cfg: PendulumConfig,
    /// Velocity-increment noise variance, `diffusion^2 * dt`.
    sigma2: f64,
    /// `-(1/2) ln(2 pi sigma2)`, hoisted out of the density hot path.
    ln_norm: f64,
    /// Prior log-normalizer, `-(1/2) sum ln(2 pi var_i)`; the prior is
    /// diagonal, so its density needs no linear algebra.
    prior_ln_norm: f64,
}

impl Pendulum {
    pub fn new(cfg: PendulumConfig) -> Self {
        let sigma2 = cfg.diffusion * cfg.diffusion * cfg.dt;
        let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * sigma2).ln();
        let prior_ln_norm = -0.5
            * cfg
                .prior_var
                .iter()
                .map(|v| (2.0 * std::f64::consts::PI * v).ln())
                .sum::<f64>();
        Self { cfg, sigma2, ln_norm, prior_ln_norm }
    }

    pub fn config(&self) -> &PendulumConfig {
        &self.cfg
    }

    /// Noise variance of one velocity increment.
    pub fn noise_var(&self) -> f64 {
        self.sigma2
    }

    /// Differential entropy of one transition, `(1/2) ln(2 pi e sigma2)`.
    /// Constant in `theta` and the design, because the noise is additive.
    pub fn step_entropy(&self) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * self.sigma2).ln()
    }

    /// Drift features `h(x, xi) = [-sin q, -qdot, xi]`; the velocity drift is
    /// `h . theta`.
    pub fn drift_features(&self, x: &State, xi: f64) -> Theta {
        Theta::new(-x[0].sin(), -x[1], xi)
    }

    /// Deterministic part of the next state.
    fn drift_mean(&self, x: &State, xi: f64, theta: &Theta) -> State {
        let h = self.drift_features(x, xi);
        State::new(x[0] + x[1] * self.cfg.dt, x[1] + h.dot(theta) * self.cfg.dt)
    }

    /// `theta` implied by physical constants: gravity `g`, length `l`,
    /// mass `m`, damping `d`.
    pub fn physical_theta(g: f64, l: f64, m: f64, d: f64) -> Theta {
        Theta::new(3.0 * g / (2.0 * l), 3.0 * d / (m * l * l), 3.0 / (m * l * l))
    }

    /// Regression view of one transition: response `y = qdot_next - qdot`,
    /// regressor `phi = h(x, xi) * dt`, noise variance [`Self::noise_var`].
    fn regression_pair(&self, x: &State, xi: f64, x_next: &State) -> (Theta, f64) {
        (self.drift_features(x, xi) * self.cfg.dt, x_next[1] - x[1])
    }

    fn position_consistent(&self, x_next: &State, x: &State) -> bool {
        (x_next[0] - (x[0] + x[1] * self.cfg.dt)).abs() <= POSITION_TOL
    }
}

impl Model for Pendulum {
    fn init_state(&self) -> State {
        State::new(self.cfg.x0[0], self.cfg.x0[1])
    }

    fn sample_prior_theta(&self, rng: &mut RngStream) -> Theta {
        self.prior_belief().sample(rng)
    }

    fn prior_logpdf(&self, theta: &Theta) -> f64 {
        let mut quad = 0.0;
        for i in 0..3 {
            let d = theta[i] - self.cfg.prior_mean[i];
            quad += d * d / self.cfg.prior_var[i];
        }
        self.prior_ln_norm - 0.5 * quad
    }

    fn prior_theta_std(&self) -> Vector3<f64> {
        let v = self.cfg.prior_var;
        Vector3::new(v[0].sqrt(), v[1].sqrt(), v[2].sqrt())
    }

    fn sample_transition(&self, x: &State, xi: f64, theta: &Theta, rng: &mut RngStream) -> State {
        let mean = self.drift_mean(x, xi, theta);
        let noise = self.cfg.diffusion * self.cfg.dt.sqrt() * rng.standard_normal();
        State::new(mean[0], mean[1] + noise)
    }

    fn transition_logpdf(&self, x_next: &State, x: &State, xi: f64, theta: &Theta) -> f64 {
        if !self.position_consistent(x_next, x) {
            return f64::NEG_INFINITY;
        }
        self.innovation_logpdf(x_next, x, xi, theta)
    }

    fn innovation_logpdf(&self, x_next: &State, x: &State, xi: f64, theta: &Theta) -> f64 {
        let mean = x[1] + self.drift_features(x, xi).dot(theta) * self.cfg.dt;
        let resid = x_next[1] - mean;
        self.ln_norm - 0.5 * resid * resid / self.sigma2
    }

    fn conjugate(&self) -> Option<&dyn ConjugateOracle> {
        Some(self)
    }
}

impl ConjugateOracle for Pendulum {
    fn prior_belief(&self) -> GaussianBelief {
        GaussianBelief::from_diag(self.cfg.prior_mean, self.cfg.prior_var)
            .expect("pendulum prior is diagonal with positive variances")
    }

    fn update(
        &self,
        belief: &GaussianBelief,
        x: &State,
        xi: f64,
        x_next: &State,
    ) -> Result<GaussianBelief, ModelError> {
        let (phi, y) = self.regression_pair(x, xi, x_next);
        let cov_phi = belief.cov() * phi;
        let s = self.sigma2 + phi.dot(&cov_phi);
        let gain = cov_phi / s;
        let mean = belief.mean() + gain * (y - phi.dot(belief.mean()));
        let mut cov = belief.cov() - cov_phi * cov_phi.transpose() / s;
        // Rank-one downdates drift off symmetry after many steps; re-center.
        cov = (cov + cov.transpose()) * 0.5;
        GaussianBelief::new(mean, cov)
    }

    fn marginal_loglik(&self, belief: &GaussianBelief, x: &State, xi: f64, x_next: &State) -> f64 {
        if !self.position_consistent(x_next, x) {
            return f64::NEG_INFINITY;
        }
        let (phi, y) = self.regression_pair(x, xi, x_next);
        let s = self.sigma2 + phi.dot(&(belief.cov() * phi));
        let resid = y - phi.dot(belief.mean());
        -0.5 * (2.0 * std::f64::consts::PI * s).ln() - 0.5 * resid * resid / s
    }
}
