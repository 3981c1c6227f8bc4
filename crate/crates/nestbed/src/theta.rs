//! Per-trajectory parameter inference: the particle clouds that ride along
//! with each outer trajectory particle.
//!
//! Three interchangeable ways to track `p(theta | trajectory so far)`:
//!
//! - the jittering step ([`cloud_step_npf`]): reweight by the newest
//!   transition, resample, perturb each survivor with a kernel whose scale
//!   shrinks as `1/sqrt(M)`. O(1) per step, which is what makes the outer
//!   filter linear in the horizon.
//! - the rejuvenation step ([`cloud_step_ibis`]): reweight and resample the
//!   same way, then move each particle with random-walk Metropolis-Hastings
//!   targeting the exact posterior given the whole prefix. O(t) per step,
//!   quadratic over a full episode — the accuracy-versus-cost tradeoff the
//!   jittering filter is designed to beat.
//! - the conjugate closed form (`GaussianBelief` in the model layer), used
//!   as both a baseline strategy and the oracle these approximations are
//!   tested against.
//!
//! [`cloud_transition_logpdf_rb`] is the piece backward smoothing needs: the
//! density of a whole successor cloud given its parent cloud, with the
//! resampling indices summed out in closed form. That marginalization is
//! only valid because resampling is multinomial — the indices have to be
//! independent draws for the product-of-sums factorization to hold, which is
//! why no systematic or stratified resampler exists in this crate.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{AugmentedState, Model, ModelError, State, Theta};
use crate::rng::RngStream;
use crate::weights::{log_sum_exp, multinomial_resample, AncestorIndex, LogWeights, WeightError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ThetaError {
    #[error("every parameter particle has zero likelihood for this transition")]
    DegenerateCloud,
    #[error("cloud must hold at least one particle")]
    Empty,
    #[error("history must hold at least two elements to define a transition")]
    HistoryTooShort,
    #[error("history element {index} carries no design")]
    DesignMissing { index: usize },
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Weighted parameter particles attached to one trajectory, together with
/// the resampling indices of the most recent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaCloud {
    pub particles: Vec<Theta>,
    pub weights: LogWeights,
    pub ancestors: Vec<AncestorIndex>,
}

impl ThetaCloud {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Weight-averaged particle mean.
    pub fn mean(&self) -> Result<Theta, ThetaError> {
        let w = self.weights.normalized()?;
        let mut mean = Theta::zeros();
        for (theta, wi) in self.particles.iter().zip(w.iter()) {
            mean += theta * *wi;
        }
        Ok(mean)
    }

    /// Weight-averaged covariance about [`ThetaCloud::mean`].
    pub fn covariance(&self) -> Result<Matrix3<f64>, ThetaError> {
        let w = self.weights.normalized()?;
        let mean = self.mean()?;
        let mut cov = Matrix3::zeros();
        for (theta, wi) in self.particles.iter().zip(w.iter()) {
            let d = theta - mean;
            cov += d * d.transpose() * *wi;
        }
        Ok(cov)
    }
}

/// Scale of the particle-perturbing kernel.
///
/// The kernel is additive Gaussian with per-dimension standard deviation
/// `base_scale[d] / sqrt(m)`: a bigger cloud needs less jitter, and the
/// `1/sqrt(m)` schedule is what keeps the perturbation bias of the same
/// order as the cloud's own Monte Carlo error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    /// Per-dimension base standard deviation, before the `1/sqrt(m)` factor.
    pub base_scale: Vector3<f64>,
    /// Cloud size the scale is tied to.
    pub m: usize,
    /// Optional clamp box `(lo, hi)` applied after perturbation. Off by
    /// default; when set, the kernel density used by backward smoothing
    /// ignores the boundary atoms, so keep the box wide relative to the
    /// particle spread if both features are used together.
    pub clamp: Option<(Vector3<f64>, Vector3<f64>)>,
}

impl JitterConfig {
    pub fn new(base_scale: Vector3<f64>, m: usize) -> Self {
        Self {
            base_scale,
            m,
            clamp: None,
        }
    }

    /// Default schedule: half the prior standard deviation per dimension.
    pub fn from_prior_std(prior_std: Vector3<f64>, m: usize) -> Self {
        Self::new(prior_std * 0.5, m)
    }

    /// Effective per-dimension standard deviation of the kernel.
    pub fn std(&self) -> Vector3<f64> {
        self.base_scale / (self.m.max(1) as f64).sqrt()
    }
}

/// `m` independent prior draws with uniform weights.
pub fn cloud_init(model: &dyn Model, m: usize, rng: &mut RngStream) -> Result<ThetaCloud, ThetaError> {
    if m == 0 {
        return Err(ThetaError::Empty);
    }
    let particles = (0..m).map(|_| model.sample_prior_theta(rng)).collect();
    Ok(ThetaCloud {
        particles,
        weights: LogWeights::uniform(m)?,
        ancestors: (0..m).collect(),
    })
}

/// Weights each particle by the newest transition's likelihood.
///
/// The weight is the transition density alone: the design distribution does
/// not depend on `theta`, so the policy factor cancels from every
/// parameter-posterior ratio. Incoming weights are expected uniform (both
/// stepping schemes resample every step), so the new weights replace rather
/// than multiply.
pub fn cloud_reweight(
    cloud: &ThetaCloud,
    model: &dyn Model,
    x_prev: &State,
    xi: f64,
    x_next: &State,
) -> Result<ThetaCloud, ThetaError> {
    if cloud.is_empty() {
        return Err(ThetaError::Empty);
    }
    let log: Vec<f64> = cloud
        .particles
        .iter()
        .map(|theta| model.transition_logpdf(x_next, x_prev, xi, theta))
        .collect();
    let weights = LogWeights::from_log(log)?;
    if weights.is_degenerate() {
        return Err(ThetaError::DegenerateCloud);
    }
    Ok(ThetaCloud {
        particles: cloud.particles.clone(),
        weights,
        ancestors: cloud.ancestors.clone(),
    })
}

/// `log p(x_next | x_prev, xi, cloud)`: the transition density with `theta`
/// averaged over the cloud's current weights. `-inf` when no particle
/// supports the transition — callers in the outer filter treat that as a
/// zero-potential particle rather than an error.
pub fn cloud_predictive_logpdf(
    cloud: &ThetaCloud,
    model: &dyn Model,
    x_prev: &State,
    xi: f64,
    x_next: &State,
) -> f64 {
    let log_norm = match cloud.weights.log_normalized() {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    let terms: Vec<f64> = cloud
        .particles
        .iter()
        .zip(log_norm.iter())
        .map(|(theta, lw)| lw + model.transition_logpdf(x_next, x_prev, xi, theta))
        .collect();
    log_sum_exp(&terms)
}

/// One Gaussian perturbation with the `1/sqrt(m)` schedule.
pub fn jitter_kernel(theta: &Theta, jc: &JitterConfig, rng: &mut RngStream) -> Theta {
    let std = jc.std();
    let mut out = Theta::new(
        theta[0] + std[0] * rng.standard_normal(),
        theta[1] + std[1] * rng.standard_normal(),
        theta[2] + std[2] * rng.standard_normal(),
    );
    if let Some((lo, hi)) = &jc.clamp {
        for d in 0..3 {
            out[d] = out[d].clamp(lo[d], hi[d]);
        }
    }
    out
}

/// Log-density of [`jitter_kernel`]'s Gaussian at `theta_next` given
/// `theta_prev`. A zero-scale dimension is a point mass: it contributes
/// nothing when the coordinates match exactly and `-inf` otherwise.
pub fn jitter_logpdf(theta_next: &Theta, theta_prev: &Theta, jc: &JitterConfig) -> f64 {
    let std = jc.std();
    let mut lp = 0.0;
    for d in 0..3 {
        let diff = theta_next[d] - theta_prev[d];
        if std[d] == 0.0 {
            if diff != 0.0 {
                return f64::NEG_INFINITY;
            }
            continue;
        }
        let z = diff / std[d];
        lp += -0.5 * z * z - std[d].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    lp
}

/// The O(1) inner step: reweight by the newest transition, resample with
/// recorded indices, jitter each survivor. Output weights are uniform.
pub fn cloud_step_npf(
    cloud: &ThetaCloud,
    model: &dyn Model,
    x_prev: &State,
    xi: f64,
    x_next: &State,
    jc: &JitterConfig,
    rng: &mut RngStream,
) -> Result<ThetaCloud, ThetaError> {
    cloud_step_npf_recorded(cloud, model, x_prev, xi, x_next, jc, rng).map(|(c, _)| c)
}

/// [`cloud_step_npf`] returning also the pre-resampling weights, which the
/// filter stores so backward smoothing can reuse them without re-evaluating
/// the transition likelihoods.
pub fn cloud_step_npf_recorded(
    cloud: &ThetaCloud,
    model: &dyn Model,
    x_prev: &State,
    xi: f64,
    x_next: &State,
    jc: &JitterConfig,
    rng: &mut RngStream,
) -> Result<(ThetaCloud, LogWeights), ThetaError> {
    let reweighted = cloud_reweight(cloud, model, x_prev, xi, x_next)?;
    let m = reweighted.len();
    let ancestors = multinomial_resample(&reweighted.weights, m, rng)?;
    let particles = ancestors
        .iter()
        .map(|&b| jitter_kernel(&reweighted.particles[b], jc, rng))
        .collect();
    Ok((
        ThetaCloud {
            particles,
            weights: LogWeights::uniform(m)?,
            ancestors,
        },
        reweighted.weights,
    ))
}

/// Log posterior density (up to a constant) of `theta` given a trajectory
/// prefix: prior plus every transition likelihood along the prefix.
fn history_log_posterior(
    model: &dyn Model,
    history: &[AugmentedState],
    theta: &Theta,
) -> Result<f64, ThetaError> {
    model.history_loglik(history, theta).map_err(|e| match e {
        ModelError::MissingDesign { index } => ThetaError::DesignMissing { index },
        other => ThetaError::Model(other),
    })
}

/// Lower-triangular factor for the random-walk proposal, with a small ridge
/// escalated until the factorization succeeds (a resampled cloud can be
/// rank-deficient or fully collapsed).
fn proposal_cholesky(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let scaled = cov * (2.38 * 2.38 / 3.0);
    let mut ridge = 1e-12 * (1.0 + scaled.trace().abs() / 3.0);
    loop {
        if let Some(chol) = (scaled + Matrix3::identity() * ridge).cholesky() {
            return chol.l();
        }
        ridge *= 10.0;
    }
}

/// One random-walk Metropolis–Hastings move. Returns the new point, its log
/// target value, and whether the proposal was accepted.
fn rwmh_move(
    theta: &Theta,
    current_lp: f64,
    log_target: &mut dyn FnMut(&Theta) -> f64,
    chol_l: &Matrix3<f64>,
    rng: &mut RngStream,
) -> (Theta, f64, bool) {
    let eps = Theta::new(
        rng.standard_normal(),
        rng.standard_normal(),
        rng.standard_normal(),
    );
    let proposal = theta + chol_l * eps;
    let proposal_lp = log_target(&proposal);
    if rng.uniform_01().ln() < proposal_lp - current_lp {
        (proposal, proposal_lp, true)
    } else {
        (*theta, current_lp, false)
    }
}

/// The O(t) inner step: reweight and resample exactly like
/// [`cloud_step_npf`], then rejuvenate each particle with `moves`
/// random-walk Metropolis–Hastings steps targeting the posterior given the
/// whole prefix. `history` must end with the transition being absorbed, and
/// every step re-reads the entire prefix — this is the full-reprocessing
/// cost the jittering filter avoids.
pub fn cloud_step_ibis(
    cloud: &ThetaCloud,
    model: &dyn Model,
    history: &[AugmentedState],
    moves: usize,
    rng: &mut RngStream,
) -> Result<ThetaCloud, ThetaError> {
    cloud_step_ibis_recorded(cloud, model, history, moves, rng).map(|(c, _)| c)
}

/// [`cloud_step_ibis`] returning also the pre-resampling weights.
pub fn cloud_step_ibis_recorded(
    cloud: &ThetaCloud,
    model: &dyn Model,
    history: &[AugmentedState],
    moves: usize,
    rng: &mut RngStream,
) -> Result<(ThetaCloud, LogWeights), ThetaError> {
    if history.len() < 2 {
        return Err(ThetaError::HistoryTooShort);
    }
    let last = history.len() - 1;
    let xi = history[last]
        .xi_prev
        .ok_or(ThetaError::DesignMissing { index: last })?;
    let reweighted = cloud_reweight(cloud, model, &history[last - 1].x, xi, &history[last].x)?;
    let m = reweighted.len();
    let ancestors = multinomial_resample(&reweighted.weights, m, rng)?;
    let mut particles: Vec<Theta> = ancestors.iter().map(|&b| reweighted.particles[b]).collect();

    if moves > 0 {
        let resampled = ThetaCloud {
            particles: particles.clone(),
            weights: LogWeights::uniform(m)?,
            ancestors: ancestors.clone(),
        };
        let chol_l = proposal_cholesky(&resampled.covariance()?);
        let mut log_target = |theta: &Theta| {
            history_log_posterior(model, history, theta).unwrap_or(f64::NEG_INFINITY)
        };
        for theta in particles.iter_mut() {
            let mut lp = log_target(theta);
            for _ in 0..moves {
                let (next, next_lp, _) = rwmh_move(theta, lp, &mut log_target, &chol_l, rng);
                *theta = next;
                lp = next_lp;
            }
        }
    }

    Ok((
        ThetaCloud {
            particles,
            weights: LogWeights::uniform(m)?,
            ancestors,
        },
        reweighted.weights,
    ))
}

/// Density of a successor cloud given its parent cloud, with the resampling
/// indices marginalized out:
///
/// ```text
/// sum_m log sum_k Wbar_k kernel(theta_next^m | theta_prev^k)
/// ```
///
/// `cloud_prev` must carry the post-reweight weights for the transition that
/// produced `cloud_next` (for spliced trajectories, re-run
/// [`cloud_reweight`] against the spliced transition first). The closed form
/// is exactly the expectation over independent multinomial index draws,
/// which is why only multinomial resampling is sound here.
pub fn cloud_transition_logpdf_rb(
    cloud_prev: &ThetaCloud,
    cloud_next: &ThetaCloud,
    jc: &JitterConfig,
) -> f64 {
    let log_norm = match cloud_prev.weights.log_normalized() {
        Ok(v) => v,
        Err(_) => return f64::NEG_INFINITY,
    };
    let mut total = 0.0;
    let mut terms = vec![0.0; cloud_prev.len()];
    for theta_next in &cloud_next.particles {
        for ((term, theta_prev), lw) in terms
            .iter_mut()
            .zip(cloud_prev.particles.iter())
            .zip(log_norm.iter())
        {
            *term = lw + jitter_logpdf(theta_next, theta_prev, jc);
        }
        total += log_sum_exp(&terms);
    }
    total
}
