//! Outer particle filter over design-augmented experiment trajectories.
//!
//! Each outer particle carries a full trajectory prefix, a posterior over
//! the model parameters (a particle cloud or, for conjugate models, an
//! exact Gaussian belief), and the recurrent state of the design policy.
//! One step of the filter resamples particles by their previous potential,
//! draws a design from the policy, propagates the trajectory through the
//! parameter-marginal transition, scores the move by an information-gain
//! potential, and updates the per-particle parameter posterior.
//!
//! The potential for a move `(x, xi) -> x_next` made by a particle whose
//! parameter posterior was `p` *before* seeing the move is
//!
//! ```text
//! log g = eta * (-log p_marginal(x_next | x, xi)) - lambda * (xi - xi_prev)^2
//! ```
//!
//! i.e. surprise under the particle's own predictive distribution, tempered
//! by `eta`, minus a quadratic slew penalty on consecutive designs (no
//! penalty on the first design of a run). Raising `eta` biases the particle
//! population toward informative trajectories; `eta = 0` recovers plain
//! forward simulation.
//!
//! Randomness follows a fork discipline: every consumer derives its own
//! stream from the run's root by structural salts (step index, particle
//! index), so results are reproducible bit-for-bit and independent of how
//! many threads execute the per-particle loop.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{AugmentedState, Model, ModelError, State, Theta};
use crate::policy::{Policy, PolicyError, PolicyState};
use crate::rng::RngStream;
use crate::theta::{
    cloud_init, cloud_predictive_logpdf, cloud_step_ibis_recorded, cloud_step_npf_recorded,
    JitterConfig, ThetaCloud, ThetaError,
};
use crate::weights::{
    log_sum_exp, multinomial_draw, multinomial_resample, AncestorIndex, LogWeights, WeightError,
};

/// Stream salts for the filter's fork discipline. Values are arbitrary but
/// frozen: changing them changes every sampled trajectory.
const SALT_INIT: u64 = 0x01;
const SALT_RESAMPLE: u64 = 0x02;
const SALT_PARTICLE: u64 = 0x03;
const SALT_GENEALOGY: u64 = 0x04;

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("bad run configuration: {0}")]
    BadConfig(String),
    #[error(
        "every outer particle received zero weight at step {t} \
         (ancestor-weight effective sample size was {ess:.2})"
    )]
    Collapse { t: usize, ess: f64 },
    #[error(transparent)]
    Theta(#[from] ThetaError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How each outer particle updates its parameter posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Strategy {
    /// Jittered inner particle cloud; constant cost per step.
    Npf,
    /// Full-history rejuvenation: reweight, resample, then `moves`
    /// random-walk Metropolis sweeps targeting the posterior given the
    /// whole trajectory prefix. Cost grows linearly with the prefix.
    Ibis { moves: usize },
    /// Closed-form conjugate belief; requires the model to expose one.
    Exact,
}

/// Per-particle posterior over model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ThetaPosterior {
    Cloud(ThetaCloud),
    Exact(crate::model::GaussianBelief),
}

impl ThetaPosterior {
    pub fn cloud(&self) -> Option<&ThetaCloud> {
        match self {
            ThetaPosterior::Cloud(c) => Some(c),
            ThetaPosterior::Exact(_) => None,
        }
    }

    /// Log-density of `x_next` under the transition with parameters
    /// marginalized out over this posterior.
    ///
    /// For the exact variant the model must expose a conjugate oracle;
    /// [`run_filter`] checks this once at the start of a run.
    pub fn marginal_transition_logpdf(
        &self,
        model: &dyn Model,
        x: &State,
        xi: f64,
        x_next: &State,
    ) -> f64 {
        match self {
            ThetaPosterior::Cloud(c) => cloud_predictive_logpdf(c, model, x, xi, x_next),
            ThetaPosterior::Exact(belief) => model
                .conjugate()
                .expect("exact posterior requires a conjugate model")
                .marginal_loglik(belief, x, xi, x_next),
        }
    }

    /// Draw `x_next` from the parameter-marginal transition: pick a
    /// parameter from the posterior (a weighted draw from the cloud, or a
    /// Gaussian draw from the exact belief), then step the model with it.
    pub fn sample_transition(
        &self,
        model: &dyn Model,
        x: &State,
        xi: f64,
        rng: &mut RngStream,
    ) -> State {
        self.sample_transition_detailed(model, x, xi, rng).0
    }

    /// [`ThetaPosterior::sample_transition`] returning also the parameter
    /// the draw was conditioned on, for estimators that need the realized
    /// conditional density alongside the marginal one.
    pub fn sample_transition_detailed(
        &self,
        model: &dyn Model,
        x: &State,
        xi: f64,
        rng: &mut RngStream,
    ) -> (State, Theta) {
        let theta = match self {
            ThetaPosterior::Cloud(c) => {
                let i = multinomial_draw(&c.weights, rng)
                    .expect("cloud weights are valid by construction");
                c.particles[i]
            }
            ThetaPosterior::Exact(belief) => belief.sample(rng),
        };
        (model.sample_transition(x, xi, &theta, rng), theta)
    }
}

/// One outer particle: a trajectory prefix, the parameter posterior
/// conditioned on it, and the policy's recurrent state after reading it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterParticle {
    /// `z_0..z_t` along this particle's lineage.
    pub traj: Vec<AugmentedState>,
    pub theta: ThetaPosterior,
    pub policy_state: PolicyState,
}

impl OuterParticle {
    /// Latest trajectory element.
    pub fn z(&self) -> &AugmentedState {
        self.traj.last().expect("trajectory is never empty")
    }
}

/// Filter population after one step, with everything needed to replay or
/// smooth the run: raw log-potentials (the pre-resampling outer weights),
/// the ancestor indices drawn to produce this generation, and each
/// particle's pre-resampling inner-cloud weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterFrame {
    pub t: usize,
    pub particles: Vec<OuterParticle>,
    /// Raw `log g_t` per particle; all zero at `t = 0`.
    pub log_potentials: LogWeights,
    /// `ancestors[i]` is the index in frame `t - 1` that particle `i`
    /// extended; the identity at `t = 0`.
    pub ancestors: Vec<AncestorIndex>,
    /// Inner-cloud weights after reweighting by the new transition but
    /// before the inner resampling; `None` at `t = 0`, under the exact
    /// strategy, and for particles whose update degenerated.
    pub theta_pre_weights: Vec<Option<LogWeights>>,
}

impl FilterFrame {
    pub fn n_particles(&self) -> usize {
        self.particles.len()
    }
}

/// A lineage through the filter: the particle index at every frame and the
/// terminal particle, which carries the trajectory itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Genealogy {
    pub indices: Vec<AncestorIndex>,
    pub particle: OuterParticle,
}

impl Genealogy {
    pub fn states(&self) -> &[AugmentedState] {
        &self.particle.traj
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Outer particles.
    pub n_outer: usize,
    /// Inner (parameter) particles per outer particle.
    pub m_inner: usize,
    /// Steps to run.
    pub horizon: usize,
    /// Tempering exponent on the surprise reward.
    pub eta: f64,
    /// Quadratic penalty weight on consecutive-design differences.
    pub slew_penalty: f64,
    pub strategy: Strategy,
    /// Per-dimension jitter base scale override; by default the kernel
    /// uses half the prior standard deviation.
    pub jitter_scale: Option<[f64; 3]>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_outer: 32,
            m_inner: 128,
            horizon: 50,
            eta: 1.0,
            slew_penalty: 0.1,
            strategy: Strategy::Npf,
            jitter_scale: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_outer == 0 {
            return Err(FilterError::BadConfig("n_outer must be positive".into()));
        }
        if self.m_inner == 0 && !matches!(self.strategy, Strategy::Exact) {
            return Err(FilterError::BadConfig(
                "m_inner must be positive for particle strategies".into(),
            ));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(FilterError::BadConfig(format!(
                "eta must be finite and non-negative, got {}",
                self.eta
            )));
        }
        if !(self.slew_penalty.is_finite() && self.slew_penalty >= 0.0) {
            return Err(FilterError::BadConfig(format!(
                "slew_penalty must be finite and non-negative, got {}",
                self.slew_penalty
            )));
        }
        if let Some(s) = self.jitter_scale {
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(FilterError::BadConfig(format!(
                    "jitter_scale entries must be finite and non-negative, got {s:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn jitter_config(&self, model: &dyn Model) -> JitterConfig {
        match self.jitter_scale {
            Some(s) => JitterConfig::new(Vector3::new(s[0], s[1], s[2]), self.m_inner),
            None => JitterConfig::from_prior_std(model.prior_theta_std(), self.m_inner),
        }
    }
}

/// Complete record of one filter run. Stores every frame, so any lineage
/// can be reconstructed and a backward smoothing pass can reuse the
/// recorded inner weights and ancestor draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterHistory {
    pub config: RunConfig,
    pub frames: Vec<FilterFrame>,
    /// Per-step log of the mean potential; sums to the log normalizing
    /// constant estimate of the tempered path measure.
    pub log_z_increments: Vec<f64>,
}

impl FilterHistory {
    pub fn horizon(&self) -> usize {
        self.frames.len() - 1
    }

    pub fn final_frame(&self) -> &FilterFrame {
        self.frames.last().expect("a run has at least the initial frame")
    }

    pub fn log_z(&self) -> f64 {
        self.log_z_increments.iter().sum()
    }

    /// Effective sample size of the potentials at each step `t >= 1`.
    pub fn ess_series(&self) -> Vec<f64> {
        self.frames
            .iter()
            .skip(1)
            .map(|f| f.log_potentials.ess().unwrap_or(0.0))
            .collect()
    }

    /// Particle index at every frame along the lineage ending at particle
    /// `n` of the final frame.
    pub fn genealogy_indices(&self, n: AncestorIndex) -> Vec<AncestorIndex> {
        let mut indices = vec![0; self.frames.len()];
        let mut idx = n;
        for t in (0..self.frames.len()).rev() {
            indices[t] = idx;
            idx = self.frames[t].ancestors[idx];
        }
        indices
    }

    pub fn genealogy(&self, n: AncestorIndex) -> Genealogy {
        Genealogy {
            indices: self.genealogy_indices(n),
            particle: self.final_frame().particles[n].clone(),
        }
    }

    /// Draw a terminal particle by its final potential and return its
    /// lineage.
    pub fn sample_genealogy(&self, rng: &mut RngStream) -> Result<Genealogy, FilterError> {
        let n = multinomial_draw(&self.final_frame().log_potentials, rng)?;
        Ok(self.genealogy(n))
    }

    /// Number of distinct time-zero ancestors among the final particles; a
    /// small value signals lineage degeneracy.
    pub fn unique_root_ancestors(&self) -> usize {
        let mut roots: Vec<AncestorIndex> = (0..self.final_frame().n_particles())
            .map(|n| self.genealogy_indices(n)[0])
            .collect();
        roots.sort_unstable();
        roots.dedup();
        roots.len()
    }
}

/// Log-potential of a single move.
///
/// `marginal_logpdf` is the parameter-marginal transition log-density of
/// the move under the acting particle's *pre-update* posterior, and
/// `xi_prev` the design of the previous step (`None` on the first step,
/// which carries no slew penalty). A move with zero marginal density kills
/// the particle (`-inf`) regardless of `eta`: such a move has zero density
/// under the path measure, so rewarding its infinite surprise would be
/// meaningless.
pub fn potential_log(
    eta: f64,
    slew_penalty: f64,
    marginal_logpdf: f64,
    xi: f64,
    xi_prev: Option<f64>,
) -> f64 {
    if marginal_logpdf == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let slew = match xi_prev {
        Some(p) => (xi - p) * (xi - p),
        None => 0.0,
    };
    eta * (-marginal_logpdf) - slew_penalty * slew
}

/// Advance the filter population by one step.
///
/// Order per child particle `i` (after drawing all ancestors from the
/// previous potentials): sample a design from the ancestor's policy state,
/// propagate through the ancestor's parameter-marginal transition, score
/// the move with [`potential_log`] against the ancestor's pre-update
/// posterior, then update the posterior with the observed move. Particles
/// whose update degenerates keep their stale posterior and get `-inf`
/// weight; if every particle dies the step fails with
/// [`FilterError::Collapse`].
///
/// Per-particle work runs in parallel; each particle consumes its own
/// derived stream (in order: policy draw, parameter pick, transition
/// noise, posterior update), so the result does not depend on the thread
/// count.
pub fn npf_step(
    frame: &FilterFrame,
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    root: &RngStream,
) -> Result<FilterFrame, FilterError> {
    npf_step_impl(frame, model, policy, cfg, root, None)
}

/// [`npf_step`], optionally with slot `0` pinned to a given next element:
/// the pinned slot keeps ancestor `0`, takes its design and state move
/// from `pinned_next` instead of sampling them (consuming no draws for
/// either), and is weighted and posterior-updated exactly like any other
/// particle.
fn npf_step_impl(
    frame: &FilterFrame,
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    root: &RngStream,
    pinned_next: Option<&AugmentedState>,
) -> Result<FilterFrame, FilterError> {
    let t = frame.t + 1;
    let n = cfg.n_outer;
    let jc = cfg.jitter_config(model);

    let mut resample_rng = root.fork(&[SALT_RESAMPLE, t as u64]);
    let mut ancestors = multinomial_resample(&frame.log_potentials, n, &mut resample_rng)?;
    if pinned_next.is_some() {
        ancestors[0] = 0;
    }

    let results: Result<Vec<(OuterParticle, f64, Option<LogWeights>)>, FilterError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let parent = &frame.particles[ancestors[i]];
            let mut rng = root.fork(&[SALT_PARTICLE, t as u64, i as u64]);

            let x = parent.z().x;
            let (xi, x_next) = match pinned_next {
                Some(z_ref) if i == 0 => {
                    let xi = z_ref.xi_prev.expect("pinned steps carry a design");
                    (xi, z_ref.x)
                }
                _ => {
                    let (xi, _) = policy.sample(&parent.policy_state, &mut rng);
                    (xi, parent.theta.sample_transition(model, &x, xi, &mut rng))
                }
            };
            let z_next = AugmentedState::step(x_next, xi);

            let marginal = parent.theta.marginal_transition_logpdf(model, &x, xi, &x_next);
            let log_g = potential_log(cfg.eta, cfg.slew_penalty, marginal, xi, parent.z().xi_prev);

            let mut traj = parent.traj.clone();
            traj.push(z_next);

            let (theta, pre_weights, log_g) = if log_g == f64::NEG_INFINITY {
                // Dead on arrival; skip the update, keep the stale posterior.
                (parent.theta.clone(), None, log_g)
            } else {
                match (&parent.theta, cfg.strategy) {
                    (ThetaPosterior::Cloud(c), Strategy::Npf) => {
                        match cloud_step_npf_recorded(c, model, &x, xi, &x_next, &jc, &mut rng) {
                            Ok((next, pre)) => (ThetaPosterior::Cloud(next), Some(pre), log_g),
                            Err(ThetaError::DegenerateCloud) => {
                                (parent.theta.clone(), None, f64::NEG_INFINITY)
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    (ThetaPosterior::Cloud(c), Strategy::Ibis { moves }) => {
                        match cloud_step_ibis_recorded(c, model, &traj, moves, &mut rng) {
                            Ok((next, pre)) => (ThetaPosterior::Cloud(next), Some(pre), log_g),
                            Err(ThetaError::DegenerateCloud) => {
                                (parent.theta.clone(), None, f64::NEG_INFINITY)
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    (ThetaPosterior::Exact(belief), Strategy::Exact) => {
                        let oracle = model
                            .conjugate()
                            .expect("exact strategy is validated at run start");
                        let next = oracle.update(belief, &x, xi, &x_next)?;
                        (ThetaPosterior::Exact(next), None, log_g)
                    }
                    _ => {
                        return Err(FilterError::BadConfig(
                            "particle posterior kind does not match the run strategy".into(),
                        ))
                    }
                }
            };

            let policy_state = policy.step(&parent.policy_state, &z_next);
            Ok((OuterParticle { traj, theta, policy_state }, log_g, pre_weights))
        })
        .collect();
    let results = results?;

    let log_g: Vec<f64> = results.iter().map(|r| r.1).collect();
    if log_g.iter().all(|g| *g == f64::NEG_INFINITY) {
        let ess = frame.log_potentials.ess().unwrap_or(0.0);
        return Err(FilterError::Collapse { t, ess });
    }
    let mut particles = Vec::with_capacity(n);
    let mut theta_pre_weights = Vec::with_capacity(n);
    for (p, _, w) in results {
        particles.push(p);
        theta_pre_weights.push(w);
    }

    Ok(FilterFrame {
        t,
        particles,
        log_potentials: LogWeights::from_log(log_g)?,
        ancestors,
        theta_pre_weights,
    })
}

/// Run the filter for `cfg.horizon` steps from the model's initial state.
pub fn run_filter(
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    root: &RngStream,
) -> Result<FilterHistory, FilterError> {
    run_filter_impl(model, policy, cfg, root, None)
}

/// Run the filter with slot `0` pinned to `reference` at every step: the
/// reference trajectory survives every resampling, its parameter posterior
/// is re-simulated per the run's strategy along its fixed moves, and its
/// weights are computed like any other particle's. Together with a
/// trajectory draw from the result this is one sweep of a Markov kernel
/// that leaves the filter's path target invariant.
///
/// `reference` must span the full run (`horizon + 1` elements), start at
/// the model's initial state with no design, and carry a design on every
/// later element.
pub fn run_conditional_filter(
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    reference: &[AugmentedState],
    root: &RngStream,
) -> Result<FilterHistory, FilterError> {
    if reference.len() != cfg.horizon + 1 {
        return Err(FilterError::BadConfig(format!(
            "reference has {} elements but the run needs horizon + 1 = {}",
            reference.len(),
            cfg.horizon + 1
        )));
    }
    if reference[0].x != model.init_state() || reference[0].xi_prev.is_some() {
        return Err(FilterError::BadConfig(
            "reference must start at the model's initial state with no design".into(),
        ));
    }
    if reference.iter().skip(1).any(|z| z.xi_prev.is_none()) {
        return Err(FilterError::BadConfig(
            "every non-initial reference element must carry a design".into(),
        ));
    }
    run_filter_impl(model, policy, cfg, root, Some(reference))
}

fn run_filter_impl(
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    root: &RngStream,
    reference: Option<&[AugmentedState]>,
) -> Result<FilterHistory, FilterError> {
    cfg.validate()?;
    if matches!(cfg.strategy, Strategy::Exact) && model.conjugate().is_none() {
        return Err(FilterError::BadConfig(
            "exact strategy requires a model with a conjugate oracle".into(),
        ));
    }

    let n = cfg.n_outer;
    let z0 = AugmentedState::initial(model.init_state());
    let particles: Result<Vec<OuterParticle>, FilterError> = (0..n)
        .map(|i| {
            let mut rng = root.fork(&[SALT_INIT, i as u64]);
            let theta = match cfg.strategy {
                Strategy::Exact => ThetaPosterior::Exact(
                    model.conjugate().expect("checked above").prior_belief(),
                ),
                _ => ThetaPosterior::Cloud(cloud_init(model, cfg.m_inner, &mut rng)?),
            };
            Ok(OuterParticle {
                traj: vec![z0],
                theta,
                policy_state: policy.step(&policy.init_state(), &z0),
            })
        })
        .collect();

    let mut frames = vec![FilterFrame {
        t: 0,
        particles: particles?,
        log_potentials: LogWeights::uniform(n)?,
        ancestors: (0..n).collect(),
        theta_pre_weights: vec![None; n],
    }];
    let mut log_z_increments = Vec::with_capacity(cfg.horizon);

    for t in 0..cfg.horizon {
        let pinned = reference.map(|r| &r[t + 1]);
        let next =
            npf_step_impl(frames.last().expect("non-empty"), model, policy, cfg, root, pinned)?;
        log_z_increments.push(log_sum_exp(next.log_potentials.as_log()) - (n as f64).ln());
        frames.push(next);
    }

    Ok(FilterHistory { config: cfg.clone(), frames, log_z_increments })
}

/// Stream reserved for drawing genealogies out of a finished run, distinct
/// from everything the filter itself consumes.
pub fn genealogy_stream(root: &RngStream) -> RngStream {
    root.fork(&[SALT_GENEALOGY])
}
