//! Policy fitting by score climbing on the filter's normalizing constant.
//!
//! The filter's normalizing constant measures how much information the
//! designs proposed by a policy are expected to extract, so the log of
//! that constant is the training objective. Its gradient equals the
//! expectation, under the filter's path target, of the gradient of the
//! summed design log-densities along the trajectory — the only part of
//! the path density that depends on the policy parameters. Training
//! therefore alternates two moves: draw trajectories approximately from
//! the path target, and ascend the averaged trajectory score.
//!
//! Drawing from the path target uses a Markov kernel built from the
//! filter itself: one sweep re-runs the filter with the current reference
//! trajectory pinned into slot `0` of every generation
//! ([`run_conditional_filter`]), then draws the next reference from the
//! result — by backward sampling when the run's strategy supports it,
//! otherwise by tracing a terminal particle's lineage. The kernel leaves
//! the path target invariant, so iterating it yields the Markovian
//! samples score climbing needs.
//!
//! The gradient estimate averages the scores of one trajectory per
//! terminal slot, weighted by the final potentials, rather than using the
//! single new reference; a flag restores the single-draw variant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::filter::{run_conditional_filter, FilterError, RunConfig, Strategy};
use crate::model::{AugmentedState, Model};
use crate::policy::{Policy, PolicyError};
use crate::rng::RngStream;
use crate::smoother::{backward_sample_from, SmootherError};
use crate::weights::{multinomial_draw, WeightError};

/// Stream salts; disjoint from the filter's and smoother's.
const SALT_INITIAL_REFERENCE: u64 = 0x06;
const SALT_ITERATION: u64 = 0x07;
/// Sub-salts under one iteration's stream.
const SALT_SWEEP_FILTER: u64 = 0x08;
const SALT_SWEEP_TRAJECTORY: u64 = 0x09;
const SALT_SWEEP_SELECT: u64 = 0x0A;

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error("the {0} policy has no trainable parameters")]
    Untrainable(&'static str),
    #[error("bad trainer configuration: {0}")]
    BadConfig(String),
    #[error(
        "backward-sampled reference selection needs the jittered-cloud \
         strategy; the run is configured with {found}"
    )]
    BackwardNeedsCloud { found: String },
    #[error("gradient became non-finite at iteration {iteration} (norm {norm})")]
    NonFiniteGradient { iteration: usize, norm: f64 },
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Smoother(#[from] SmootherError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// Training hyperparameters, separate from the filter's [`RunConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Fixed iteration budget.
    pub iterations: usize,
    /// Base ascent step size.
    pub learning_rate: f64,
    /// `false`: constant steps; `true`: `learning_rate / k` at iteration
    /// `k`, the schedule under which score climbing has convergence
    /// guarantees.
    pub decay_steps: bool,
    /// Draw reference and gradient trajectories by backward sampling
    /// (requires the jittered-cloud strategy) instead of lineage tracing.
    pub backward_sampling: bool,
    /// Average scores over one trajectory per terminal slot weighted by
    /// the final potentials; `false` uses only the new reference's score.
    pub rao_blackwellize: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            iterations: 25,
            learning_rate: 1e-3,
            decay_steps: false,
            backward_sampling: true,
            rao_blackwellize: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainerError> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(TrainerError::BadConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// The trainer's Markov-chain state: current parameters, current
/// reference trajectory, iteration counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub policy: Policy,
    pub reference: Vec<AugmentedState>,
    pub iteration: usize,
}

impl TrainState {
    /// Fresh state whose first reference is one policy rollout.
    pub fn initialize(
        model: &dyn Model,
        policy: &Policy,
        cfg: &RunConfig,
        root: &RngStream,
    ) -> Self {
        let mut rng = root.fork(&[SALT_INITIAL_REFERENCE]);
        TrainState {
            policy: policy.clone(),
            reference: policy_rollout(model, policy, cfg.horizon, &mut rng),
            iteration: 0,
        }
    }
}

/// One trajectory from the policy and the model alone (parameters drawn
/// from the prior, no reweighting): a valid draw from the path proposal,
/// used as the initial reference and for score-identity checks.
pub fn policy_rollout(
    model: &dyn Model,
    policy: &Policy,
    horizon: usize,
    rng: &mut RngStream,
) -> Vec<AugmentedState> {
    let theta = model.sample_prior_theta(rng);
    let z0 = AugmentedState::initial(model.init_state());
    let mut state = policy.step(&policy.init_state(), &z0);
    let mut traj = vec![z0];
    for _ in 0..horizon {
        let (xi, _) = policy.sample(&state, rng);
        let x = traj.last().expect("non-empty").x;
        let x_next = model.sample_transition(&x, xi, &theta, rng);
        let z = AugmentedState::step(x_next, xi);
        state = policy.step(&state, &z);
        traj.push(z);
    }
    traj
}

/// Everything one kernel sweep produces: the pinned filter run, one
/// trajectory per terminal slot, their normalized final weights, and
/// which slot's trajectory becomes the next reference.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub history: crate::filter::FilterHistory,
    pub trajectories: Vec<Vec<AugmentedState>>,
    pub weights: Vec<f64>,
    pub selected: usize,
    /// Mean backward swap-acceptance over the per-slot draws; `None` when
    /// trajectories were traced.
    pub acceptance_rate: Option<f64>,
}

impl SweepResult {
    pub fn new_reference(&self) -> &[AugmentedState] {
        &self.trajectories[self.selected]
    }
}

/// One sweep of the reference-pinning kernel.
///
/// Runs the filter with the reference pinned, then produces one
/// trajectory per terminal slot — a backward draw started at that slot
/// when `backward_sampling` is set, the slot's stored lineage otherwise —
/// and draws the next reference's slot from the final potentials. The
/// marginal law of the new reference is exactly one step of the
/// target-invariant kernel; the remaining trajectories reuse the sweep
/// for the gradient average at no extra filtering cost.
pub fn csmc_sweep(
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    reference: &[AugmentedState],
    backward_sampling: bool,
    root: &RngStream,
) -> Result<SweepResult, TrainerError> {
    if backward_sampling && !matches!(cfg.strategy, Strategy::Npf) {
        return Err(TrainerError::BackwardNeedsCloud {
            found: format!("{:?}", cfg.strategy),
        });
    }
    let history =
        run_conditional_filter(model, policy, cfg, reference, &root.fork(&[SALT_SWEEP_FILTER]))?;
    let final_frame = history.final_frame();
    let weights = final_frame.log_potentials.normalized()?;

    let (trajectories, acceptance_rate) = if backward_sampling {
        let draws: Result<Vec<_>, SmootherError> = (0..cfg.n_outer)
            .into_par_iter()
            .map(|i| {
                let mut rng = root.fork(&[SALT_SWEEP_TRAJECTORY, i as u64]);
                backward_sample_from(&history, model, policy, i, &mut rng)
            })
            .collect();
        let draws = draws?;
        let acc = draws.iter().map(|d| d.acceptance_rate()).sum::<f64>() / draws.len() as f64;
        (draws.into_iter().map(|d| d.path).collect(), Some(acc))
    } else {
        let traced: Vec<Vec<AugmentedState>> =
            final_frame.particles.iter().map(|p| p.traj.clone()).collect();
        (traced, None)
    };

    let mut select_rng = root.fork(&[SALT_SWEEP_SELECT]);
    let selected = multinomial_draw(&final_frame.log_potentials, &mut select_rng)?;
    Ok(SweepResult { history, trajectories, weights, selected, acceptance_rate })
}

/// Per-iteration training log entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainIteration {
    pub iteration: usize,
    /// The sweep's log normalizing estimate — the objective's running
    /// proxy.
    pub log_z: f64,
    pub grad_norm: f64,
    pub acceptance_rate: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<TrainIteration>,
}

impl TrainLog {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,log_z,grad_norm,acceptance_rate,wall_secs")?;
        for it in &self.iterations {
            let acc = it.acceptance_rate.map(|a| a.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{}",
                it.iteration, it.log_z, it.grad_norm, acc, it.wall_secs
            )?;
        }
        Ok(())
    }
}

/// One score-climbing iteration: sweep the kernel, average the trajectory
/// scores, take an ascent step, advance the reference.
pub fn msc_iterate(
    state: &mut TrainState,
    model: &dyn Model,
    cfg: &RunConfig,
    tcfg: &TrainerConfig,
    root: &RngStream,
) -> Result<TrainIteration, TrainerError> {
    let started = Instant::now();
    let sweep = csmc_sweep(model, &state.policy, cfg, &state.reference, tcfg.backward_sampling, root)?;

    let score = if tcfg.rao_blackwellize {
        let per_traj: Result<Vec<Vec<f64>>, PolicyError> = sweep
            .trajectories
            .par_iter()
            .map(|traj| state.policy.score(traj))
            .collect();
        let per_traj = per_traj?;
        let mut acc = vec![0.0; state.policy.n_params()];
        for (w, s) in sweep.weights.iter().zip(per_traj.iter()) {
            for (a, v) in acc.iter_mut().zip(s.iter()) {
                *a += w * v;
            }
        }
        acc
    } else {
        state.policy.score(sweep.new_reference())?
    };

    let grad_norm = score.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !grad_norm.is_finite() {
        return Err(TrainerError::NonFiniteGradient { iteration: state.iteration, norm: grad_norm });
    }
    let k = state.iteration + 1;
    let gamma =
        if tcfg.decay_steps { tcfg.learning_rate / k as f64 } else { tcfg.learning_rate };
    state.policy.apply_update(&score, gamma)?;
    state.reference = sweep.trajectories[sweep.selected].clone();
    state.iteration = k;

    Ok(TrainIteration {
        iteration: k,
        log_z: sweep.history.log_z(),
        grad_norm,
        acceptance_rate: sweep.acceptance_rate,
        wall_secs: started.elapsed().as_secs_f64(),
    })
}

/// Full training run: fixed iteration budget, returns the fitted policy
/// and the per-iteration log.
pub fn train(
    model: &dyn Model,
    policy: &Policy,
    cfg: &RunConfig,
    tcfg: &TrainerConfig,
    root: &RngStream,
) -> Result<(Policy, TrainLog), TrainerError> {
    tcfg.validate()?;
    cfg.validate()?;
    if !policy.is_trainable() {
        return Err(TrainerError::Untrainable(policy.family_name()));
    }
    if tcfg.backward_sampling && !matches!(cfg.strategy, Strategy::Npf) {
        return Err(TrainerError::BackwardNeedsCloud { found: format!("{:?}", cfg.strategy) });
    }

    let mut state = TrainState::initialize(model, policy, cfg, root);
    let mut log = TrainLog { iterations: Vec::with_capacity(tcfg.iterations) };
    for k in 0..tcfg.iterations {
        let it_root = root.fork(&[SALT_ITERATION, k as u64]);
        log.iterations.push(msc_iterate(&mut state, model, cfg, tcfg, &it_root)?);
    }
    Ok((state.policy, log))
}
