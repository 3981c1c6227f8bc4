//! Policy scoring: information-gain estimation, a contrastive lower bound,
//! the closed-form realized information gain of conjugate models, and
//! runtime benchmarking of amortization iterations.
//!
//! The central estimator rolls the policy out against the parameter-marginal
//! dynamics — the same nested posterior update the filter uses, restricted
//! to a single outer particle so no reweighting ever biases the draw — and
//! accumulates two numbers per step:
//!
//! * the **surprise** `-log p(x_next | x, xi)` of the sampled outcome under
//!   the particle's own predictive distribution, the quantity the filter's
//!   potential tempers; and
//! * the **gain** `log f(x_next | x, xi, theta) - log p(x_next | x, xi)`,
//!   the realized log-ratio between the conditional density under the
//!   parameter actually used for the draw and its parameter-marginal
//!   density. Its expectation is the mutual-information increment of the
//!   step, so the accumulated gain estimates the expected information gain
//!   directly.
//!
//! The two differ per step by the realized conditional log-density, whose
//! expectation under static noise is a policy-independent constant: the
//! surprise carries that offset (and the noise's sampling fluctuation),
//! the gain cancels both pathwise. Cross-policy comparisons are identical
//! under either; absolute information values are read off the gain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::{RunConfig, Strategy, ThetaPosterior};
use crate::model::{AugmentedState, Model, ModelError};
use crate::policy::Policy;
use crate::rng::RngStream;
use crate::theta::{cloud_init, cloud_step_npf, JitterConfig, ThetaError};
use crate::trainer::{msc_iterate, TrainState, TrainerConfig, TrainerError};
use crate::weights::log_sum_exp;

/// Stream salts for the evaluation module's fork discipline, disjoint from
/// the filter's (0x01-0x04), the smoother's (0x05), and the trainer's
/// (0x06-0x0A).
const SALT_EIG_ROLLOUT: u64 = 0x0B;
const SALT_CONTRASTIVE_ROLLOUT: u64 = 0x0C;
const SALT_REALIZED_REPLICATION: u64 = 0x0D;
const SALT_BENCHMARK: u64 = 0x0E;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    BadConfig(String),
    #[error("information-gain rollouts support the jittered-cloud and exact strategies, not {found}")]
    UnsupportedStrategy { found: String },
    #[error("{0} requires a model with a closed-form conjugate posterior")]
    MissingConjugate(&'static str),
    #[error("non-finite value while {context}")]
    NonFinite { context: &'static str },
    #[error(transparent)]
    Theta(#[from] ThetaError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Trainer(#[from] TrainerError),
}

/// A Monte Carlo mean with the sample standard deviation of the values it
/// averaged (not the standard error of the mean).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std: f64,
}

impl Estimate {
    /// Mean and (n-1)-normalized standard deviation; a single value has
    /// spread zero.
    pub fn from_values(values: &[f64]) -> Estimate {
        let n = values.len();
        assert!(n > 0, "an estimate needs at least one value");
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            (ss / (n - 1) as f64).sqrt()
        };
        Estimate { mean, std }
    }

    /// Standard error of the mean this estimate was formed from.
    pub fn standard_error(&self, n: usize) -> f64 {
        assert!(n > 0, "standard error needs the sample count");
        self.std / (n as f64).sqrt()
    }
}

/// Both accumulations of the information-gain rollouts; see the module
/// documentation for how they relate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigEstimate {
    /// Accumulated predictive surprise. Contains a policy-independent
    /// offset set by the noise scale, plus the noise's own sampling
    /// fluctuation; meaningful in differences between policies.
    pub surprise: Estimate,
    /// Surprise offset per step by the realized conditional log-density:
    /// a direct estimate of the expected information gain, on the same
    /// scale as the realized-gain curve.
    pub gain: Estimate,
    /// Rollouts each estimate averages over.
    pub rollouts: usize,
}

/// Expected-information-gain estimate for a policy: independent rollouts of
/// the parameter-marginal dynamics, each carrying its own posterior that
/// updates exactly as the filter's inner step does.
///
/// `strategy` selects the posterior representation: [`Strategy::Npf`] runs a
/// jittered cloud of `cloud_size` parameter particles (the default playing
/// field, whatever strategy trained the policy), [`Strategy::Exact`] runs
/// the model's closed-form conjugate belief for oracle comparisons, and the
/// full-history rejuvenation strategy is rejected — a kernel-moved cloud has
/// no tractable predictive density to accumulate.
pub fn eig_estimate(
    model: &dyn Model,
    policy: &Policy,
    strategy: &Strategy,
    horizon: usize,
    rollouts: usize,
    cloud_size: usize,
    root: &RngStream,
) -> Result<EigEstimate, EvalError> {
    if rollouts == 0 {
        return Err(EvalError::BadConfig("rollouts must be positive".into()));
    }
    match strategy {
        Strategy::Npf => {
            if cloud_size == 0 {
                return Err(EvalError::BadConfig("cloud size must be positive".into()));
            }
        }
        Strategy::Exact => {
            if model.conjugate().is_none() {
                return Err(EvalError::MissingConjugate("the exact posterior strategy"));
            }
        }
        other @ Strategy::Ibis { .. } => {
            return Err(EvalError::UnsupportedStrategy {
                found: format!("{other:?}"),
            });
        }
    }
    let jc = JitterConfig::from_prior_std(model.prior_theta_std(), cloud_size);
    let samples: Result<Vec<(f64, f64)>, EvalError> = (0..rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.fork(&[SALT_EIG_ROLLOUT, i as u64]);
            eig_rollout(model, policy, strategy, horizon, cloud_size, &jc, &mut rng)
        })
        .collect();
    let samples = samples?;
    let surprises: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let gains: Vec<f64> = samples.iter().map(|s| s.1).collect();
    Ok(EigEstimate {
        surprise: Estimate::from_values(&surprises),
        gain: Estimate::from_values(&gains),
        rollouts,
    })
}

/// One marginal-model rollout; returns `(surprise, gain)` accumulated over
/// the horizon.
fn eig_rollout(
    model: &dyn Model,
    policy: &Policy,
    strategy: &Strategy,
    horizon: usize,
    cloud_size: usize,
    jc: &JitterConfig,
    rng: &mut RngStream,
) -> Result<(f64, f64), EvalError> {
    let mut posterior = match strategy {
        Strategy::Npf => ThetaPosterior::Cloud(cloud_init(model, cloud_size, rng)?),
        Strategy::Exact => ThetaPosterior::Exact(
            model
                .conjugate()
                .expect("checked by eig_estimate")
                .prior_belief(),
        ),
        Strategy::Ibis { .. } => unreachable!("rejected by eig_estimate"),
    };
    let mut z = AugmentedState::initial(model.init_state());
    let mut pstate = policy.step(&policy.init_state(), &z);
    let mut surprise = 0.0;
    let mut gain = 0.0;
    for _ in 0..horizon {
        let (xi, _) = policy.sample(&pstate, rng);
        let x = z.x;
        let (x_next, theta) = posterior.sample_transition_detailed(model, &x, xi, rng);
        let marginal = posterior.marginal_transition_logpdf(model, &x, xi, &x_next);
        let conditional = model.transition_logpdf(&x_next, &x, xi, &theta);
        if !marginal.is_finite() || !conditional.is_finite() {
            return Err(EvalError::NonFinite {
                context: "scoring a sampled transition of the marginal model",
            });
        }
        surprise += -marginal;
        gain += conditional - marginal;
        posterior = match posterior {
            ThetaPosterior::Cloud(c) => {
                ThetaPosterior::Cloud(cloud_step_npf(&c, model, &x, xi, &x_next, jc, rng)?)
            }
            ThetaPosterior::Exact(belief) => ThetaPosterior::Exact(
                model
                    .conjugate()
                    .expect("checked by eig_estimate")
                    .update(&belief, &x, xi, &x_next)?,
            ),
        };
        z = AugmentedState::step(x_next, xi);
        pstate = policy.step(&pstate, &z);
    }
    Ok((surprise, gain))
}

/// Per-rollout values of the contrastive lower bound on the expected
/// information gain.
///
/// Each rollout draws a generative parameter from the prior, simulates a
/// trajectory under it and the policy, then scores the trajectory's
/// conditional likelihood against `contrastive` fresh prior draws:
///
/// ```text
/// value = log lik(theta_0) - log( (1/(L+1)) * sum_{l=0..L} lik(theta_l) )
/// ```
///
/// with `theta_0` the generative draw. Every value is at most
/// `log(L + 1)` by construction, and the mean lower-bounds the expected
/// information gain.
pub fn spce_samples(
    model: &dyn Model,
    policy: &Policy,
    horizon: usize,
    contrastive: usize,
    rollouts: usize,
    root: &RngStream,
) -> Result<Vec<f64>, EvalError> {
    if contrastive == 0 {
        return Err(EvalError::BadConfig(
            "the contrastive bound needs at least one contrastive draw".into(),
        ));
    }
    if rollouts == 0 {
        return Err(EvalError::BadConfig("rollouts must be positive".into()));
    }
    (0..rollouts)
        .into_par_iter()
        .map(|i| {
            let mut rng = root.fork(&[SALT_CONTRASTIVE_ROLLOUT, i as u64]);
            Ok(spce_rollout(model, policy, horizon, contrastive, &mut rng))
        })
        .collect()
}

/// [`spce_samples`] reduced to mean and spread.
pub fn spce_estimate(
    model: &dyn Model,
    policy: &Policy,
    horizon: usize,
    contrastive: usize,
    rollouts: usize,
    root: &RngStream,
) -> Result<Estimate, EvalError> {
    let values = spce_samples(model, policy, horizon, contrastive, rollouts, root)?;
    Ok(Estimate::from_values(&values))
}

/// Draw order within a rollout stream (frozen; tests replay it): the
/// generative parameter, then per step one design and one transition, then
/// the contrastive parameters.
fn spce_rollout(
    model: &dyn Model,
    policy: &Policy,
    horizon: usize,
    contrastive: usize,
    rng: &mut RngStream,
) -> f64 {
    let theta0 = model.sample_prior_theta(rng);
    let mut z = AugmentedState::initial(model.init_state());
    let mut pstate = policy.step(&policy.init_state(), &z);
    let mut moves = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let (xi, _) = policy.sample(&pstate, rng);
        let x = z.x;
        let x_next = model.sample_transition(&x, xi, &theta0, rng);
        moves.push((x, xi, x_next));
        z = AugmentedState::step(x_next, xi);
        pstate = policy.step(&pstate, &z);
    }
    let loglik = |theta: &crate::model::Theta| {
        moves
            .iter()
            .map(|(x, xi, x_next)| model.transition_logpdf(x_next, x, *xi, theta))
            .sum::<f64>()
    };
    let mut lls = Vec::with_capacity(contrastive + 1);
    lls.push(loglik(&theta0));
    for _ in 0..contrastive {
        let theta = model.sample_prior_theta(rng);
        lls.push(loglik(&theta));
    }
    lls[0] - log_sum_exp(&lls) + ((contrastive + 1) as f64).ln()
}

/// Per-step mean and spread of the realized information gain, over
/// replications; index `t` covers `0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgCurve {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl IgCurve {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Final-step mean: the headline number of a curve.
    pub fn terminal_mean(&self) -> f64 {
        *self.mean.last().expect("a curve has at least the zero step")
    }

    /// CSV with columns `t,mean,std`, one row per step.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,mean,std")?;
        for (t, (m, s)) in self.mean.iter().zip(self.std.iter()).enumerate() {
            writeln!(w, "{t},{m},{s}")?;
        }
        Ok(())
    }
}

/// Realized information gain of the policy on a conjugate model: entropy
/// drop of the closed-form parameter posterior along trajectories the
/// policy actually produces.
///
/// Per replication, a generative parameter is drawn from the prior, the
/// policy is rolled out against the model under that parameter, and the
/// conjugate belief is updated along the realized moves; the record at step
/// `t` is half the log-determinant drop of the belief covariance from the
/// prior, i.e. the posterior entropy reduction in nats.
pub fn realized_ig_curve(
    model: &dyn Model,
    policy: &Policy,
    horizon: usize,
    replications: usize,
    root: &RngStream,
) -> Result<IgCurve, EvalError> {
    if model.conjugate().is_none() {
        return Err(EvalError::MissingConjugate("the realized-gain curve"));
    }
    if replications == 0 {
        return Err(EvalError::BadConfig("replications must be positive".into()));
    }
    let curves: Result<Vec<Vec<f64>>, EvalError> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let oracle = model.conjugate().expect("checked above");
            let mut rng = root.fork(&[SALT_REALIZED_REPLICATION, r as u64]);
            let theta = model.sample_prior_theta(&mut rng);
            let mut belief = oracle.prior_belief();
            let base = belief.log_det_cov();
            let mut z = AugmentedState::initial(model.init_state());
            let mut pstate = policy.step(&policy.init_state(), &z);
            let mut curve = Vec::with_capacity(horizon + 1);
            curve.push(0.0);
            for _ in 0..horizon {
                let (xi, _) = policy.sample(&pstate, &mut rng);
                let x = z.x;
                let x_next = model.sample_transition(&x, xi, &theta, &mut rng);
                belief = oracle.update(&belief, &x, xi, &x_next)?;
                curve.push(0.5 * (base - belief.log_det_cov()));
                z = AugmentedState::step(x_next, xi);
                pstate = policy.step(&pstate, &z);
            }
            Ok(curve)
        })
        .collect();
    let curves = curves?;
    let mut mean = Vec::with_capacity(horizon + 1);
    let mut std = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let at_t: Vec<f64> = curves.iter().map(|c| c[t]).collect();
        let est = Estimate::from_values(&at_t);
        mean.push(est.mean);
        std.push(est.std);
    }
    Ok(IgCurve { mean, std })
}

/// One strategy configuration to benchmark: how the inner posterior moves
/// and whether the trainer's sweep draws backward trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchVariant {
    pub name: String,
    pub strategy: Strategy,
    pub backward_sampling: bool,
}

impl BenchVariant {
    /// Jittered cloud, trajectories by ancestor tracing.
    pub fn npf() -> BenchVariant {
        BenchVariant {
            name: "npf".into(),
            strategy: Strategy::Npf,
            backward_sampling: false,
        }
    }

    /// Jittered cloud with backward-sampled trajectories.
    pub fn npf_bs() -> BenchVariant {
        BenchVariant {
            name: "npf-bs".into(),
            strategy: Strategy::Npf,
            backward_sampling: true,
        }
    }

    /// Full-history rejuvenation with `moves` kernel sweeps per step.
    pub fn ibis(moves: usize) -> BenchVariant {
        BenchVariant {
            name: "ibis".into(),
            strategy: Strategy::Ibis { moves },
            backward_sampling: false,
        }
    }

    /// The three contenders benchmarked against each other.
    pub fn standard_set(moves: usize) -> Vec<BenchVariant> {
        vec![BenchVariant::npf(), BenchVariant::npf_bs(), BenchVariant::ibis(moves)]
    }
}

/// Median wall time of one amortization iteration for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub variant: String,
    pub horizon: usize,
    pub median_secs: f64,
    pub reps: usize,
}

/// Benchmark results over a (variant, horizon) grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchTable {
    pub cells: Vec<BenchCell>,
}

impl BenchTable {
    pub fn median(&self, variant: &str, horizon: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.horizon == horizon)
            .map(|c| c.median_secs)
    }

    /// Least-squares slope of log median time against log horizon for one
    /// variant; `None` with fewer than two horizons measured.
    pub fn scaling_exponent(&self, variant: &str) -> Option<f64> {
        let points: Vec<(f64, f64)> = self
            .cells
            .iter()
            .filter(|c| c.variant == variant && c.median_secs > 0.0)
            .map(|c| ((c.horizon as f64).ln(), c.median_secs.ln()))
            .collect();
        if points.len() < 2 {
            return None;
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
        let sxx = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum::<f64>();
        Some(sxy / sxx)
    }

    /// CSV with columns `variant,horizon,median_secs,reps`.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "variant,horizon,median_secs,reps")?;
        for c in &self.cells {
            writeln!(w, "{},{},{},{}", c.variant, c.horizon, c.median_secs, c.reps)?;
        }
        Ok(())
    }
}

/// Times amortization iterations over a grid of strategies and horizons.
///
/// Each cell initializes a fresh training state from `policy` and runs
/// `reps` full iterations — conditional sweep, trajectory extraction,
/// gradient, update — at learning rate zero, so the measured work is
/// exactly one iteration's and the policy never drifts between reps. The
/// recorded number is the median of the per-iteration wall times.
///
/// Cells run serially: the filter parallelizes internally, and concurrent
/// cells would contend for the same cores and corrupt the timings.
pub fn runtime_benchmark(
    model: &dyn Model,
    policy: &Policy,
    base: &RunConfig,
    variants: &[BenchVariant],
    horizons: &[usize],
    reps: usize,
    root: &RngStream,
) -> Result<BenchTable, EvalError> {
    if variants.is_empty() || horizons.is_empty() {
        return Err(EvalError::BadConfig(
            "the benchmark grid needs at least one variant and one horizon".into(),
        ));
    }
    if reps == 0 {
        return Err(EvalError::BadConfig("benchmark reps must be positive".into()));
    }
    let mut cells = Vec::with_capacity(variants.len() * horizons.len());
    for (vi, variant) in variants.iter().enumerate() {
        for (hi, &horizon) in horizons.iter().enumerate() {
            let cfg = RunConfig {
                horizon,
                strategy: variant.strategy.clone(),
                ..base.clone()
            };
            cfg.validate().map_err(|e| EvalError::BadConfig(e.to_string()))?;
            let tcfg = TrainerConfig {
                iterations: reps,
                learning_rate: 0.0,
                backward_sampling: variant.backward_sampling,
                ..TrainerConfig::default()
            };
            tcfg.validate()?;
            let cell_root = root.fork(&[SALT_BENCHMARK, vi as u64, hi as u64]);
            let mut state = TrainState::initialize(model, policy, &cfg, &cell_root);
            let mut times = Vec::with_capacity(reps);
            for rep in 0..reps {
                let it = msc_iterate(
                    &mut state,
                    model,
                    &cfg,
                    &tcfg,
                    &cell_root.fork(&[SALT_BENCHMARK, rep as u64]),
                )?;
                times.push(it.wall_secs);
            }
            times.sort_by(f64::total_cmp);
            let median = if reps % 2 == 1 {
                times[reps / 2]
            } else {
                0.5 * (times[reps / 2 - 1] + times[reps / 2])
            };
            cells.push(BenchCell {
                variant: variant.name.clone(),
                horizon,
                median_secs: median,
                reps,
            });
        }
    }
    Ok(BenchTable { cells })
}

/// Everything an evaluation run reports: the information-gain estimate and
/// contrastive bound (mean with spread over rollouts), the realized-gain
/// curve, and whatever runtime cells were benchmarked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eig_mean: f64,
    pub eig_std: f64,
    pub spce_mean: f64,
    pub spce_std: f64,
    pub realized_ig: IgCurve,
    pub runtime: BenchTable,
}

impl EvalReport {
    /// Assembles a report; the information numbers are read off the gain
    /// scale, which is directly comparable with the realized-gain curve
    /// and with the contrastive bound.
    pub fn new(eig: &EigEstimate, spce: &Estimate, realized_ig: IgCurve, runtime: BenchTable) -> EvalReport {
        EvalReport {
            eig_mean: eig.gain.mean,
            eig_std: eig.gain.std,
            spce_mean: spce.mean,
            spce_std: spce.std,
            realized_ig,
            runtime,
        }
    }

    /// Structural soundness: finite means, nonnegative spreads, an aligned
    /// curve, sane benchmark cells.
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |msg: &str| Err(EvalError::BadConfig(msg.into()));
        if !self.eig_mean.is_finite() || !self.spce_mean.is_finite() {
            return bad("report means must be finite");
        }
        if self.eig_std < 0.0 || self.spce_std < 0.0 {
            return bad("report spreads must be nonnegative");
        }
        if self.realized_ig.mean.len() != self.realized_ig.std.len() {
            return bad("curve mean and spread must align");
        }
        if self.realized_ig.is_empty() {
            return bad("the realized-gain curve must cover at least the zero step");
        }
        if self.realized_ig.std.iter().any(|s| !(*s >= 0.0)) {
            return bad("curve spreads must be nonnegative");
        }
        if self
            .runtime
            .cells
            .iter()
            .any(|c| !(c.median_secs >= 0.0) || c.reps == 0)
        {
            return bad("benchmark cells need nonnegative medians and positive reps");
        }
        Ok(())
    }

    /// Pretty-printed JSON of the whole report.
    pub fn write_json<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(std::io::Error::other)
    }

    /// CSV with columns `metric,mean,std` for the scalar estimates.
    pub fn write_summary_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric,mean,std")?;
        writeln!(w, "eig,{},{}", self.eig_mean, self.eig_std)?;
        writeln!(w, "spce,{},{}", self.spce_mean, self.spce_std)?;
        Ok(())
    }
}
