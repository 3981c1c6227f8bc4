//! Trajectory extraction from a completed filter run.
//!
//! Tracing ancestor indices through a [`FilterHistory`] yields valid
//! draws from the filter's path law, but resampling makes the early part
//! of those lineages collapse onto a handful of unique states. The
//! backward sampler here counters that degeneracy: starting from a
//! terminal particle, it walks time backwards and at each step considers
//! swapping the lineage onto another particle of that generation,
//! accepting with a Metropolis-Hastings ratio of path weights and
//! falling back to the true ancestor on rejection. Proposals come from
//! the filtering weights, so one pass costs a constant number of weight
//! evaluations per step.
//!
//! The weight of attaching prefix candidate `n` at time `t` under a fixed
//! suffix is a product over the remaining steps of four factors: the
//! policy's log-density of the suffix design given the spliced history,
//! the parameter-marginal transition density, the information-gain
//! potential, and the inner-cloud transition term, the last marginalized
//! in closed form over the inner resampling indices (valid because those
//! indices are drawn independently in multinomial resampling). Only the
//! first spliced step and the policy terms depend on the candidate; the
//! sparse weight drops everything else, leaving the acceptance ratio
//! unchanged.
//!
//! Backward sampling needs the jittered-cloud strategy: the Gaussian
//! jitter kernel has a tractable transition density, whereas
//! Metropolis-based rejuvenation and the deterministic conjugate update
//! do not leave particles swappable across lineages.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::filter::{potential_log, FilterHistory, OuterParticle, RunConfig, Strategy};
use crate::model::{AugmentedState, Model};
use crate::policy::Policy;
use crate::rng::RngStream;
use crate::theta::{
    cloud_predictive_logpdf, cloud_reweight, cloud_transition_logpdf_rb, JitterConfig,
};
use crate::weights::{multinomial_draw, AncestorIndex, WeightError};

/// Stream salt for per-trajectory backward passes; disjoint from the
/// filter's salts.
const SALT_BACKWARD: u64 = 0x05;

#[derive(Debug, thiserror::Error)]
pub enum SmootherError {
    #[error(
        "backward sampling needs a jittered-cloud run (the inner transition \
         density must be tractable); this history used the {found} strategy"
    )]
    UnsupportedStrategy { found: String },
    #[error(transparent)]
    Weights(#[from] WeightError),
}

/// One smoothing trajectory: the particle index chosen at every time, the
/// assembled design-augmented path, and which backward steps accepted a
/// swap rather than keeping the true ancestor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardTrajectory {
    pub indices: Vec<AncestorIndex>,
    pub path: Vec<AugmentedState>,
    /// Entry `t` covers the backward step that chose the index at time
    /// `t`; `true` means the proposed swap was taken.
    pub accepted: Vec<bool>,
}

impl BackwardTrajectory {
    pub fn horizon(&self) -> usize {
        self.indices.len() - 1
    }

    /// Fraction of backward steps that accepted the proposed swap;
    /// `1.0` for a trajectory with no backward steps.
    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 1.0;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }
}

/// Log-factors of one spliced step `prev -> next` shared by the full and
/// sparse weights: marginal transition density, potential, and the
/// index-marginalized inner-cloud transition. The policy factor is left
/// to the caller, which tracks the recurrent state along the path.
fn transition_block_log(
    model: &dyn Model,
    cfg: &RunConfig,
    jc: &JitterConfig,
    prev: &OuterParticle,
    next: &OuterParticle,
) -> f64 {
    let z_prev = prev.z();
    let z_next = next.z();
    let xi = z_next.xi_prev.expect("non-initial frames carry a design");
    let prev_cloud = prev.theta.cloud().expect("backward weights need cloud posteriors");
    let next_cloud = next.theta.cloud().expect("backward weights need cloud posteriors");

    let marginal = cloud_predictive_logpdf(prev_cloud, model, &z_prev.x, xi, &z_next.x);
    // A zero-density splice has zero path density; the potential guard
    // turns it into -inf rather than an infinite surprise reward.
    let g = potential_log(cfg.eta, cfg.slew_penalty, marginal, xi, z_prev.xi_prev);
    if marginal == f64::NEG_INFINITY || g == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let reweighted = cloud_reweight(prev_cloud, model, &z_prev.x, xi, &z_next.x)
        .expect("a positive mixture density implies a non-degenerate reweighting");
    marginal + g + cloud_transition_logpdf_rb(&reweighted, next_cloud, jc)
}

/// Log-weight of attaching the prefix ending at particle `n` of frame `t`
/// to the fixed suffix `suffix = [I_{t+1}, ..., I_T]`: the full product
/// of path factors over all remaining steps. Quadratic in the remaining
/// horizon; kept as the reference the sparse weight is checked against.
///
/// Returns `-inf` when any spliced step violates the model's support.
/// Panics if `suffix` does not cover exactly times `t+1..=T` or the
/// history does not hold cloud posteriors.
pub fn backward_weight_log(
    history: &FilterHistory,
    model: &dyn Model,
    policy: &Policy,
    t: usize,
    n: AncestorIndex,
    suffix: &[AncestorIndex],
) -> f64 {
    let frames = &history.frames;
    assert_eq!(suffix.len(), history.horizon() - t, "suffix must cover times t+1..=T");
    let cfg = &history.config;
    let jc = cfg.jitter_config(model);

    let mut prev = &frames[t].particles[n];
    let mut state = prev.policy_state.clone();
    let mut lp = 0.0;
    for (j, &i_s) in suffix.iter().enumerate() {
        let next = &frames[t + 1 + j].particles[i_s];
        let xi = next.z().xi_prev.expect("non-initial frames carry a design");
        lp += policy.logpdf(&state, xi);
        lp += transition_block_log(model, cfg, &jc, prev, next);
        if lp == f64::NEG_INFINITY {
            return lp;
        }
        state = policy.step(&state, next.z());
        prev = next;
    }
    lp
}

/// Sparse version of [`backward_weight_log`]: keeps only the factors that
/// depend on the candidate prefix — the full first spliced step, plus,
/// for a history-dependent policy, the log-densities of the later suffix
/// designs given the spliced history. Differs from the full weight by a
/// quantity constant in `n`, so Metropolis-Hastings ratios are unchanged,
/// at linear instead of quadratic cost in the remaining horizon.
pub fn backward_weight_log_fast(
    history: &FilterHistory,
    model: &dyn Model,
    policy: &Policy,
    t: usize,
    n: AncestorIndex,
    suffix: &[AncestorIndex],
) -> f64 {
    let frames = &history.frames;
    assert_eq!(suffix.len(), history.horizon() - t, "suffix must cover times t+1..=T");
    if suffix.is_empty() {
        return 0.0;
    }
    let cfg = &history.config;
    let jc = cfg.jitter_config(model);

    let prefix = &frames[t].particles[n];
    let first = &frames[t + 1].particles[suffix[0]];
    let xi = first.z().xi_prev.expect("non-initial frames carry a design");
    let mut lp = policy.logpdf(&prefix.policy_state, xi)
        + transition_block_log(model, cfg, &jc, prefix, first);
    if lp == f64::NEG_INFINITY || !policy.history_dependent() {
        return lp;
    }

    let mut state = policy.step(&prefix.policy_state, first.z());
    for (j, &i_s) in suffix.iter().enumerate().skip(1) {
        let next = &frames[t + 1 + j].particles[i_s];
        let xi = next.z().xi_prev.expect("non-initial frames carry a design");
        lp += policy.logpdf(&state, xi);
        state = policy.step(&state, next.z());
    }
    lp
}

/// Draw one smoothing trajectory by the backward pass.
///
/// The terminal index follows the final potentials. Each earlier step
/// proposes an index from that frame's potentials and accepts the swap
/// with probability `min(1, exp(fast(proposal) - fast(ancestor)))`,
/// keeping the true ancestor otherwise. A proposal equal to the ancestor
/// is accepted without evaluating weights. Each step consumes exactly one
/// proposal draw and one acceptance uniform, so the stream layout is
/// independent of the decisions taken.
pub fn backward_sample(
    history: &FilterHistory,
    model: &dyn Model,
    policy: &Policy,
    rng: &mut RngStream,
) -> Result<BackwardTrajectory, SmootherError> {
    let terminal = multinomial_draw(&history.final_frame().log_potentials, rng)?;
    backward_sample_from(history, model, policy, terminal, rng)
}

/// [`backward_sample`] with the terminal index fixed instead of drawn.
/// Used to produce one smoothing trajectory per terminal particle when a
/// weighted average over all of them is wanted.
pub fn backward_sample_from(
    history: &FilterHistory,
    model: &dyn Model,
    policy: &Policy,
    terminal: AncestorIndex,
    rng: &mut RngStream,
) -> Result<BackwardTrajectory, SmootherError> {
    if !matches!(history.config.strategy, Strategy::Npf) {
        return Err(SmootherError::UnsupportedStrategy {
            found: format!("{:?}", history.config.strategy),
        });
    }
    let frames = &history.frames;
    let horizon = history.horizon();

    let mut indices = vec![0usize; horizon + 1];
    indices[horizon] = terminal;
    let mut accepted = vec![false; horizon];

    for t in (0..horizon).rev() {
        let ancestor = frames[t + 1].ancestors[indices[t + 1]];
        let proposal = multinomial_draw(&frames[t].log_potentials, rng)?;
        let u = rng.uniform_01();
        let take = if proposal == ancestor {
            true
        } else {
            let suffix = &indices[t + 1..];
            let lw_prop = backward_weight_log_fast(history, model, policy, t, proposal, suffix);
            let lw_anc = backward_weight_log_fast(history, model, policy, t, ancestor, suffix);
            u.ln() < lw_prop - lw_anc
        };
        indices[t] = if take { proposal } else { ancestor };
        accepted[t] = take;
    }

    let path = indices
        .iter()
        .enumerate()
        .map(|(t, &i)| *frames[t].particles[i].z())
        .collect();
    Ok(BackwardTrajectory { indices, path, accepted })
}

/// Draw `count` smoothing trajectories in parallel over one immutable
/// history, each from its own derived stream.
pub fn backward_pass(
    history: &FilterHistory,
    model: &dyn Model,
    policy: &Policy,
    count: usize,
    root: &RngStream,
) -> Result<Vec<BackwardTrajectory>, SmootherError> {
    (0..count)
        .into_par_iter()
        .map(|j| {
            let mut rng = root.fork(&[SALT_BACKWARD, j as u64]);
            backward_sample(history, model, policy, &mut rng)
        })
        .collect()
}

/// Unique-index counts per time for ancestor tracing (all final
/// particles) against a set of backward trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegeneracyReport {
    pub unique_traced: Vec<usize>,
    pub unique_backward: Vec<usize>,
}

pub fn degeneracy_report(
    history: &FilterHistory,
    trajectories: &[BackwardTrajectory],
) -> DegeneracyReport {
    let horizon = history.horizon();
    let traced: Vec<Vec<AncestorIndex>> = (0..history.final_frame().n_particles())
        .map(|n| history.genealogy_indices(n))
        .collect();
    let unique_at = |paths: &[&[AncestorIndex]], t: usize| -> usize {
        let mut seen: Vec<AncestorIndex> = paths.iter().map(|p| p[t]).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len()
    };
    let traced_refs: Vec<&[AncestorIndex]> = traced.iter().map(|p| p.as_slice()).collect();
    let backward_refs: Vec<&[AncestorIndex]> =
        trajectories.iter().map(|b| b.indices.as_slice()).collect();
    DegeneracyReport {
        unique_traced: (0..=horizon).map(|t| unique_at(&traced_refs, t)).collect(),
        unique_backward: (0..=horizon)
            .map(|t| if backward_refs.is_empty() { 0 } else { unique_at(&backward_refs, t) })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::run_filter;
    use crate::model::{State, Theta};
    use crate::policy::{GruPolicy, PolicyArchConfig};
    use crate::testutil::{chi2_critical_1pct, chi2_statistic};
    use crate::theta::jitter_logpdf;
    use crate::weights::LogWeights;
    use nalgebra::Vector3;

    fn pendulum() -> crate::model::Pendulum {
        crate::model::Pendulum::new(crate::model::PendulumConfig::default())
    }

    fn reduced_gru(seed: u64) -> Policy {
        let mut rng = RngStream::new(seed, 123);
        Policy::Gru(GruPolicy::init(PolicyArchConfig::reduced(3), &mut rng).unwrap())
    }

    /// Two-dimensional linear-Gaussian toy with noise on both state
    /// coordinates, so every spliced transition has positive density.
    /// Used where the pendulum's deterministic position update would make
    /// most splices impossible and the tests vacuous.
    struct FullSupportToy;

    const TOY_STD: f64 = 0.3;

    impl FullSupportToy {
        fn mean(&self, x: &State, xi: f64, theta: &Theta) -> State {
            State::new(
                x[0] + 0.1 * theta[0] + 0.2 * xi,
                0.9 * x[1] + 0.1 * theta[1] * x[0] + 0.1 * theta[2],
            )
        }
    }

    impl Model for FullSupportToy {
        fn init_state(&self) -> State {
            State::new(0.5, -0.5)
        }
        fn sample_prior_theta(&self, rng: &mut RngStream) -> Theta {
            Theta::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal())
        }
        fn prior_logpdf(&self, theta: &Theta) -> f64 {
            -0.5 * theta.norm_squared() - 1.5 * (2.0 * std::f64::consts::PI).ln()
        }
        fn prior_theta_std(&self) -> Vector3<f64> {
            Vector3::new(1.0, 1.0, 1.0)
        }
        fn sample_transition(&self, x: &State, xi: f64, theta: &Theta, rng: &mut RngStream) -> State {
            let m = self.mean(x, xi, theta);
            State::new(
                m[0] + TOY_STD * rng.standard_normal(),
                m[1] + TOY_STD * rng.standard_normal(),
            )
        }
        fn transition_logpdf(&self, x_next: &State, x: &State, xi: f64, theta: &Theta) -> f64 {
            let m = self.mean(x, xi, theta);
            let z0 = (x_next[0] - m[0]) / TOY_STD;
            let z1 = (x_next[1] - m[1]) / TOY_STD;
            -0.5 * (z0 * z0 + z1 * z1)
                - 2.0 * TOY_STD.ln()
                - (2.0 * std::f64::consts::PI).ln()
        }
    }

    fn toy_history(seed: u64, n: usize, m: usize, horizon: usize, policy: &Policy) -> FilterHistory {
        let cfg = RunConfig {
            n_outer: n,
            m_inner: m,
            horizon,
            ..RunConfig::default()
        };
        run_filter(&FullSupportToy, policy, &cfg, &RngStream::new(seed, 0)).unwrap()
    }

    #[test]
    fn empty_suffix_weights_are_zero() {
        let policy = reduced_gru(41);
        let hist = toy_history(1, 3, 2, 4, &policy);
        let t = hist.horizon();
        for n in 0..3 {
            assert_eq!(backward_weight_log(&hist, &FullSupportToy, &policy, t, n, &[]), 0.0);
            assert_eq!(
                backward_weight_log_fast(&hist, &FullSupportToy, &policy, t, n, &[]),
                0.0
            );
        }
    }

    #[test]
    fn last_step_fast_weight_equals_full_weight() {
        let policy = reduced_gru(43);
        let hist = toy_history(2, 4, 3, 5, &policy);
        let t = hist.horizon() - 1;
        for n in 0..4 {
            for i in 0..4 {
                let suffix = [i];
                let full = backward_weight_log(&hist, &FullSupportToy, &policy, t, n, &suffix);
                let fast =
                    backward_weight_log_fast(&hist, &FullSupportToy, &policy, t, n, &suffix);
                assert!((full - fast).abs() < 1e-12, "t = T-1 weights differ: {full} vs {fast}");
            }
        }
    }

    /// One-step weight against a fully hand-expanded product: uniform
    /// mixture marginal, potential, policy density, and the inner-cloud
    /// factor by explicit enumeration of both resampling indices.
    #[test]
    fn one_step_weight_matches_hand_expansion() {
        let model = pendulum();
        let policy = reduced_gru(47);
        let cfg = RunConfig { n_outer: 3, m_inner: 2, horizon: 1, ..RunConfig::default() };
        let hist = run_filter(&model, &policy, &cfg, &RngStream::new(303, 0)).unwrap();
        let jitter_std = cfg.jitter_config(&model).std();

        for n in 0..3 {
            for i1 in 0..3 {
                let prefix = &hist.frames[0].particles[n];
                let terminal = &hist.frames[1].particles[i1];
                let xi = terminal.z().xi_prev.unwrap();
                let x0 = prefix.z().x;
                let x1 = terminal.z().x;
                let prev = prefix.theta.cloud().unwrap();
                let next = terminal.theta.cloud().unwrap();

                let f: Vec<f64> = prev
                    .particles
                    .iter()
                    .map(|th| model.transition_logpdf(&x1, &x0, xi, th).exp())
                    .collect();
                let marginal = (0.5 * (f[0] + f[1])).ln();
                let g = cfg.eta * -marginal; // first step has no slew term
                let pol = policy.logpdf(&prefix.policy_state, xi);

                // Reweighted cloud, then marginalize the two resampling
                // indices by brute force over all 2^2 assignments.
                let w = [f[0] / (f[0] + f[1]), f[1] / (f[0] + f[1])];
                let kappa = |to: &Theta, from: &Theta| -> f64 {
                    (0..3)
                        .map(|d| {
                            let z = (to[d] - from[d]) / jitter_std[d];
                            (-0.5 * z * z).exp()
                                / (jitter_std[d] * (2.0 * std::f64::consts::PI).sqrt())
                        })
                        .product()
                };
                let mut rb = 0.0;
                for b1 in 0..2 {
                    for b2 in 0..2 {
                        rb += w[b1]
                            * w[b2]
                            * kappa(&next.particles[0], &prev.particles[b1])
                            * kappa(&next.particles[1], &prev.particles[b2]);
                    }
                }

                let hand = marginal + g + pol + rb.ln();
                let full = backward_weight_log(&hist, &model, &policy, 0, n, &[i1]);
                assert!(
                    (hand - full).abs() < 1e-10,
                    "hand {hand} vs implementation {full} (n={n}, i1={i1})"
                );
            }
        }
    }

    /// The load-bearing property of the sparse weight: for any two
    /// candidate prefixes, fast and full weights give the same difference,
    /// so Metropolis-Hastings ratios are identical.
    #[test]
    fn fast_and_full_weights_differ_by_a_constant_in_the_prefix() {
        let policy = reduced_gru(53);
        let hist = toy_history(3, 4, 3, 6, &policy);
        let horizon = hist.horizon();
        let mut rng = RngStream::new(404, 0);

        let mut checked = 0;
        for t in 0..horizon {
            for _ in 0..5 {
                let suffix: Vec<usize> = (t + 1..=horizon)
                    .map(|_| (rng.uniform_01() * 4.0) as usize % 4)
                    .collect();
                let full: Vec<f64> = (0..4)
                    .map(|n| backward_weight_log(&hist, &FullSupportToy, &policy, t, n, &suffix))
                    .collect();
                let fast: Vec<f64> = (0..4)
                    .map(|n| {
                        backward_weight_log_fast(&hist, &FullSupportToy, &policy, t, n, &suffix)
                    })
                    .collect();
                assert!(full.iter().all(|w| w.is_finite()), "full-support toy weights finite");
                for a in 0..4 {
                    for b in 0..4 {
                        let d = (fast[a] - fast[b]) - (full[a] - full[b]);
                        assert!(
                            d.abs() < 1e-8,
                            "ratio mismatch {d} at t={t}, pair ({a},{b}), suffix {suffix:?}"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    /// Same identity on the pendulum, whose deterministic position update
    /// gives most splices zero density: realized suffixes only, and the
    /// fast weight must be -inf exactly when the full weight is.
    #[test]
    fn fast_full_agreement_on_pendulum_support_boundary() {
        let model = pendulum();
        let policy = reduced_gru(59);
        let cfg = RunConfig { n_outer: 6, m_inner: 4, horizon: 6, ..RunConfig::default() };
        let hist = run_filter(&model, &policy, &cfg, &RngStream::new(505, 0)).unwrap();
        let horizon = hist.horizon();

        let mut finite_pairs = 0;
        let mut dead_candidates = 0;
        for terminal in 0..cfg.n_outer {
            let lineage = hist.genealogy_indices(terminal);
            for t in 0..horizon {
                let suffix = &lineage[t + 1..];
                let full: Vec<f64> = (0..cfg.n_outer)
                    .map(|n| backward_weight_log(&hist, &model, &policy, t, n, suffix))
                    .collect();
                let fast: Vec<f64> = (0..cfg.n_outer)
                    .map(|n| backward_weight_log_fast(&hist, &model, &policy, t, n, suffix))
                    .collect();
                for n in 0..cfg.n_outer {
                    // A realized suffix keeps all suffix-internal factors
                    // finite, so full is -inf exactly when the candidate
                    // splice itself is impossible — as fast sees too.
                    assert_eq!(full[n] == f64::NEG_INFINITY, fast[n] == f64::NEG_INFINITY);
                    if full[n] == f64::NEG_INFINITY {
                        dead_candidates += 1;
                    }
                }
                let anc = lineage[t];
                assert!(full[anc].is_finite(), "true ancestor weight must be finite");
                for a in 0..cfg.n_outer {
                    for b in 0..cfg.n_outer {
                        if full[a].is_finite() && full[b].is_finite() {
                            let d = (fast[a] - fast[b]) - (full[a] - full[b]);
                            assert!(d.abs() < 1e-8, "ratio mismatch {d}");
                            finite_pairs += 1;
                        }
                    }
                }
            }
        }
        assert!(finite_pairs > 0);
        assert!(dead_candidates > 0, "expected some impossible splices on this model");
    }

    /// For a policy whose design law depends only on the latest
    /// trajectory element, the sparse weight is exactly the first spliced
    /// block.
    #[test]
    fn memoryless_policy_fast_weight_is_single_block() {
        let policy = Policy::Random;
        let cfg = RunConfig { n_outer: 3, m_inner: 2, horizon: 5, ..RunConfig::default() };
        let hist = run_filter(&FullSupportToy, &policy, &cfg, &RngStream::new(606, 0)).unwrap();
        let jc = cfg.jitter_config(&FullSupportToy);
        let mut rng = RngStream::new(606, 1);

        for t in 0..hist.horizon() {
            let suffix: Vec<usize> = (t + 1..=hist.horizon())
                .map(|_| (rng.uniform_01() * 3.0) as usize % 3)
                .collect();
            for n in 0..3 {
                let prefix = &hist.frames[t].particles[n];
                let first = &hist.frames[t + 1].particles[suffix[0]];
                let xi = first.z().xi_prev.unwrap();
                let block = policy.logpdf(&prefix.policy_state, xi)
                    + transition_block_log(&FullSupportToy, &cfg, &jc, prefix, first);
                let fast =
                    backward_weight_log_fast(&hist, &FullSupportToy, &policy, t, n, &suffix);
                assert!((block - fast).abs() < 1e-12);
            }
        }
    }

    /// Recorded inner pre-resampling weights must equal a recomputation
    /// from the parent's cloud — the recorded history carries exactly
    /// what splice evaluations recompute for candidate pairings.
    #[test]
    fn stored_inner_weights_match_recomputation_along_true_lineages() {
        let model = pendulum();
        let policy = reduced_gru(61);
        let cfg = RunConfig { n_outer: 6, m_inner: 8, horizon: 5, ..RunConfig::default() };
        let hist = run_filter(&model, &policy, &cfg, &RngStream::new(707, 0)).unwrap();

        let mut checked = 0;
        for s in 1..=hist.horizon() {
            let frame = &hist.frames[s];
            for (i, stored) in frame.theta_pre_weights.iter().enumerate() {
                let stored = stored.as_ref().expect("live particles record inner weights");
                let parent = &hist.frames[s - 1].particles[frame.ancestors[i]];
                let child = &frame.particles[i];
                let xi = child.z().xi_prev.unwrap();
                let recomputed = cloud_reweight(
                    parent.theta.cloud().unwrap(),
                    &model,
                    &parent.z().x,
                    xi,
                    &child.z().x,
                )
                .unwrap();
                assert_eq!(stored.as_log(), recomputed.weights.as_log());
                checked += 1;
            }
        }
        assert_eq!(checked, 6 * 5);
    }

    #[test]
    fn single_particle_history_returns_the_genealogy() {
        let model = pendulum();
        let policy = reduced_gru(67);
        let cfg = RunConfig { n_outer: 1, m_inner: 4, horizon: 6, ..RunConfig::default() };
        let hist = run_filter(&model, &policy, &cfg, &RngStream::new(808, 0)).unwrap();
        let mut rng = RngStream::new(808, 1);
        let b = backward_sample(&hist, &model, &policy, &mut rng).unwrap();
        assert_eq!(b.indices, vec![0; 7]);
        assert_eq!(b.path, hist.final_frame().particles[0].traj);
        assert!(b.accepted.iter().all(|a| *a), "self-proposals count as accepted");
        assert_eq!(b.acceptance_rate(), 1.0);
    }

    #[test]
    fn non_cloud_histories_are_rejected() {
        let model = pendulum();
        let policy = reduced_gru(71);
        for strategy in [Strategy::Exact, Strategy::Ibis { moves: 1 }] {
            let cfg = RunConfig {
                n_outer: 2,
                m_inner: 4,
                horizon: 2,
                strategy,
                ..RunConfig::default()
            };
            let hist = run_filter(&model, &policy, &cfg, &RngStream::new(909, 0)).unwrap();
            let mut rng = RngStream::new(909, 1);
            assert!(matches!(
                backward_sample(&hist, &model, &policy, &mut rng),
                Err(SmootherError::UnsupportedStrategy { .. })
            ));
        }
    }

    /// With a memoryless policy, a single inner particle, zero jitter and
    /// no tempering, the sampler's decisions reduce to transition-density
    /// ratios with point-mass cloud matching. Replays them by hand from
    /// the same stream, mirroring the documented draw layout.
    #[test]
    fn acceptance_decisions_match_a_hand_simulation() {
        let model = pendulum();
        let policy = Policy::Random;
        let cfg = RunConfig {
            n_outer: 2,
            m_inner: 1,
            horizon: 3,
            eta: 0.0,
            slew_penalty: 0.0,
            jitter_scale: Some([0.0, 0.0, 0.0]),
            ..RunConfig::default()
        };
        for run_seed in 0..20u64 {
            let hist = run_filter(&model, &policy, &cfg, &RngStream::new(1000 + run_seed, 0)).unwrap();
            let mut rng = RngStream::new(2000 + run_seed, 0);
            let got = backward_sample(&hist, &model, &policy, &mut rng).unwrap();

            let mut replay = RngStream::new(2000 + run_seed, 0);
            let frames = &hist.frames;
            let mut indices = vec![0usize; 4];
            indices[3] = multinomial_draw(&frames[3].log_potentials, &mut replay).unwrap();
            for t in (0..3).rev() {
                let anc = frames[t + 1].ancestors[indices[t + 1]];
                let prop = multinomial_draw(&frames[t].log_potentials, &mut replay).unwrap();
                let u = replay.uniform_01();
                let take = if prop == anc {
                    true
                } else {
                    // Hand weight of candidate c: transition density of
                    // the splice under the candidate's single parameter,
                    // with a point-mass cloud-match requirement. The
                    // memoryless policy factor cancels in the ratio.
                    let hand = |c: usize| -> f64 {
                        let cand = &frames[t].particles[c];
                        let next = &frames[t + 1].particles[indices[t + 1]];
                        let th_prev = cand.theta.cloud().unwrap().particles[0];
                        let th_next = next.theta.cloud().unwrap().particles[0];
                        let xi = next.z().xi_prev.unwrap();
                        let f =
                            model.transition_logpdf(&next.z().x, &cand.z().x, xi, &th_prev);
                        if f == f64::NEG_INFINITY {
                            return f64::NEG_INFINITY;
                        }
                        if th_next != th_prev {
                            return f64::NEG_INFINITY;
                        }
                        f
                    };
                    u.ln() < hand(prop) - hand(anc)
                };
                indices[t] = if take { prop } else { anc };
            }
            assert_eq!(got.indices, indices, "seed {run_seed}");
        }
    }

    /// Distribution check against exact enumeration: on a tiny frozen
    /// history, the sampler's index paths must follow the law obtained by
    /// chaining the per-step Metropolis-Hastings kernels computed with
    /// full weights.
    #[test]
    fn backward_law_matches_exact_enumeration() {
        let policy = reduced_gru(73);
        let hist = toy_history(5, 3, 2, 3, &policy);
        let frames = &hist.frames;
        let n = 3;

        // Exact path law. Kernel at step t given the chain above:
        // propose j ~ W_t, accept with min(1, exp(full_j - full_anc)).
        let mut exact: std::collections::HashMap<Vec<usize>, f64> = std::collections::HashMap::new();
        let w_t: Vec<Vec<f64>> =
            (0..=3).map(|t| frames[t].log_potentials.normalized().unwrap()).collect();
        let mut stack: Vec<(Vec<usize>, f64)> = (0..n)
            .map(|a| (vec![a], w_t[3][a]))
            .collect();
        while let Some((chain, prob)) = stack.pop() {
            let t = 3 - chain.len(); // time of the next index to choose
            let suffix: Vec<usize> = chain.iter().rev().cloned().collect();
            let anc = frames[t + 1].ancestors[suffix[0]];
            let full: Vec<f64> = (0..n)
                .map(|c| backward_weight_log(&hist, &FullSupportToy, &policy, t, c, &suffix))
                .collect();
            for j in 0..n {
                let alpha = if j == anc {
                    1.0
                } else {
                    (full[j] - full[anc]).exp().min(1.0)
                };
                let mut p_j = w_t[t][j] * alpha;
                if j == anc {
                    // Rejected proposals fall back to the ancestor.
                    p_j += (0..n)
                        .filter(|k| *k != anc)
                        .map(|k| w_t[t][k] * (1.0 - (full[k] - full[anc]).exp().min(1.0)))
                        .sum::<f64>();
                }
                if p_j == 0.0 {
                    continue;
                }
                let mut longer = chain.clone();
                longer.push(j);
                if longer.len() == 4 {
                    let path: Vec<usize> = longer.iter().rev().cloned().collect();
                    *exact.entry(path).or_insert(0.0) += prob * p_j;
                } else {
                    stack.push((longer, prob * p_j));
                }
            }
        }
        let total: f64 = exact.values().sum();
        assert!((total - 1.0).abs() < 1e-9, "enumerated law must normalize, got {total}");

        // Sample many sampler paths.
        let reps = 20_000usize;
        let root = RngStream::new(7500, 0);
        let mut counts: std::collections::HashMap<Vec<usize>, usize> =
            std::collections::HashMap::new();
        for j in 0..reps {
            let mut rng = root.fork(&[SALT_BACKWARD, j as u64]);
            let b = backward_sample(&hist, &FullSupportToy, &policy, &mut rng).unwrap();
            *counts.entry(b.indices).or_insert(0) += 1;
        }

        // Chi-square over path cells, merging rare cells.
        let mut observed = Vec::new();
        let mut expected = Vec::new();
        let mut rare_obs = 0usize;
        let mut rare_exp = 0.0;
        for (path, p) in &exact {
            let e = p * reps as f64;
            let o = counts.get(path).copied().unwrap_or(0);
            if e < 5.0 {
                rare_obs += o;
                rare_exp += e;
            } else {
                observed.push(o);
                expected.push(e);
            }
        }
        // Paths sampled but absent from the enumeration would be a bug.
        let known: usize = exact.keys().map(|p| counts.get(p).copied().unwrap_or(0)).sum();
        assert_eq!(known, reps, "sampler produced a path outside the exact support");
        if rare_exp > 0.0 {
            observed.push(rare_obs);
            expected.push(rare_exp);
        }
        let stat = chi2_statistic(&observed, &expected);
        let crit = chi2_critical_1pct(observed.len() - 1);
        assert!(stat < crit, "chi2 {stat} over critical {crit} with {} cells", observed.len());
    }

    #[test]
    fn backward_pass_is_reproducible_and_parallel_safe() {
        let model = pendulum();
        let policy = reduced_gru(79);
        let cfg = RunConfig { n_outer: 8, m_inner: 8, horizon: 10, ..RunConfig::default() };
        let hist = run_filter(&model, &policy, &cfg, &RngStream::new(1111, 0)).unwrap();
        let root = RngStream::new(1111, 1);
        let a = backward_pass(&hist, &model, &policy, 6, &root).unwrap();
        let b = backward_pass(&hist, &model, &policy, 6, &root).unwrap();
        assert_eq!(a, b);
        let c = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap()
            .install(|| backward_pass(&hist, &model, &policy, 6, &root).unwrap());
        assert_eq!(a, c);
    }

    /// End-to-end smoothing diagnostics on the benchmark model: sampled
    /// paths respect the dynamics, acceptance statistics are sane, and
    /// the degeneracy report has the right shape.
    #[test]
    fn smoothing_diagnostics_on_the_pendulum() {
        let model = pendulum();
        let policy = reduced_gru(83);
        let cfg = RunConfig { n_outer: 16, m_inner: 8, horizon: 30, ..RunConfig::default() };
        let hist = run_filter(&model, &policy, &cfg, &RngStream::new(1212, 0)).unwrap();
        let root = RngStream::new(1212, 1);
        let trajectories = backward_pass(&hist, &model, &policy, 16, &root).unwrap();

        for b in &trajectories {
            assert_eq!(b.indices.len(), 31);
            assert!((0.0..=1.0).contains(&b.acceptance_rate()));
            // Accepted splices must still satisfy the deterministic
            // position update — impossible pairings are always rejected.
            for w in b.path.windows(2) {
                let drift = w[0].x[0] + w[0].x[1] * model.config().dt;
                assert!((w[1].x[0] - drift).abs() <= 1e-9);
            }
        }

        let report = degeneracy_report(&hist, &trajectories);
        assert_eq!(report.unique_traced.len(), 31);
        assert_eq!(report.unique_backward.len(), 31);
        assert!(report.unique_traced[30] <= 16);
        assert!(report.unique_backward[0] >= 1);
        // Not asserted pointwise (the advantage is an on-average claim),
        // but worth surfacing when running with --nocapture.
        eprintln!(
            "unique time-zero indices: traced {}, backward {}",
            report.unique_traced[0], report.unique_backward[0]
        );
        // Empty trajectory set degenerates cleanly.
        let empty = degeneracy_report(&hist, &[]);
        assert!(empty.unique_backward.iter().all(|u| *u == 0));
    }

    /// One backward pass costs a quadratic number of policy evaluations
    /// in the horizon for a history-dependent policy.
    #[test]
    fn backward_pass_cost_grows_quadratically_with_the_horizon() {
        let policy = reduced_gru(89);
        crate::testutil::assert_within_rounds(4, |round| {
            let median_secs = |horizon: usize| -> f64 {
                let hist = toy_history(6, 8, 4, horizon, &policy);
                let root = RngStream::new(1313, 2 + round as u64);
                let mut times: Vec<f64> = (0..3)
                    .map(|r| {
                        let start = std::time::Instant::now();
                        backward_pass(&hist, &FullSupportToy, &policy, 16, &root.derive(r))
                            .unwrap();
                        start.elapsed().as_secs_f64()
                    })
                    .collect();
                times.sort_by(|a, b| a.partial_cmp(b).unwrap());
                times[1]
            };
            let ratio = median_secs(50) / median_secs(25);
            let exponent = ratio.ln() / 2.0f64.ln();
            if (1.5..=2.5).contains(&exponent) {
                Ok(())
            } else {
                Err(format!(
                    "doubling the horizon gave cost ratio {ratio:.2} (exponent {exponent:.2})"
                ))
            }
        });
    }

    #[test]
    fn zero_jitter_point_mass_density_is_exact_match_only() {
        let jc = JitterConfig::new(Vector3::zeros(), 1);
        let th = Theta::new(1.0, 2.0, 3.0);
        assert_eq!(jitter_logpdf(&th, &th, &jc), 0.0);
        assert_eq!(
            jitter_logpdf(&Theta::new(1.0, 2.0, 3.0 + 1e-12), &th, &jc),
            f64::NEG_INFINITY
        );
        // And through the cloud-level factor used by the weights.
        let prev = crate::theta::ThetaCloud {
            particles: vec![th],
            weights: LogWeights::uniform(1).unwrap(),
            ancestors: vec![0],
        };
        let same = prev.clone();
        assert_eq!(cloud_transition_logpdf_rb(&prev, &same, &jc), 0.0);
    }
}
