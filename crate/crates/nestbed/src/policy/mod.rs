//! Design policies: how the next experiment is chosen.
//!
//! A policy maps the experiment history to a distribution over the next
//! design `xi in (-1, 1)`. Three families share one interface:
//!
//! - [`Policy::Gru`]: the trainable recurrent network (the real thing),
//! - [`Policy::Linear`]: five-parameter linear features, for tests and
//!   cheap baselines,
//! - [`Policy::Random`]: uniform designs, the untrained reference point.
//!
//! All stochastic families draw a Gaussian pre-design and squash it through
//! `tanh`, so densities carry the change-of-variables term
//! `-ln(1 - xi^2)`. The recurrent state is explicit: callers thread a
//! [`PolicyState`] through [`Policy::step`] as trajectory elements arrive,
//! which is what lets a particle filter keep one policy state per particle
//! and a backward smoother splice histories without re-encoding prefixes.

mod arch;
mod gru;
mod linear;
mod net;

pub use arch::PolicyArchConfig;
pub use gru::GruPolicy;
pub use linear::{LinearPolicy, LINEAR_PARAM_COUNT};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::AugmentedState;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("bad architecture: {0}")]
    BadArch(String),
    #[error("design {xi} lies outside the open interval (-1, 1)")]
    DesignOutOfRange { xi: f64 },
    #[error("trajectory element {index} carries no design")]
    DesignMissing { index: usize },
    #[error("cannot score an empty trajectory")]
    TrajectoryTooShort,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint format version {found} is not supported (expected {CHECKPOINT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint data invalid: {0}")]
    BadData(String),
}

/// Recurrent (or degenerate) policy state after consuming a trajectory
/// prefix. Opaque to callers; produced by `init_state` and `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub(crate) layers: Vec<Vec<f64>>,
    pub(crate) step: usize,
}

impl PolicyState {
    /// Number of trajectory elements consumed so far.
    pub fn steps_consumed(&self) -> usize {
        self.step
    }
}

/// Log-density of the squashed Gaussian design distribution at `xi`.
pub(crate) fn squashed_gaussian_logpdf(xi: f64, mean: f64, log_std: f64) -> f64 {
    if xi.abs() >= 1.0 {
        return f64::NEG_INFINITY;
    }
    let z = (xi.atanh() - mean) / log_std.exp();
    -0.5 * z * z
        - 0.5 * (2.0 * std::f64::consts::PI).ln()
        - log_std
        - (1.0 - xi * xi).ln()
}

/// Samples `xi = tanh(a)`, `a ~ Normal(mean, exp(log_std)^2)`.
///
/// The pre-squash draw is clamped to `|a| <= 9` so `tanh` can never round to
/// exactly 1 in f64; at the scales this policy runs at, the clamp is a
/// smaller-than-1e-18 tail event.
pub(crate) fn squashed_gaussian_sample(mean: f64, log_std: f64, rng: &mut RngStream) -> (f64, f64) {
    let a = (mean + log_std.exp() * rng.standard_normal()).clamp(-9.0, 9.0);
    let xi = a.tanh();
    (xi, squashed_gaussian_logpdf(xi, mean, log_std))
}

/// A design policy of one of the three families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Policy {
    Gru(GruPolicy),
    Linear(LinearPolicy),
    Random,
}

impl Policy {
    pub fn family_name(&self) -> &'static str {
        match self {
            Policy::Gru(_) => "gru",
            Policy::Linear(_) => "linear",
            Policy::Random => "random",
        }
    }

    /// Whether the design distribution at step `t` depends on trajectory
    /// elements before the latest one. Only the recurrent policy does; for
    /// the others, log-densities of a fixed design under two histories
    /// sharing the last element are equal.
    pub fn history_dependent(&self) -> bool {
        matches!(self, Policy::Gru(_))
    }

    /// State before any trajectory element has been consumed.
    pub fn init_state(&self) -> PolicyState {
        match self {
            Policy::Gru(p) => p.init_state(),
            Policy::Linear(p) => p.init_state(),
            Policy::Random => PolicyState {
                layers: Vec::new(),
                step: 0,
            },
        }
    }

    /// Advances the state by one trajectory element.
    pub fn step(&self, state: &PolicyState, z: &AugmentedState) -> PolicyState {
        match self {
            Policy::Gru(p) => p.step(state, z),
            Policy::Linear(p) => p.step(state, z),
            Policy::Random => PolicyState {
                layers: Vec::new(),
                step: state.step + 1,
            },
        }
    }

    /// Draws a design; returns `(xi, log pi(xi | state))`. The log-density
    /// is computed through [`Policy::logpdf`], so the two always agree.
    pub fn sample(&self, state: &PolicyState, rng: &mut RngStream) -> (f64, f64) {
        match self {
            Policy::Gru(p) => {
                let (mu, log_std) = p.mean_log_std(state);
                squashed_gaussian_sample(mu, log_std, rng)
            }
            Policy::Linear(p) => {
                let (mu, log_std) = p.mean_log_std(state);
                squashed_gaussian_sample(mu, log_std, rng)
            }
            Policy::Random => {
                let xi = rng.uniform(-1.0, 1.0);
                (xi, self.logpdf(state, xi))
            }
        }
    }

    /// `log pi(xi | state)`; `-inf` outside `(-1, 1)`.
    pub fn logpdf(&self, state: &PolicyState, xi: f64) -> f64 {
        if xi.abs() >= 1.0 {
            return f64::NEG_INFINITY;
        }
        match self {
            Policy::Gru(p) => {
                let (mu, log_std) = p.mean_log_std(state);
                squashed_gaussian_logpdf(xi, mu, log_std)
            }
            Policy::Linear(p) => {
                let (mu, log_std) = p.mean_log_std(state);
                squashed_gaussian_logpdf(xi, mu, log_std)
            }
            Policy::Random => -std::f64::consts::LN_2,
        }
    }

    /// Gradient of `sum_t log pi(xi_t | z_{0:t})` along a trajectory, one
    /// entry per parameter. Empty for the random policy.
    pub fn score(&self, traj: &[AugmentedState]) -> Result<Vec<f64>, PolicyError> {
        match self {
            Policy::Gru(p) => p.score(traj),
            Policy::Linear(p) => p.score(traj),
            Policy::Random => {
                if traj.is_empty() {
                    Err(PolicyError::TrajectoryTooShort)
                } else {
                    Ok(Vec::new())
                }
            }
        }
    }

    /// Summed design log-density along a trajectory.
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
            total += self.logpdf(&state, xi);
        }
        Ok(total)
    }

    pub fn n_params(&self) -> usize {
        match self {
            Policy::Gru(p) => p.n_params(),
            Policy::Linear(p) => p.n_params(),
            Policy::Random => 0,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.n_params() > 0
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Policy::Gru(p) => p.params(),
            Policy::Linear(p) => p.params(),
            Policy::Random => &[],
        }
    }

    /// `params += scale * delta`, the ascent step used by the trainer.
    pub fn apply_update(&mut self, delta: &[f64], scale: f64) -> Result<(), PolicyError> {
        let params = match self {
            Policy::Gru(p) => p.params_mut(),
            Policy::Linear(p) => p.params_mut(),
            Policy::Random => &mut [],
        };
        if params.len() != delta.len() {
            return Err(PolicyError::BadArch(format!(
                "update length {} does not match parameter count {}",
                delta.len(),
                params.len()
            )));
        }
        for (p, d) in params.iter_mut().zip(delta.iter()) {
            *p += scale * d;
        }
        Ok(())
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    family: String,
    arch: Option<PolicyArchConfig>,
    params: Vec<f64>,
}

/// Writes a policy checkpoint: JSON with a version header, the architecture,
/// and the flat parameter vector. f64 values are printed in shortest
/// round-trip form, so save followed by load reproduces every bit.
pub fn save_checkpoint(policy: &Policy, path: &Path) -> Result<(), CheckpointError> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        family: policy.family_name().to_string(),
        arch: match policy {
            Policy::Gru(p) => Some(p.arch().clone()),
            _ => None,
        },
        params: policy.params().to_vec(),
    };
    let json = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Policy, CheckpointError> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.format_version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: file.format_version,
        });
    }
    match file.family.as_str() {
        "gru" => {
            let arch = file
                .arch
                .ok_or_else(|| CheckpointError::BadData("gru checkpoint lacks an architecture".into()))?;
            let policy = GruPolicy::from_parts(arch, file.params)
                .map_err(|e| CheckpointError::BadData(e.to_string()))?;
            Ok(Policy::Gru(policy))
        }
        "linear" => {
            let policy = LinearPolicy::from_params(file.params)
                .map_err(|e| CheckpointError::BadData(e.to_string()))?;
            Ok(Policy::Linear(policy))
        }
        "random" => {
            if !file.params.is_empty() {
                return Err(CheckpointError::BadData(
                    "random policy checkpoint carries parameters".into(),
                ));
            }
            Ok(Policy::Random)
        }
        other => Err(CheckpointError::BadData(format!("unknown policy family '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, Pendulum, PendulumConfig, State};
    use crate::testutil;
    use approx::assert_relative_eq;

    fn short_trajectory(seed: u64, len: usize) -> Vec<AugmentedState> {
        let p = Pendulum::new(PendulumConfig::default());
        let mut rng = RngStream::new(seed, 0);
        let theta = p.sample_prior_theta(&mut rng);
        let mut traj = vec![AugmentedState::initial(p.init_state())];
        for _ in 0..len {
            let xi = rng.uniform(-0.95, 0.95);
            let x = traj.last().unwrap().x;
            let next = p.sample_transition(&x, xi, &theta, &mut rng);
            traj.push(AugmentedState::step(next, xi));
        }
        traj
    }

    fn random_small_arch(rng: &mut RngStream) -> PolicyArchConfig {
        let pick = |rng: &mut RngStream, lo: usize, hi: usize| {
            lo + (rng.uniform_01() * (hi - lo + 1) as f64) as usize
        };
        PolicyArchConfig {
            input_dim: 3,
            encoder: [pick(rng, 4, 7), pick(rng, 4, 7), pick(rng, 3, 5)],
            recurrent: [pick(rng, 3, 6), pick(rng, 3, 6)],
            head: [pick(rng, 4, 7), pick(rng, 4, 7)],
            design_dim: 1,
            init_log_std: -0.7,
        }
    }

    /// Central finite differences of the summed design log-density.
    fn fd_score(policy: &GruPolicy, traj: &[AugmentedState], eps: f64) -> Vec<f64> {
        let mut out = vec![0.0; policy.n_params()];
        for i in 0..policy.n_params() {
            let mut plus = policy.clone();
            plus.params_mut()[i] += eps;
            let mut minus = policy.clone();
            minus.params_mut()[i] -= eps;
            out[i] = (plus.trajectory_logpdf(traj).unwrap()
                - minus.trajectory_logpdf(traj).unwrap())
                / (2.0 * eps);
        }
        out
    }

    #[test]
    fn score_matches_finite_differences_across_architectures() {
        // The acceptance suite runs 20 architectures; five here keep the
        // unit test fast while still varying every width.
        let mut arch_rng = RngStream::new(2024, 0);
        for case in 0..5 {
            let arch = random_small_arch(&mut arch_rng);
            let mut rng = RngStream::new(100 + case, 0);
            let policy = GruPolicy::init(arch, &mut rng).unwrap();
            let traj = short_trajectory(200 + case, 3);
            let analytic = policy.score(&traj).unwrap();
            let numeric = fd_score(&policy, &traj, 1e-5);
            let num_norm: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
            let err_norm: f64 = analytic
                .iter()
                .zip(numeric.iter())
                .map(|(a, n)| (a - n) * (a - n))
                .sum::<f64>()
                .sqrt();
            assert!(
                err_norm <= 1e-4 * num_norm.max(1e-8),
                "case {case}: relative gradient error {}",
                err_norm / num_norm
            );
        }
    }

    #[test]
    fn linear_score_matches_finite_differences() {
        let mut policy = LinearPolicy::init(-0.5);
        policy.params_mut()[..4].copy_from_slice(&[0.3, -0.2, 0.4, 0.1]);
        let traj = short_trajectory(7, 6);
        let analytic = policy.score(&traj).unwrap();
        let eps = 1e-5;
        for i in 0..policy.n_params() {
            let mut plus = policy.clone();
            plus.params_mut()[i] += eps;
            let mut minus = policy.clone();
            minus.params_mut()[i] -= eps;
            let lp = |p: &LinearPolicy, traj: &[AugmentedState]| {
                Policy::Linear(p.clone()).trajectory_logpdf(traj).unwrap()
            };
            let numeric = (lp(&plus, &traj) - lp(&minus, &traj)) / (2.0 * eps);
            assert_relative_eq!(analytic[i], numeric, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn logpdf_integrates_to_one() {
        // Simpson's rule in the pre-squash coordinate `a`, where the
        // integrand `exp(logpdf(tanh a)) * sech^2(a)` is smooth. A missing
        // or wrong `-ln(1 - xi^2)` Jacobian term would break the result, so
        // this still checks the change of variables, without asking the
        // quadrature to resolve the boundary layer in xi-space.
        for (mu, log_std) in [(0.0f64, -1.0f64), (0.8, -0.3), (-1.5, 0.2)] {
            let sd = log_std.exp();
            let n = 20_000usize;
            let lo = mu - 9.0 * sd;
            let hi = mu + 9.0 * sd;
            let h = (hi - lo) / n as f64;
            let f = |a: f64| {
                let xi = a.tanh();
                let sech2 = 1.0 - xi * xi;
                squashed_gaussian_logpdf(xi, mu, log_std).exp() * sech2
            };
            let mut acc = f(lo) + f(hi);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(lo + i as f64 * h);
            }
            let integral = acc * h / 3.0;
            assert!(
                (integral - 1.0).abs() < 1e-6,
                "mu {mu} log_std {log_std}: integral {integral}"
            );
        }
    }

    #[test]
    fn logpdf_is_minus_inf_at_boundary() {
        let policy = Policy::Random;
        let state = policy.init_state();
        assert_eq!(policy.logpdf(&state, 1.0), f64::NEG_INFINITY);
        assert_eq!(policy.logpdf(&state, -1.0), f64::NEG_INFINITY);
        assert_eq!(squashed_gaussian_logpdf(1.0, 0.0, -1.0), f64::NEG_INFINITY);
        assert_eq!(squashed_gaussian_logpdf(-1.2, 0.0, -1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn samples_follow_the_squashed_gaussian_law() {
        let (mu, log_std) = (0.4, -0.9);
        let mut rng = RngStream::new(55, 0);
        let n = 40_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| squashed_gaussian_sample(mu, log_std, &mut rng).0)
            .collect();
        assert!(xs.iter().all(|x| x.abs() < 1.0));
        let sd = log_std.exp();
        let d = testutil::ks_distance(&xs, |xi| testutil::normal_cdf(xi.atanh(), mu, sd));
        assert!(d < testutil::ks_critical_1pct(n), "KS statistic {d}");
    }

    #[test]
    fn density_matches_cdf_derivative() {
        let (mu, log_std): (f64, f64) = (-0.2, -0.6);
        let sd = log_std.exp();
        let cdf = |xi: f64| testutil::normal_cdf(xi.atanh(), mu, sd);
        for xi in [-0.8, -0.3, 0.0, 0.45, 0.9] {
            let h = 1e-6;
            let numeric = (cdf(xi + h) - cdf(xi - h)) / (2.0 * h);
            let analytic = squashed_gaussian_logpdf(xi, mu, log_std).exp();
            // The erf approximation inside normal_cdf caps accuracy near 1e-7.
            assert!(
                (numeric - analytic).abs() < 2e-4 * analytic.max(1.0),
                "xi {xi}: numeric {numeric}, analytic {analytic}"
            );
        }
    }

    #[test]
    fn sample_logpdf_self_consistency() {
        let mut rng = RngStream::new(3, 9);
        let arch = PolicyArchConfig::reduced(4);
        let policy = Policy::Gru(GruPolicy::init(arch, &mut rng).unwrap());
        let traj = short_trajectory(12, 2);
        let mut state = policy.init_state();
        for z in &traj {
            state = policy.step(&state, z);
        }
        for _ in 0..50 {
            let (xi, lp) = policy.sample(&state, &mut rng);
            assert_eq!(lp, policy.logpdf(&state, xi));
        }
    }

    #[test]
    fn initial_mean_design_is_near_zero() {
        let mut rng = RngStream::new(91, 0);
        let policy = GruPolicy::init(PolicyArchConfig::reduced(8), &mut rng).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..1000 {
            let traj = short_trajectory(10_000 + i, 3);
            let mut state = policy.init_state();
            for z in &traj {
                state = policy.step(&state, z);
            }
            let (mu, _) = policy.mean_log_std(&state);
            worst = worst.max(mu.tanh().abs());
        }
        assert!(worst < 0.5, "largest initial mean design {worst}");
    }

    #[test]
    fn state_distinguishes_histories() {
        let mut rng = RngStream::new(17, 0);
        let policy = GruPolicy::init(PolicyArchConfig::reduced(4), &mut rng).unwrap();
        let a = short_trajectory(1, 4);
        let mut b = a.clone();
        // Perturb an early element only; the suffix is shared.
        b[1].x = State::new(b[1].x[0], b[1].x[1] + 0.25);
        let run = |traj: &[AugmentedState]| {
            let mut st = policy.init_state();
            for z in traj {
                st = policy.step(&st, z);
            }
            st
        };
        assert_ne!(run(&a), run(&b));
    }

    #[test]
    fn random_policy_score_is_empty_and_uniform() {
        let policy = Policy::Random;
        let traj = short_trajectory(2, 3);
        assert_eq!(policy.score(&traj).unwrap(), Vec::<f64>::new());
        let state = policy.init_state();
        assert_relative_eq!(policy.logpdf(&state, 0.3), -std::f64::consts::LN_2);
        let mut rng = RngStream::new(0, 0);
        let mut mean = 0.0;
        let n = 20_000;
        for _ in 0..n {
            mean += policy.sample(&state, &mut rng).0;
        }
        assert!((mean / n as f64).abs() < 0.02);
    }

    #[test]
    fn step_is_deterministic() {
        let mut rng = RngStream::new(40, 0);
        let policy = GruPolicy::init(PolicyArchConfig::reduced(5), &mut rng).unwrap();
        let traj = short_trajectory(8, 5);
        let mut s1 = policy.init_state();
        let mut s2 = policy.init_state();
        for z in &traj {
            s1 = policy.step(&s1, z);
            s2 = policy.step(&s2, z);
        }
        assert_eq!(s1, s2);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.json");
        let mut rng = RngStream::new(66, 0);
        let policy = Policy::Gru(GruPolicy::init(PolicyArchConfig::reduced(6), &mut rng).unwrap());
        save_checkpoint(&policy, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let (orig, back) = (policy.params(), loaded.params());
        assert_eq!(orig.len(), back.len());
        for (a, b) in orig.iter().zip(back.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        match (&policy, &loaded) {
            (Policy::Gru(a), Policy::Gru(b)) => assert_eq!(a.arch(), b.arch()),
            _ => panic!("family changed in round trip"),
        }
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Parse(_))));
        std::fs::write(
            &path,
            r#"{"format_version":99,"family":"gru","arch":null,"params":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::UnsupportedVersion { found: 99 })
        ));
        std::fs::write(
            &path,
            r#"{"format_version":1,"family":"linear","arch":null,"params":[1.0,2.0]}"#,
        )
        .unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadData(_))));
    }

    #[test]
    fn score_rejects_malformed_trajectories() {
        let mut rng = RngStream::new(5, 0);
        let policy = Policy::Gru(GruPolicy::init(PolicyArchConfig::reduced(3), &mut rng).unwrap());
        assert!(matches!(policy.score(&[]), Err(PolicyError::TrajectoryTooShort)));
        let mut traj = short_trajectory(3, 2);
        traj[1].xi_prev = None;
        assert!(matches!(
            policy.score(&traj),
            Err(PolicyError::DesignMissing { index: 1 })
        ));
        let mut traj = short_trajectory(3, 2);
        traj[2].xi_prev = Some(1.0);
        assert!(matches!(
            policy.score(&traj),
            Err(PolicyError::DesignOutOfRange { .. })
        ));
    }
}
