//! Sequential Bayesian experimental design on state-space models.
//!
//! This crate chooses experiment designs adaptively for dynamical systems
//! with unknown parameters. A nested particle filter tracks, for each
//! candidate experiment trajectory, a cloud of parameter particles; the
//! filter's potentials reward outcomes that are surprising under the current
//! parameter posterior, which is exactly what makes an experiment
//! informative. On top of the filter sit a backward trajectory sampler that
//! fights path degeneracy, a conditional-SMC trainer that amortizes the
//! design strategy into a recurrent policy network by score climbing, and
//! estimators (expected information gain, contrastive bounds, realized
//! information gain) for judging the result. A damped stochastic pendulum
//! with a torque design and a conjugate Gaussian parameter posterior serves
//! as the benchmark model and ground truth.
//!
//! Entry points:
//! - [`filter::run_filter`] runs the nested filter forward.
//! - [`smoother::backward_sample`] draws smoothed trajectories from a run.
//! - [`trainer::train`] fits a design policy by Markovian score climbing.
//! - [`evaluation`] scores policies.
//! - The `nestbed` binary wraps these as `train`, `eval`, `bench`, and
//!   `diagnose` subcommands; the `examples/` directory shows each capability
//!   as a small runnable program.

pub mod config;
pub mod evaluation;
pub mod filter;
pub mod model;
pub mod policy;
pub mod rng;
pub mod smoother;
pub mod theta;
pub mod trainer;
pub mod weights;

#[cfg(test)]
pub(crate) mod testutil;
