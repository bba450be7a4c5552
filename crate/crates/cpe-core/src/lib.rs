//! Causal posterior estimation (CPE) for simulator models.
//!
//! CPE approximates the posterior of a probabilistic program with a
//! normalizing flow whose neural parameterization hard-codes the
//! conditional-dependence structure of the model. The generative model is
//! declared as a directed acyclic graph over parameter and data nodes
//! ([`graph::Dag`]); inverting the program and reading off parent sets yields
//! a masked block-triangular network in which forbidden dependencies are
//! structurally zero.
//!
//! Two flow variants are provided:
//!
//! * a continuous variant ([`cpeflow::FlowNet`]) trained with the
//!   rectified-flow objective and sampled by integrating an ODE from prior
//!   draws ([`samplers::euler_sample`], [`samplers::rk45_sample`]);
//! * a discrete variant ([`dcpeflow::DiscreteFlowNet`]) with strictly
//!   positive block-diagonal weights, trained by maximum likelihood with an
//!   exact triangular log-determinant and sampled by per-coordinate
//!   inversion ([`samplers::discrete_sample`]).
//!
//! The crate also ships the benchmark task suite ([`tasks`]), slice-sampling
//! reference posteriors, classifier two-sample evaluation ([`eval`]) and a
//! file-based pipeline runner ([`pipeline`]) used by the `cpe` binary.
//!
//! # Example
//!
//! ```
//! use cpe_core::graph::{dependency_mask, invert_program, topological_sort};
//! use cpe_core::tasks::make_task;
//!
//! let task = make_task("two_moons").unwrap();
//! let posterior = invert_program(task.dag());
//! let order = topological_sort(&posterior).unwrap();
//! let mask = dependency_mask(&posterior, &order).unwrap();
//! assert_eq!(mask.dim_mask.nrows(), task.theta_dim());
//! ```
//!
//! # Parallelism
//!
//! Data-parallel loops (dataset simulation, batched gradients, trajectory
//! integration, MCMC chains, cross-validation folds) run on rayon when the
//! default `parallel` feature is enabled and fall back to sequential
//! iteration otherwise. Work is split into fixed-size chunks with one RNG
//! substream per item, so results are bitwise identical regardless of worker
//! count or feature selection.

pub mod cpeflow;
pub mod dcpeflow;
pub mod error;
pub mod eval;
pub mod exec;
pub mod graph;
pub mod math;
pub mod netblocks;
pub mod params;
pub mod pipeline;
pub mod samplers;
pub mod tasks;
pub mod train;

pub use error::CpeError;
