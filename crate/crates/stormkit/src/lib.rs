//! stormkit: a desk-scale probabilistic weather emulation pipeline.
//!
//! The pipeline runs on a synthetic cylindrical-sphere dynamical system with an
//! analytically known transition distribution, so every stage can be verified
//! against closed-form or Monte Carlo oracles:
//!
//! 1. [`toy`] generates datasets from the toy dynamics and persists them as WT1 files.
//! 2. [`model`] defines the windowed-attention U-Net forecaster, built on the
//!    reverse-mode tape in [`tape`].
//! 3. [`train`] fits the deterministic forecaster (three-phase schedule).
//! 4. [`flow`] trains a residual flow-matching (or DDPM) generator on the
//!    forecaster's residuals and samples it with an Euler scheme.
//! 5. [`rollout`] composes autoregressive ensemble trajectories.
//! 6. [`metrics`] scores them: fair CRPS, energy score, Brier, spread-skill,
//!    rank histograms, activity and zonal spectra.
//! 7. [`ablation`] drives paired-seed experiment matrices over design choices.

pub mod ablation;
pub mod cli;
pub mod flow;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod provenance;
pub mod rng;
pub mod rollout;
pub mod tape;
pub mod toy;
pub mod train;

pub use grid::{GridSpec, LatWeights, NormStats, StateTensor};
pub use toy::{Dataset, Split, ToyDynamicsConfig};
