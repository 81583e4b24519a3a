//! Target-driven navigation lab.
//!
//! A self-contained pipeline for learning image-goal navigation by imitation
//! in a synthetic depth gridworld:
//!
//! - [`env`]: deterministic occupancy-grid world, seven-action transition
//!   model, analytic four-view depth panoramas, success criterion.
//! - [`expert`]: Dijkstra shortest-path demonstrations with collision and
//!   stop labels, stop-balanced task sampling.
//! - [`model`]: the learnable policy — shared convolutional encoder with
//!   spectral normalization, variational next-observation generation,
//!   predictive controller, collision-prediction and target-checking heads,
//!   and the combined training loss.
//! - [`trainer`]: RMSprop optimization loop, batching, checkpoints, logs.
//! - [`eval`]: episode roll-outs, SR/SPL/difficulty metrics, collision
//!   curves, random baseline, and the ablation harness.
//! - [`plot`]: top-down trajectory maps and collision-curve images.

pub mod env;
pub mod eval;
pub mod expert;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod plot;
pub mod trainer;
