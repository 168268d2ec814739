//! A trainable local-feature pipeline.
//!
//! The crate implements the full loop for learning sparse image features
//! without manual annotation:
//!
//! * [`diff`] — a small reverse-mode autodiff engine (tape + dense kernels)
//!   with a finite-difference verification harness;
//! * [`detector`] — a multi-scale, fully convolutional keypoint detector with
//!   sub-pixel localization, per-keypoint scale, and dense orientation;
//! * [`descriptor`] — oriented patch cropping and a small CNN mapping each
//!   patch to a unit-norm embedding;
//! * [`geometry`] — pinhole reprojection through depth + SE(3) pose, score-map
//!   warping, occlusion checks, and supervision-target generation;
//! * [`losses`] — image, pair, geometric-consistency, and triplet objectives
//!   with progressive hard-negative mining;
//! * [`trainer`] — the asymmetric two-branch optimization with a lagged
//!   network copy, Adam, augmentation, and checkpointing;
//! * [`data`] — dataset manifests, file formats, pair sampling, and a
//!   synthetic plane-scene renderer with exact depth/pose ground truth;
//! * [`eval`] — nearest-neighbor matching, matching-score evaluation,
//!   threshold/rotation sweeps, timing, and a feature-file interop format.

pub mod config;
pub mod data;
pub mod descriptor;
pub mod detector;
pub mod diff;
mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
