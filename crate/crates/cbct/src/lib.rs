//! Sparse-view interventional cone-beam CT at desk scale.
//!
//! The crate covers the whole experimental loop:
//!
//! 1. **Simulation** — circular cone-beam [`geometry`], an analytic
//!    ray-driven projector ([`projection`]), FDK reconstruction ([`fdk`]),
//!    and procedural interventional cases ([`phantom`], [`dataset`]):
//!    a planning-scan prior, the same anatomy with a steel needle, the
//!    900 HU threshold segmentation mask, a 13-view sparse FDK input and
//!    a dense-view ground truth, normalized per case by the 99th
//!    percentile.
//! 2. **Learning** — a minimal reverse-mode engine ([`nn`]) with the
//!    MSE + λ·Dice objective, the three architectures ([`models`]):
//!    `fdkconvnet`, the dual-branch `prior_net`, and `prior_segnet` with
//!    its parallel instrument-segmentation head, plus the seeded training
//!    loop ([`training`]) with online augmentation and prior misalignment
//!    ([`augment`]).
//! 3. **Evaluation** — SSIM/PSNR/RMSE ([`metrics`]), pairwise Wilcoxon
//!    signed-rank tests ([`stats`]), and the misalignment robustness
//!    sweep, all orchestrated by [`pipeline`] behind the `cbct` CLI.
//!
//! The companion book under `book/` walks through each stage; its code
//! blocks compile and run as doc-tests of this crate.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fdk;
pub mod geometry;
pub mod image;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod projection;
pub mod stats;
pub mod training;
pub mod volume;

pub use error::{CbctError, Result};

// Keep the book honest: every fenced Rust block in book/src is compiled
// and executed by `cargo test --doc`.
#[cfg(doctest)]
#[doc(hidden)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/geometry-projection.md")]
    pub mod geometry_projection {}
    #[doc = include_str!("../../../book/src/fdk.md")]
    pub mod fdk {}
    #[doc = include_str!("../../../book/src/phantoms-data.md")]
    pub mod phantoms_data {}
    #[doc = include_str!("../../../book/src/augmentation.md")]
    pub mod augmentation {}
    #[doc = include_str!("../../../book/src/engine.md")]
    pub mod engine {}
    #[doc = include_str!("../../../book/src/models-training.md")]
    pub mod models_training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/file-formats.md")]
    pub mod file_formats {}
}
