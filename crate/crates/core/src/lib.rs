//! Core algorithms for photo-realistic reconstruction from sparse,
//! uncalibrated images: focal recovery and global pointmap alignment,
//! confidence-aware depth alignment, depth-based forward warping with
//! inpainted novel-view supervision, a differentiable CPU Gaussian-splat
//! renderer, the joint pose/scene optimization loop, and evaluation metrics.
//!
//! File formats, dataset ingestion and the command-line surface live in the
//! companion `sparsesplat-cli` crate; everything here is in-memory and
//! deterministic for fixed inputs.

pub mod alignment;
pub mod camera;
pub mod depth_align;
pub mod eval;
pub mod focal;
pub mod grid;
pub mod inpaint;
pub mod loss;
pub mod pose;
pub mod registration;
pub mod spline;
pub mod splat;
pub mod synthesis;
pub mod train;
pub mod warp;
