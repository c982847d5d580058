//! Two-stage unsupervised image stitching.
//!
//! Stage one aligns a reference/target pair by directly optimizing the four
//! corner offsets of a homography under an ablation-masked photometric loss,
//! then warps both images into the smallest canvas that holds them. Stage two
//! is a low-resolution encoder-decoder plus a fully-convolutional
//! high-resolution refiner, trained without labels from content, seam and
//! consistency losses.
//!
//! Module map:
//! - [`tensorcore`]: dense rank-4 tensors, the layer catalog, reverse-mode
//!   gradients, Adam and checkpoints.
//! - [`geometry`]: 4-point homographies, DLT and canvas extents.
//! - [`warpmask`]: differentiable bilinear warping, content and seam masks.
//! - [`losses`]: every objective, plus the frozen perceptual feature stack.
//! - [`align`]: coarse-to-fine direct offset estimation.
//! - [`reconstruct`]: the two reconstruction branches, training and inference.
//! - [`evalkit`]: overlap PSNR/SSIM, 4pt-RMSE, difficulty buckets.
//! - [`datakit`]: synthetic pair generation, manifests and image IO.

pub mod align;
pub mod config;
pub mod datakit;
mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod reconstruct;
pub mod rng;
pub mod tensorcore;
pub mod warpmask;

pub use error::{Error, Result};
pub use tensorcore::{Shape4, Tensor4};
