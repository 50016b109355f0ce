//! Geometry-driven pruning and learned refinement of 3D Gaussian splat clouds.
//!
//! The crate is organised bottom-up:
//!
//! * [`gaussians`]: the cloud data model and binary PLY interchange.
//! * [`pruner`]: opacity/volume z-score ranking and top-K selection.
//! * [`shading`]: real spherical harmonics and the Gaussian kernel.
//! * [`rasterizer`]: tiled CPU splatting with overdraw accounting and an
//!   analytic backward pass.
//! * [`autodiff`]: a small reverse-mode tape over dense tensors.
//! * [`encoder`] and [`refiner`]: the dual-branch feature encoder, the k-NN
//!   local-attention refinement network, residual parameter heads and the
//!   training loop.
//! * [`metrics`]: PSNR, SSIM and pruning distribution statistics.
//! * [`synthscene`]: deterministic synthetic scenes for desk-scale runs.
//! * [`cli`]: the `splatrefine` command-line driver.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod gaussians;
pub mod image_io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pruner;
pub mod rasterizer;
pub mod real;
pub mod refiner;
pub mod shading;
pub mod synthscene;

pub use gaussians::{Gaussian, GaussianCloud};
pub use rasterizer::{Camera, RenderOutput};
pub use real::Real;
