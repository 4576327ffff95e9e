//! Differentiable volume rendering engine that decomposes dynamic scenes into
//! a static radiance field and a time-conditioned dynamic field.
//!
//! The crate is organized bottom-up:
//!
//! - [`scene`]: procedural scenes with exact ground truth, rays and patches.
//! - [`encoding`]: hash grids, direction encoding, appearance embeddings.
//! - [`field`]: the static and dynamic branches with exact backward passes.
//! - [`render`]: ray sampling and dual-branch compositing.
//! - [`loss`]: reconstruction, robust, sky, planar and dynamic regularizers.
//! - [`model`] and [`pipeline`]: batched forward/backward over patch batches.
//! - [`train`]: two-phase optimization, Adam, checkpoints, run logs.
//! - [`metrics`]: PSNR/SSIM and motion-segmentation scores.
//! - [`io`]: PNG and float-map export.

pub mod encoding;
pub mod error;
pub mod field;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod render;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
