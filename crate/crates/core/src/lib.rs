//! Unsupervised MRI and sparse-view CT reconstruction with a deep image prior
//! whose input is refreshed by diffusion purification.
//!
//! The crate is organised bottom-up:
//!
//! * [`persistence`]: array container, sidecars and result tables
//! * [`operators`]: forward/adjoint pairs for multi-coil MRI and parallel-beam CT
//! * [`simdata`]: phantoms and measurement simulation
//! * [`nets`]: U-Net and score network with hand-written backpropagation
//! * [`diffusion`]: schedules, score training, purification
//! * [`metrics`]: PSNR and SSIM
//! * [`dip`]: standard and reference-guided DIP
//! * [`udig`]: the sequential optimise-then-purify reconstruction

pub mod diffusion;
pub mod dip;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nets;
pub mod operators;
pub mod persistence;
pub mod simdata;
pub mod udig;

pub use error::{Error, Result};
pub use image::Image;
