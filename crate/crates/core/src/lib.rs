//! Semi-supervised single-image deraining.
//!
//! A shared recurrent rain-mask learner feeds two adversarial processes: a
//! supervised one on paired synthetic data and an unsupervised, cycle-consistent
//! one on real rainy images. The crate covers data ingestion and toy-rain
//! synthesis, the networks, every loss term, the trainer with checkpoints, and
//! PSNR/SSIM evaluation.

pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use image::ImageTensor;
