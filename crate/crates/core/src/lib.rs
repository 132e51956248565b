//! Annotation-shift simulation for lesion patch classification, with
//! single-image GAN augmentation.

pub mod classifier;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod imageops;
pub mod metrics;
pub mod seeding;
pub mod singan;

pub use error::{Error, Result};
