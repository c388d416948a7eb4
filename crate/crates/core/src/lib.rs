//! Progressive distillation of a 2D denoising prior into a dense voxel radiance field.

pub mod error;
pub mod diffusion;
pub mod distill;
pub mod field;
pub mod harness;
pub mod imaging;
pub mod priors;
pub mod scene;
pub mod seeding;

pub use error::{Error, Result};
