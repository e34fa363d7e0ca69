//! Camera relocalization by pose regression refined against a learned
//! radiance field.

pub mod encoding;
pub mod error;
pub mod eval;
pub mod field;
pub mod image;
pub mod regressor;
pub mod scenes;
pub mod se3;
pub mod train;

pub use error::{Error, Result};
