pub mod dsp;
pub mod nn;
pub mod beat;
pub mod checkpoint;
pub mod cond;
pub mod vq;
pub mod error;
pub mod lm;

pub use error::{Error, Result};
