//! Class-independent object proposals from binarized horizontal high-frequency features.

pub mod annotations;
pub mod binmodel;
pub mod error;
pub mod evalkit;
pub mod geom;
pub mod hlfeat;
pub mod imgpyr;
pub mod merger;
pub mod proposer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
