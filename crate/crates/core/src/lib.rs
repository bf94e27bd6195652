#![allow(clippy::needless_range_loop)]

//! Learning from crowds with common and individual annotation noise.

pub mod analysis;
pub mod baselines;
pub mod classifier;
pub mod conal;
pub mod data;
pub mod em;
pub mod error;
pub mod experiment;
pub mod methods;
pub mod numerics;
pub mod optim;
pub mod synth;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
