pub mod acoustic;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod recognizer;
pub mod rng;
pub mod runtime;
pub mod sweep;
pub mod train;
pub mod vocoder;

pub use error::{Error, Result};
