pub mod bbc;
pub mod codec;
pub mod cusmoe;
pub mod eval;
pub mod flowformer;
pub mod config;
pub mod error;
pub mod nn;
pub mod rng;
pub mod score;
pub mod synth;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
