pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod harness;
pub mod error;
pub mod junction;
pub mod models;
pub mod nn;
pub mod par;
pub mod pca;
pub mod replay;
pub mod routing;
pub mod tables;
pub mod training;

pub use error::{Error, Result};

/// The single RNG type used for every stochastic choice, so runs are
/// reproducible from a seed across platforms.
pub type SimRng = rand_chacha::ChaCha8Rng;
