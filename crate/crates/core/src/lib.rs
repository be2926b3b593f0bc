pub mod audio;
pub mod baselines;
pub mod coil;
pub mod error;
pub mod fft;
pub mod fusion;
pub mod metrics;
pub mod nufft;
pub mod phantom;
pub mod policy;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
