//! File formats, runs and command-line front end around `smrnet-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use config::RunConfig;
pub use error::{Error, Result};

/// Parallelism cap from `SMRNET_THREADS`, default 1. Every run is currently
/// serial, so any valid value gives the same bits.
pub fn threads() -> Result<usize> {
    match std::env::var("SMRNET_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Usage(format!("SMRNET_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}
