//! Multi-stage image deraining guided by dynamically predicted point spread functions.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod psf;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
