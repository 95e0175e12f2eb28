//! A desk-scale denoising diffusion laboratory.
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod io;
pub mod metrics;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod schedule;
pub mod toynet;
pub mod training;
pub use error::{Error, Result};
