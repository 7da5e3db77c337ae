//! Simulation of slow-fast systems driven by a scaled Ornstein-Uhlenbeck
//! process, construction of their Stratonovich-corrected reduced equation,
//! and Monte Carlo diagnostics comparing the two.

pub mod diagnostics;
pub mod error;
pub mod integrators;
pub mod models;
pub mod noise;
pub mod reduction;
pub mod scenario;
pub mod spectral;

pub use error::{Error, Result};
