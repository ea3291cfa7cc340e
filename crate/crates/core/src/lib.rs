//! Effective open-system dynamics of quantum systems under static Hamiltonian disorder.

pub mod analytic;
pub mod cli;
pub mod config;
pub mod distributions;
pub mod ensembles;
pub mod error;
pub mod extraction;
pub mod io;
pub mod numerics;
pub mod operators;
pub mod propagation;
pub mod rng;

pub use error::{Error, Result};
