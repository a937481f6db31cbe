//! Feynman-Kac perturbations of Levy-type transition kernels.

pub mod bounds_harness;
pub mod duhamel;
pub mod error;
pub mod kernels;
pub mod levy_models;
pub mod measures;
pub mod montecarlo;
pub mod quadrature;
pub mod stable;

pub use error::{FkError, Result};
