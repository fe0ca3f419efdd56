pub mod cli;
pub mod clt;
pub mod error;
pub mod expr;
pub mod galerkin;
pub mod kernel1d;
pub mod measures;
pub mod quadrature;
pub mod spectral;

pub use error::{Error, Result};
