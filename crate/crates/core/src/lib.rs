pub mod error;
pub mod affine;
pub mod cli;
pub mod config;
pub mod grid;
pub mod heston;
pub mod kernels;
pub mod pricing;
pub mod quadrature;
pub mod riccati;
pub mod simulate;
pub mod special;
pub mod validation;

pub use error::{Error, Result};
pub use grid::TimeGrid;
