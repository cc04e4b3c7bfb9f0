pub mod cli;
pub mod data;
pub mod error;
pub mod gmrf;
pub mod graph;
pub mod lgm;
pub mod laplace;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod optim;
pub mod quadrature;
pub mod selection;
pub mod simulate;
pub mod sparse;
#[cfg(test)]
mod testutil;

pub use error::{Result, StjmError};
