//! Spatio-temporal mixed-effects regression with PDE regularization.

pub mod covariance;
pub mod data;
pub mod error;
pub mod fem;
pub mod gcv;
pub mod inference;
pub mod linalg;
pub mod mesh;
pub mod penalty;
pub mod simulate;
pub mod solver;
pub mod sparse;
pub mod splines;

pub use error::{Error, Result};
