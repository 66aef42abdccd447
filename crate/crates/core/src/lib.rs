//! Distributed model predictive safety certification for coupled linear
//! networks.

use openblas_src as _;

pub mod bench;
pub mod certifier;
pub mod conic;
pub mod distsolve;
pub mod error;
pub mod linalg;
pub mod netmodel;
pub mod terminal;
pub mod tube;

pub use error::{Error, Result};
