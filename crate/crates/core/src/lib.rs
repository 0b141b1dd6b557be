//! Numerical toolkit for gradient blow-up between nearly touching
//! inclusions: exponent formulas, sparse solvers, gap and bipolar charts,
//! radial modal ODEs, a 2D finite-volume solver and experiment drivers.

pub mod error;
pub mod experiments;
pub mod fit;
pub mod geometry;
pub mod linalg;
pub mod ode;
pub mod pde2d;
pub mod rates;

pub use error::{Error, Result};
