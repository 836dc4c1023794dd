//! Numerics for stochastic integration against cylindrical Lévy processes on
//! finite truncations of separable Hilbert spaces.

pub mod characteristics;
pub mod driver;
pub mod error;
pub mod integrate;
pub mod linalg;
pub mod modular;
pub mod rng;
pub mod stats;

pub use error::{CoreError, Result};
