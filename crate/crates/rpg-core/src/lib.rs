//! Recurrent parameter generation: a fixed parameter ring from which every
//! convolution and dense kernel of a network is gathered through seeded
//! destructive transforms (index permutation + sign reflection), with full
//! training support, seed-based serialization, and desk-scale verification
//! of the orthogonality behind destructive sharing.

pub mod analysis;
pub mod data;
pub mod detrand;
pub mod error;
pub mod model;
pub mod nn;
pub mod pack;
pub mod par;
pub mod real;
pub mod ring;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;
