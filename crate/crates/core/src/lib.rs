//! Structured Gaussian-process regression on rectilinear and gappy grids with
//! deep product kernels and Kronecker algebra.

pub mod bench;
pub mod commands;
pub mod datagen;
pub mod dense;
pub mod error;
pub mod gappy;
pub mod grid;
pub mod io;
pub mod kernels;
pub mod kronalg;
pub mod linalg;
pub mod training;
pub mod verify;

pub use error::{KgpError, Result};
