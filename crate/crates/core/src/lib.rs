//! Recurrent kernel machine cells and the pieces needed to train them.

pub mod cell;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod grad;
pub mod heads;
pub mod kernel;
pub mod ngram;
pub mod parallel;
pub mod train;
pub mod verify;
pub mod wavelet;

pub use error::{Result, RkmError};
