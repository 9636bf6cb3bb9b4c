//! Galaxy morphology classification with a gradual-input head.
//!
//! The crate is self-contained: [`tensor`] provides a small reverse-mode
//! autodiff engine, [`spinal`] and [`backbone`] define the network,
//! [`data`] handles images, splits and synthetic galaxies, [`train`] runs
//! optimisation and evaluation, and [`report`] / [`checkpoint`] persist
//! results.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod report;
pub mod spinal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
