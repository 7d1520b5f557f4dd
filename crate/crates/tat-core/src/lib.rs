//! Scene-text detector built on a minimal reverse-mode autodiff core.
//!
//! The crate is self-contained: tensor ops with hand-written backward
//! passes, the detector graph, rotated-box geometry, losses, ADADELTA
//! training, dataset loading, evaluation, and a FLOPs analyzer.

pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod geometry;
pub mod graph;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Elem, Tensor};
