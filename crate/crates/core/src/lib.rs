//! Enhanced sequential inference (ESIM), syntactic tree-LSTM inference and
//! their probability-averaged hybrid for natural language inference.
//!
//! Everything is built on a small reverse-mode autodiff tape in [`autodiff`].

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod composition;
pub mod config;
pub mod corpus;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{NliError, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
