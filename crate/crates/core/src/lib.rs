//! Training engine for neural networks that grow in width.

pub mod binio;
pub mod continual;
pub mod data;
pub mod error;
pub mod growth;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
