//! Differentiable search, training and receptive-field analysis of
//! pooling-based attention modules.

pub mod arfam;
pub mod autodiff;
pub mod candidates;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod init;
pub mod model;
pub mod rng;
pub mod rf;
pub mod search;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor};
