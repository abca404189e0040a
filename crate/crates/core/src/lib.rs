//! Train small image classifiers under standard, adversarial and
//! clustering-regularized adversarial regimes, and probe their linearized
//! sub-networks for the implicit input→logit weight matrix, class
//! correlations and class hierarchy.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod export;
pub mod io;
pub mod kernels;
pub mod network;
pub mod probe;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
