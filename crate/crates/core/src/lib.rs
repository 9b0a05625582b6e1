//! Weakly-supervised positional contrastive learning.
//!
//! Contrastive pretraining where positives are gated by a discrete weak
//! label and weighted by proximity of a continuous depth coordinate, plus the
//! surrounding pipeline: a small reverse-mode autodiff engine, encoders, a
//! synthetic volumetric dataset, patient-balanced sampling, a pretraining
//! loop and linear-probe evaluation.

pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod data;
pub mod exec;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod sampling;
pub mod tensor;
pub mod trainer;

pub use error::{Result, WspError};
pub use tensor::Tensor;
