// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod autodiff;
pub mod data;
pub mod editing;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod trace;
pub mod train_eval;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
