//! Micro-augmentation and consistency regularization for weakly-supervised
//! temporal action localization.
//!
//! Everything here is `no_std` + `alloc`; file formats and the command line
//! live in the `c3bn` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod infer;
pub mod losses;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor2D;
