//! Channel-wise vector quantization (CVQ), next-channel autoregressive
//! generation (CAR), and a patch-wise VQ baseline, built on a small
//! reverse-mode autodiff tensor kernel.
//!
//! A latent grid `Z[h, w, c]` can be quantized two ways:
//!
//! * **patch-wise**: each of the `h*w` spatial vectors (length `c`) is
//!   replaced by its nearest codeword, giving `h*w` tokens;
//! * **channel-wise**: each of the `c` channel maps (an `h*w` matrix,
//!   flattened row-major) is replaced by its nearest codeword, giving `c`
//!   tokens.
//!
//! Nested channel dropout during tokenizer training orders the channels
//! coarse-to-fine, and the CAR transformer predicts channel tokens one after
//! another.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod car;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nested;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod quantizer;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
