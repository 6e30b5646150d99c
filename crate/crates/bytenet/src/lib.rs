//! Character-level sequence modeling with dilated one-dimensional
//! convolutions.
//!
//! The crate implements an encoder-decoder translation model and a
//! decoder-only language model over characters. Both are resolution
//! preserving: every layer emits one representation column per input
//! position, and the decoder generates by dynamic unfolding, stepping one
//! character at a time past the source length until it emits EOS.
//!
//! Building blocks:
//!
//! - a reverse-mode autodiff tape ([`tape::Tape`]) generic over the scalar
//!   type, so the same model code runs in `f32` for training and `f64` for
//!   gradient verification;
//! - masked (causal) and unmasked dilated convolutions, residual blocks in
//!   two variants (ReLU and multiplicative units), and sub-batch
//!   normalization, which computes batch statistics from an auxiliary
//!   sub-batch so the conditional distribution of the main rows is not
//!   contaminated by their own futures;
//! - input embeddings formed as a bag of character n-grams;
//! - an incremental decoder that reproduces the full forward pass bit for
//!   bit, plus greedy unfolding, temperature sampling, and beam search;
//! - analysis utilities: receptive-field arithmetic and probing, gradient
//!   saliency maps, bits-per-character evaluation, and corpus BLEU.
//!
//! Concrete type aliases for the two supported scalar types are exported at
//! the crate root: [`Tensor32`]/[`Tensor64`] and [`Model32`]/[`Model64`].

pub mod analysis;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod network;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor, used by gradient checks.
pub type Tensor64 = tensor::Tensor<f64>;
/// Training-precision model.
pub type Model32 = network::Model<f32>;
/// Verification-precision model.
pub type Model64 = network::Model<f64>;
