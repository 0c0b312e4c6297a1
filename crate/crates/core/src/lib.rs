//! Multi-modal factorized bilinear pooling at desk scale.
//!
//! A self-contained stack: dense tensors with reverse-mode autodiff,
//! the standard layers (linear, embedding, LSTM, dropout, softmax),
//! MFB/MFH/MLB fusion blocks, co-attention, KL-divergence answer
//! modeling, a deterministic synthetic grid-world VQA task, and an
//! Adam trainer. Core math is generic over [`scalar::Scalar`]; the
//! aliases below pin the f64 instantiation the rest of the crate uses.

pub mod answer;
pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use rng::Rng;

/// f64 tensor, the working type throughout the trainer and CLI.
pub type Tensor = tensor::Tensor<f64>;
/// f64 autodiff graph.
pub type Graph = autodiff::Graph<f64>;
/// f64 graph variable.
pub type Var = autodiff::Var<f64>;
