//! Metric-learning toolkit built around a shared-weight convolutional
//! embedding network. Images are embedded into a fixed-dimension vector
//! space; training optimizes distance comparisons, either over triplets
//! (reference / same-class / other-class) with a softmax-ratio MSE loss, or
//! over pairs with a contrastive loss. Evaluation covers comparison accuracy,
//! a linear classification head on frozen embeddings, KNN, sparsity, and a 2D
//! projection for inspection.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod idx;
pub mod net;
pub mod ops;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod siamese;
pub mod tensor;
pub mod train;
pub mod triplet;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
