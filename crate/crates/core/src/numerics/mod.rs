//! Dense `f64` tensors, a reverse-mode autodiff tape and the Adam optimizer.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{conv_out_len, AttentionSpec, Graph, Var};
pub use kernels::{cosine_similarity, cross_entropy, gelu, kl_divergence, layer_norm, matmul, softmax};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

pub mod gradcheck;
