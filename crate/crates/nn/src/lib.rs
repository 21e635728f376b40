//! Minimal CPU neural-network toolkit: reverse-mode autodiff over `ndarray`
//! f64 tensors, a handful of layers, AdamW, and a binary tensor file format.
//!
//! Everything is deterministic given a seed: initialisation uses ChaCha
//! streams, and no op depends on thread scheduling.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod param;
pub mod serialize;
pub mod var;

pub use layers::{AttentionPool, Conv2d, LayerNorm, Linear, Mlp, MultiHeadAttention};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use param::{derived_rng, seeded_rng, HasParams, Param, ParamId};
pub use var::{backward, concat_cols, concat_rows, im2col, layer_norm, mean_of, Arr, Gradients, Var};
