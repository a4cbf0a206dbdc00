//! Mixture-of-Experts language models whose sparsity level `k` is chosen at
//! inference time.
//!
//! A model is pretrained at a fixed `k_pre`, then fine-tuned while sampling
//! `k` from a set each step. The router keeps `k` experts at full weight and
//! gives the remaining top-`k_pre` candidates a small constant weight, so one
//! checkpoint serves every `k ≤ k_pre`.

pub mod autodiff;
pub mod data;
pub mod eval;
pub mod model;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use model::{Model, ModelConfig, ModelError, RouterNorm};
pub use schedule::SparsitySchedule;
pub use tensor::{Tensor, TensorError};
