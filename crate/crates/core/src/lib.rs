//! Sparse masked attention policies for reinforcement learning.
//!
//! Attention policies whose pairwise attention weights are gated by learned
//! stochastic binary masks, with a path-count sparsity regularizer, trained
//! with PPO on procedurally generated gridworlds.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod paths;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Fault, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
