//! Sparse channel routing and patch–channel cross-attention for
//! multi-channel vision transformers.
//!
//! Each image channel is tokenized separately. A per-layer router picks the
//! top-k channels for every token; the token then attends only to the tokens
//! of those channels through channel-specific key/value projections. The
//! crate contains the reverse-mode engine, the model, a naive reference
//! implementation for equivalence testing, and an analytic FLOPs model.

pub mod attention;
pub mod checks;
pub mod cost;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
