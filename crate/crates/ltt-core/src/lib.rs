//! Generative models of source code over abstract syntax trees.
//!
//! The toolkit parses MiniLang programs into trees, learns log-bilinear
//! tree-traversal (LTT) models and a set of baselines from a corpus,
//! evaluates held-out log probability per token, and samples syntactically
//! valid programs by replaying the generative traversal.

pub mod ast;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod minilang;
pub mod model;
pub mod model_io;
pub mod sample;
pub mod trace;
pub mod train;
pub mod variant;

pub use error::{Error, Result};
