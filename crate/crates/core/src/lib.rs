//! Retrieval-augmented open-domain QA with embedding-level query
//! refinement, exploratory-embedding injection and entropy-based answer
//! selection.

pub mod backend;
pub mod dense;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod gate;
mod io_util;
pub mod lexical;
pub mod pipeline;
pub mod prompt;
pub mod refine;
pub mod select;
pub mod synth;
pub mod text;
pub mod util;

pub use error::{Error, Result};
