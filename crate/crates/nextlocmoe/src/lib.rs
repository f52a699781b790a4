//! Next-location prediction with a dual-level mixture of experts.
//!
//! The crate implements the full pipeline as a desk-scale, deterministic,
//! CPU-only system: trajectory data handling and synthetic city generation,
//! spatio-temporal embeddings, a causal TCN history encoder, a location
//! semantics MoE that enhances the current spatial embedding, a personalized
//! MoE that replaces the FFN in the upper transformer layers, coordinate
//! regression training with an entropy regularizer, KD-tree candidate
//! retrieval with Hit@k evaluation, and a zero-shot transfer harness.
//!
//! Everything differentiable runs on a small tape-based reverse-mode autodiff
//! engine ([`tape`]) over `f64` matrices so analytic gradients can be checked
//! against central finite differences end to end.

pub mod assets;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod history;
pub mod kdtree;
pub mod location_moe;
pub mod params;
pub mod persona_moe;
pub mod tape;
pub mod text;
pub mod train;

pub use error::{Error, Result};
