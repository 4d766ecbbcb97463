//! Prototype-based multimodal token summarization and censored-survival risk
//! prediction.
//!
//! The pipeline summarizes a slide's variable-length set of patch embeddings
//! against a fixed bank of morphological prototypes (GMM-EM, entropic OT, or
//! hard clustering), tokenizes a bulk expression vector into pathway tokens
//! through binary membership masks, fuses the two token sets with Transformer
//! attention or OT cross-alignment, and trains a linear Cox risk head on the
//! resulting patient embeddings. All stochastic steps are explicitly seeded
//! and all reductions run in fixed order, so identical configurations produce
//! byte-identical outputs.

pub mod aggregation;
pub mod error;
pub mod fusion;
pub mod io;
pub mod numerics;
pub mod oracles;
pub mod pathways;
pub mod pipeline;
pub mod prototypes;
pub mod sinkhorn;
pub mod survival;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
