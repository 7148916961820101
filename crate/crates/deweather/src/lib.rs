//! Pseudo-label guided image de-weathering at desk scale.
//!
//! The crate synthesizes time-multiplexed scenes with controllable weather
//! and label inconsistencies, trains a multi-frame pseudo-label constructor
//! (with cross-frame patch matching and graph-attention aggregation), and
//! trains a single-frame de-weathering network under joint pseudo/original
//! label supervision with feature distillation. Everything runs on the CPU
//! in deterministic f64.

pub mod config;
pub mod data_synth;
pub mod error;
pub mod eval;
pub mod fcm;
pub mod graph_agg;
pub mod losses;
pub mod models;
pub mod patchops;
pub mod plot;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
