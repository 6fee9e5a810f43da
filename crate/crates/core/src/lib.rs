//! Valence/arousal regression from multi-channel physiological signals.
//!
//! The model pools an 8-channel signal into a three-level pyramid, encodes
//! each level with a transformer encoder and a random-feature map in
//! parallel, fuses the per-level summaries by concatenation and regresses
//! the two affect scores with a small fully-connected head. Everything is
//! built on the float64 autodiff graph in [`tensor`], so the whole model is
//! gradient-checkable against finite differences.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{GradientMap, Graph, NodeId, Tensor};
