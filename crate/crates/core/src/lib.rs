//! Simulation workbench for safe-error fault attacks on 8-bit quantized
//! neural networks: integer inference, bit-set/bit-reset fault injection,
//! parameter-bit recovery, attack-input crafting, constrained substitute
//! training and evaluation.

pub mod arch;
pub mod crafter;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fault;
pub mod io;
pub mod qtensor;
pub mod sea;
pub mod train;

pub use arch::{Arch, LayerSpec};
pub use engine::{infer, random_model, PredictionVector, QLayer, QuantModel};
pub use error::{Error, Result};
pub use fault::{apply_fault, faulted_infer, FaultSpec, Polarity};
pub use qtensor::QTensor;
