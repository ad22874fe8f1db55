//! Core library for the controllable-reasoning data pipeline: record
//! schemas, the reasoning-marker protocol, script-restricted decoding,
//! corpus filters, LLM backends, synthesis stages, training math, a toy
//! trainer and the evaluation harness.

pub mod backend;
pub mod eval;
pub mod filters;
pub mod guard;
pub mod marker;
pub mod records;
pub mod synth;
pub mod toy;
pub mod train_math;
