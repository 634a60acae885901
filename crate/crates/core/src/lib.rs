//! Pattern-level sequential recommendation with probabilistic item embeddings.
//!
//! The numeric core (`specfn`, `diff`, `model`) is generic over the scalar type; the
//! aliases below fix it to `f64`, which the pipeline modules use throughout.

pub mod data;
pub mod diff;
pub mod eval;
pub mod model;
pub mod scalar;
pub mod specfn;
pub mod synth;
pub mod train;

pub use scalar::Scalar;

pub type Model = model::Ptsr<f64>;
pub type Tape64 = diff::Tape<f64>;
pub type Params64 = diff::ParamSet<f64>;
pub type Gradients64 = diff::GradientMap<f64>;
