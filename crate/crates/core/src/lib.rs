//! Sparse mixture-of-experts transformer mechanics at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`gradcheck`]: dense `f64` numerics, reverse-mode
//!   gradients and a central-difference oracle.
//! - [`geometry`]: per-pixel world-coordinate lifting, sinusoidal 3D
//!   encoding and frame sampling.
//! - [`moe`]: router, gated experts, top-k mixing, load-balancing loss,
//!   dense-to-MoE upcycling and layer placement.
//! - [`synergy`]: synergy tokens, alignment projectors and the
//!   distillation objective.
//! - [`model`], [`train`], [`data`]: the toy transformer, staged training
//!   with freeze masks, and synthetic data.
//! - [`csqa`]: deterministic cross-view QA generation from scene-graph pairs.

pub mod csqa;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod gradsuite;
pub mod model;
pub mod moe;
pub mod params;
pub mod rng;
pub mod synergy;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::Params;
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
