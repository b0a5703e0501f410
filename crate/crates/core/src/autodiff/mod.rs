//! Dense reverse-mode differentiation, MLPs and Adam.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod tape;

pub use adam::AdamState;
pub use mlp::{Layer, MlpParams, MlpVars};
pub use tape::{Gradients, Tape, Var};
