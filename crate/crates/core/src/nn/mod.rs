//! Feedforward score networks, reverse-mode differentiation and Adam.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod tape;

pub use adam::{cosine_lr, AdamState};
pub use checkpoint::Checkpoint;
pub use mlp::{time_embedding, Activation, Arch, ParamVars, ScoreNet};
pub use tape::{Grads, Mat, Tape, Var};
