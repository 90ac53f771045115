//! Multilayer perceptrons and the AdamW optimizer.

mod adamw;
mod mlp;

pub use adamw::{AdamW, AdamWConfig};
pub use mlp::{Activation, BoundMlp, Layer, Mlp};
