//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records forward ops on [`Tensor`] values and replays them in
//! reverse to produce parameter gradients. Parameters live in a [`ParamSet`]
//! outside the tape, so a fresh tape is built per step and dropped afterwards.
//! [`Sequential`] stacks the layer inventory needed by the convolutional
//! encoders (2-D and 1-D convolution, batch norm, max pooling, linear, ReLU,
//! L2 normalisation).

pub mod checkpoint;
mod error;
pub mod layers;
pub mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor, RngState};
pub use error::{NnError, Result};
pub use layers::{LayerSpec, Mode, Sequential};
pub use optim::{cosine_lr, Sgd};
pub use params::{ParamId, ParamSet};
pub use real::Real;
pub use tape::{BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
