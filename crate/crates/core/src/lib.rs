//! Sequence-to-sequence Transformer with layer-wise representation fusion.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with a reverse-mode tape.
//! * [`attention`]: scaled dot-product and multi-head attention, masks.
//! * [`model`]: the encoder-decoder stack and its forward sessions.
//! * [`fusion`]: fuse-attention over previous layer outputs and ablations.
//! * [`training`]: loss, Adam with warmup, greedy decoding, checkpoints.
//! * [`vocab`]: token inventories with the special ids.
//! * [`compgen`]: the synthetic compositional benchmark and its metrics.
//! * [`exec`]: data-parallel helpers (rayon behind the `parallel` feature).

pub mod attention;
pub mod compgen;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use fusion::{FusionMode, LrfVariant, Side, Sides};
pub use model::{ModelConfig, Seq2Seq};
pub use tensor::{Tape, Tensor, Var};
