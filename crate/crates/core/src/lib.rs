//! Text-to-image synthesis with a dynamic key-value memory, built on a small
//! reverse-mode autodiff core.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, the autodiff tape and the compute kernels
//! * [`text`]: vocabulary, bidirectional GRU encoder, conditioning augmentation
//! * [`memory`]: memory writing, key addressing, value reading and response
//! * [`gan`]: generator stages, spectral-normalised discriminators
//! * [`objectives`]: adversarial, KL and image-text matching losses
//! * [`metrics`]: Inception Score, FID and R-precision
//! * [`data`], [`optim`], [`checkpoint`], [`train`] and friends: the harness
//!
//! With the default `parallel` feature the heavy kernels run on rayon; the
//! results are bit-identical to the sequential build.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod gan;
pub mod gradcheck;
pub mod image_io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Scalar, Tensor, Var};
