//! Variational spatial attention with anchor quantization.
//!
//! A small CNN backbone produces a feature map `f`. An attention head
//! predicts a per-cell Gaussian over attention scores, a sample is snapped
//! to learnable scalar anchors, and the quantized map multiplies `f` before
//! a variational encoder and a classifier decoder. Training minimizes the
//! cross-entropy of the decoder under sampled latents plus a KL penalty
//! toward a standard normal prior and the anchor quantization/commitment
//! terms.
//!
//! The crate carries its own reverse-mode autodiff ([`tape`]) and the data
//! plumbing needed to train, evaluate, and score attention consistency
//! under spatial and frequency-domain input modifications.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod interp;
pub mod kernels;
pub mod model;
pub mod noise;
pub mod objective;
pub mod optim;
pub mod quantizer;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{AibError, Result};
pub use gaussian::{kl_to_standard_normal, reparam_sample, DiagonalGaussian};
pub use model::{AibModel, ConvBlock, ModelConfig};
pub use noise::{standard_normal_source, NoiseDraw, NoiseSource, StreamId};
pub use objective::{compute_loss, LossBreakdown};
pub use quantizer::{init_anchors, quantize, AnchorSet, AttentionMaps};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
