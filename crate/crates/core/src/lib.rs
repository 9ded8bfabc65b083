//! From-scratch ViTAE / ViTAEv2 vision transformers on a minimal reverse-mode
//! autodiff tensor core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major tensors, the gradient tape, and the neural
//!   primitives (matmul, conv2d, norms, softmax, GELU) everything is built from
//! - [`attention`]: exact multi-head self-attention and non-overlapping local
//!   window attention
//! - [`cells`]: the two building blocks, reduction cells (PRM + attention +
//!   PCM + FFN) and normal cells (attention + grouped-conv PCM + FFN)
//! - [`model`]: isotropic and multi-stage model assembly, presets, parameter
//!   and MAC accounting
//! - [`mim`]: masked-image-modeling pretraining (75% token masking, masked
//!   pixel MSE, 1x1 -> 3x3 kernel inflation)
//! - [`training`]: AdamW with decoupled weight decay, cosine schedule, the
//!   epoch loop
//! - [`analysis`]: attention-distance metric and the model accounting report
//! - [`data`]: MNIST IDX / CIFAR-10 binary readers, augmentation, synthetic
//!   datasets
//! - [`checkpoint`]: bit-exact named-tensor serialization

pub mod analysis;
pub mod attention;
pub mod cells;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod mim;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use attention::{AttentionKind, AttentionStats, AttnScale, MultiHeadAttention, WindowSpec};
pub use cells::{NormalCell, ReductionCell};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};
pub use rng::SplitMix64;
pub use tensor::{ConvSpec, Scalar, Tape, Tensor};
