//! Channel and temporal-wise attention (CTA) over stacks of per-block
//! encoder embeddings, the recurrent baselines it is compared against, and
//! the feature frontend and speaker-independent evaluation harness around
//! them.
//!
//! Layout:
//!
//! * [`tensor`]: dense tensors and the reverse-mode tape every model runs on.
//! * [`features`]: log-mel filterbanks, the `SEQF` tensor file format,
//!   JSON Lines manifests and the synthetic planted-salience corpus.
//! * [`layers`]: bidirectional GRU stacks, multi-head self-attention pooling
//!   and the classifier head.
//! * [`attn_bench`]: timing of CTA against flat global attention.
//! * [`cta`]: channel/temporal attention, the CTA-RNN model and the flat
//!   global-attention reference.
//! * [`fusion`]: single-stream, weighted, early and late fusion baselines.
//! * [`model`]: model configuration and the dispatching [`model::Model`].
//! * [`trainer`]: Adam, the plateau scheduler, UAR, cross-validation,
//!   cross-corpus evaluation and checkpoints.

pub mod attn_bench;
pub mod cta;
pub mod data;
pub mod error;
pub mod features;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod par;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Bound, ParamId, ParamSet};
pub use tensor::{Graph, Mask, Scalar, Tensor, Var};
