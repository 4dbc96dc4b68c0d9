//! Dual-adapter multimodal transformer over paired time-series/text samples.
//!
//! A frozen randomly-initialized transformer backbone is shared by two
//! adapters (textual-primary and temporal-primary). Each adapter feeds one
//! modality through the backbone as the token sequence and injects the other
//! modality as a pooled embedding added to learnable adaptation tokens, fused
//! into the top layers through zero-initialized gated cross-attention.
//! Training covers supervised classification, unsupervised contrastive
//! representation learning, linear probes, and few-shot label transfer.

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod fd;
pub mod store;
pub mod tape;
pub mod tensor;

pub use error::{DtkError, Result};
pub use store::{Param, ParameterStore};
pub use tape::{Tape, Var};
pub use tensor::{Dtype, Scalar, Tensor};
