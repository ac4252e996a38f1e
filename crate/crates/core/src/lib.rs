//! Deep supervision fine-tuning (DFT) for small decoder-only transformers.
//!
//! The crate trains a toy language model on synthetic parallel data and adds
//! auxiliary losses on intermediate layers: a language-conversion term at a
//! lower layer and an English-thinking term at a middle layer, each either
//! logits-based (early-exit through a frozen output head) or feature-based
//! (cosine alignment of pooled hidden states).

pub mod autodiff;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod model;
pub mod plot;
pub mod supervision;
pub mod syndata;
pub mod trainer;

pub use error::{Error, Result};
