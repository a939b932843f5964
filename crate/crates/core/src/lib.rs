//! Multi-label classification with a joint feature/label transformer whose
//! label tokens carry a ternary evidence state (unknown, negative, positive).
//!
//! Labels that are already known at inference time are injected as state
//! embeddings, so the same trained network serves regular inference, inference
//! with a partially known label set, and inference with auxiliary labels.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod intervene;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
