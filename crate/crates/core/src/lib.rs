//! Incremental active semi-supervised learning engine.
//!
//! Collaborative batch selection (uncertainty, diversity, confidence), a
//! bin-cycle incremental training loop with oracle fallback, detection
//! evaluation, and a three-level hierarchical class model, all driven by a
//! from-scratch linear reference detector.

pub mod active_loop;
pub mod data;
pub mod detector;
pub mod eval;
pub mod error;
pub mod model;
pub mod optim;
pub mod sampling;

pub use error::{Error, Result};
