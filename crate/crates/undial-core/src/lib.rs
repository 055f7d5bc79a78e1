//! Desk-scale unlearning laboratory.
//!
//! A self-contained tiny autoregressive transformer plus the machinery to
//! memorize synthetic corpora, unlearn targeted sequences via adjusted-logit
//! self-distillation (and the standard baselines: gradient ascent, negative
//! preference optimization, decode-time uniform interpolation, task
//! arithmetic, contrastive decoding), and measure the memorization/utility
//! trade-off.

pub mod aux;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod gradcheck;
pub mod harness;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
