//! Self-distillation for further pre-training, as a numerical lab.
//!
//! The crate has two halves. The linear theory ([`spectral`], [`distill`],
//! [`finetune`], [`bounds`]) computes distillation rounds, gradient-flow
//! fine-tuning and the associated norm and distance bounds in closed form,
//! each paired with an independent brute-force route. The [`mae`] half runs
//! the further-pre-training and self-distillation training loops on a small
//! masked autoencoder with hand-derived reverse-mode gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod bounds;
pub mod distill;
pub mod error;
pub mod finetune;
pub mod mae;
pub mod spectral;

pub use error::{Error, Result};
