//! Few-shot, label-free domain adaptation for contrastive representation
//! learning.
//!
//! A frozen anchor network pretrained on a source domain regularizes a
//! trainable copy adapted to a handful of unlabeled target samples. Each
//! sample is blended `M` times with in-batch partners via CutMix and only the
//! hardest blend contributes to the update. The crate also carries the
//! evaluation suite used to judge the resulting representations.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod loss;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
