//! Few-shot retinal OCT classification: dataset manifests, augmentation,
//! attention-augmented classifiers, and evaluation metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod augment;
pub mod balance;
pub mod classifier;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod font;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod ugatit;
pub mod util;

pub use error::{Error, Result};
