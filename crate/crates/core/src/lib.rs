//! Angular-margin contrastive learning on fused image-text embeddings, with
//! a synthetic referring-segmentation testbed.
//!
//! The crate is layered bottom-up: [`numcore`] vectors and matrices,
//! [`similarity`] functions and their gradients, contrastive [`losses`],
//! a small [`fusion`] model, motion-phrase [`augment`]ation, the [`synth`]
//! scene generator, the [`train`] loop and evaluation [`metrics`].

pub mod augment;
pub mod error;
pub mod fusion;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod similarity;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
