//! A multi-dataset object detector that conditions learnable object queries on
//! frozen language embeddings of each dataset's category prompt.
//!
//! * [`taxonomy`] — prompts, tokenization, frozen embeddings, target matrices.
//! * [`queryhub`] — query adaptation, self-interaction, dynamic convolution.
//! * [`detector`] — backbone, query-based proposals, decoder stages, scoring.
//! * [`losses`] — set matching, region-word alignment loss, box losses.
//! * [`data`] — COCO-format IO, synthetic conflicting datasets, sampling.
//! * [`engine`] — configuration, training, evaluation, ablations.

pub mod boxes;
pub mod data;
pub mod detector;
pub mod engine;
pub mod error;
pub mod losses;
pub mod nn;
pub mod queryhub;
pub mod taxonomy;

pub use error::{Error, Result};
