//! Anchor-masked RPN for single-target detection in video.
//!
//! The crate is split along the data flow of the two-stage detector:
//!
//! * [`tensor`] / [`conv`] / [`nn`] — a minimal f64 operator set (dense
//!   tensors, 2-D/3-D convolution, ReLU, per-pixel softmax, max pooling,
//!   SGD) with hand-derived backward passes.
//! * [`geometry`] — axis-aligned box algebra: anchor grids, IoU, box
//!   delta encode/decode, smooth-L1, NMS.
//! * [`heatmap`] — IoU heat maps, binary anchor masks, mask fusion, and
//!   feature gating.
//! * [`rpn`] — the per-anchor scoring/regression head, anchor labeling
//!   with 3:1 negative sampling, and its classification/regression losses.
//! * [`masknet`] — the stage-1 network that predicts the next frame's
//!   anchor mask from the last three IoU heat maps (3-D conv front end).
//! * [`backbone`] — a small stride-16 feature extractor.
//! * [`pipeline`] — the per-frame loop, both training loops, and the
//!   masked-vs-plain evaluation harness.
//! * [`image`] / [`synth`] / [`vot`] — rasters, synthetic sequence
//!   generation, and VOT ground-truth parsing.
//! * [`checkpoint`] — the versioned binary parameter container.
//!
//! Everything is `f64`, single-threaded, and deterministic: identical
//! seeds and inputs produce bit-identical outputs. The crate is
//! `no_std`-compatible (requires `alloc`); float math goes through
//! `libm` so results do not depend on the platform's libm.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod geometry;
pub mod heatmap;
pub mod image;
pub mod masknet;
pub mod nn;
pub mod pipeline;
pub mod rpn;
pub mod synth;
pub mod tensor;
pub mod vot;

pub use error::{Error, Result};
pub use tensor::Tensor;
