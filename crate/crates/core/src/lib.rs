//! Block-wise binary cross-entropy supervision and dual feature modulation
//! for segmenting small, camouflaged objects, on a self-contained
//! reverse-mode tensor engine.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: NCHW tensors and a tape-based autodiff [`Graph`].
//! - [`label`]: ground-truth masks and block label assignment.
//! - [`loss`]: block-wise BCE, point-wise CE and reweighted CE.
//! - [`fbnet`]: the spatial/channel sensor block with its auxiliary head.
//! - [`backbone`]: a small dilated FCN with injectable blocks.
//! - [`data`]: the synthetic camouflage benchmark and PPM/PGM I/O.
//! - [`metrics`]: mIoU, foreground mIoU and the gradient dilution probe.
//! - [`train`]: SGD, augmentation and evaluation.
//! - [`gradcheck`], [`ablation`], [`visualize`]: verification and inspection.

// `!(x > 0)` comparisons deliberately reject NaN.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::field_reassign_with_default
)]

pub mod ablation;
pub mod backbone;
pub mod cli;
pub mod data;
mod error;
pub mod fbnet;
pub mod gradcheck;
pub mod label;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod tensor;
pub mod train;
pub mod visualize;

pub use backbone::{Model, ModelConfig};
pub use error::{Error, Result};
pub use fbnet::{BlockVariant, FbnetBlock, Stage};
pub use label::{ClassScheme, LabelMask, IGNORE};
pub use tensor::{Graph, Tensor, Var};
