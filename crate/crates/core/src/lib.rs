//! Desk-scale referring video object segmentation lab.
//!
//! * [`tensor`]: `f64` tensors with reverse-mode differentiation.
//! * [`heads`]: dot-product, CondInst, DGC and HCD mask heads.
//! * [`refine`]: temporal-context mask refinement and its frame-local baseline.
//! * [`matching`]: Hungarian assignment, detection/segmentation losses.
//! * [`pipeline`]: toy encoder/decoder model, training and inference.
//! * [`metrics`]: J, F, J&F, mAP, oIoU/mIoU and temporal variance.
//! * [`corpus`]: synthetic referring-video generator and its file format.

pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod refine;
pub mod tensor;

pub use error::{Error, Result};
pub use mask::{Mask, MaskSequence};
pub use params::ParamStore;
pub use tensor::{Gradients, Tensor};
