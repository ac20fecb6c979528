//! Dual-stream deep-supervision segmentation at desk scale: dense f64
//! tensors with tape autodiff, a compact pyramid encoder with detail and
//! semantic decoder streams, uncertainty-weighted multi-signal supervision,
//! synthetic ellipse data, and a training/evaluation harness.

pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod supervision;
pub mod tensor;
pub mod train;
