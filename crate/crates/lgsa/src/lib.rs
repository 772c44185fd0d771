//! Dense object counting on a stacked two-hourglass keypoint detector with
//! locally grouped, scale-guided attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: f64 tensor algebra with reverse-mode differentiation
//! - [`targets`]: annotation to heatmap / size / offset map conversion
//! - [`loss`]: focal, size, and offset losses and their weighted total
//! - [`net`]: the hourglass backbone, pixel attention, and attention fusion
//! - [`decode`], [`metrics`]: detection decoding and MAE / RMSE / AP
//! - [`synth`], [`data`]: deterministic synthetic scenes and dataset I/O
//! - [`train`], [`evaluate`], [`viz`]: the operator-facing pipeline
//! - [`check`]: finite-difference gradient checks used by `selftest`

pub mod check;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
