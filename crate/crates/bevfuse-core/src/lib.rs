//! Radar–camera bird's-eye-view fusion for 3D object detection, at desk scale.
//!
//! The crate is organized as a pipeline of independently testable stages:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine (NCHW convolutions,
//!   batch norm, activations, reductions) generic over the scalar type.
//! * [`geometry`] — boxes, pinhole cameras, BEV grids, 3D augmentation.
//! * [`radar`] — radar point aggregation and the two BEV radar encoders
//!   (occupancy-style grid map and a learned per-cell feature net).
//! * [`view`] — camera-to-BEV view transforms: a naive lift/splat reference
//!   and a factorized column/ring transform that must agree with it.
//! * [`fusion`] — concat + 1×1 fusion of the two BEV branches and the shared
//!   BEV encoder.
//! * [`head`] — center-heatmap detection head: target rendering, losses,
//!   decoding back to boxes.
//! * [`metrics`] — distance-threshold AP, true-positive error metrics and the
//!   composite detection score, plus report formatting.
//! * [`data`] — on-disk formats (radar sweep files, PPM images, dataset
//!   layout) and the deterministic synthetic scene generator.
//! * [`pipeline`] — model assembly, training and evaluation loops.
//! * [`checks`] — self-check suites (gradients, transform equivalence,
//!   encode/decode round trip, metric fixtures) shared by tests and the CLI.
//!
//! Forward passes run at `f32` by default; every numeric kernel is generic
//! over [`scalar::Scalar`] so the same code paths can be validated at `f64`
//! (see [`checks::gradients`]). Concrete aliases: [`Tensor32`], [`Tensor64`].

pub mod checks;
pub mod data;
pub mod fusion;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod radar;
pub mod scalar;
pub mod tensor;
pub mod view;

pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor used by the forward/training paths.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor used by gradient checks and reference oracles.
pub type Tensor64 = tensor::Tensor<f64>;
