//! Compact convolution engine built around hierarchical group convolution (HGC).
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense NCHW tensors, convolution/normalization kernels with
//!   explicit backward passes, a small reverse-mode tape and a finite-difference
//!   gradient checker.
//! - [`hgc`]: the hierarchical group convolution recurrence, its parameter
//!   count and compression ratio, and the standard group convolution baseline.
//! - [`blocks`]: the HGC module, the SGC ablation module, the dense bottleneck
//!   and the squeeze-and-excitation gate.
//! - [`net`]: declarative network specs, densely connected HGCNet graphs and
//!   the static parameter/FLOP analyzer.
//! - [`train`]: SGD with Nesterov momentum, cosine learning-rate schedule,
//!   CIFAR-style augmentation and the train/eval loops.
//! - [`data`]: CIFAR binary loading, synthetic datasets and checkpoints.
//!
//! All heavy kernels parallelize over the batch dimension when the `parallel`
//! feature is enabled. Reductions across the batch are always performed in
//! sample order, so results are bit-identical regardless of thread count.

pub mod blocks;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod hgc;
pub mod net;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape4, Tensor};
