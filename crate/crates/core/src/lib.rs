//! Wavelet-domain low-light image enhancement with selective state-space
//! sequence mixing.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense channels-last arrays plus the numeric kernels
//!   (convolution, layer norm, activations, softmax, matmul) and their
//!   vector-Jacobian products.
//! * [`wavelet`]: orthonormal 2D Haar analysis/synthesis.
//! * [`ssm`]: zero-order-hold discretization and the selective scan, both as
//!   a sequential recurrence and as a chunked Blelloch scan.
//! * [`autodiff`]: a small reverse-mode tape over the kernels above, AdamW,
//!   L1 loss and a finite-difference checker.
//! * [`layers`]: convolution and layer-norm layers with named parameters.
//! * [`scan2d`], [`lfss`], [`hfe`]: the network blocks.
//! * [`network`]: model assembly, forward pass and checkpoints.
//! * [`metrics`], [`io`], [`analysis`], [`train`], [`gradcheck`]: the
//!   instruments behind the command-line tool.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod hfe;
pub mod io;
pub mod layers;
pub mod lfss;
pub mod metrics;
pub mod network;
pub mod real;
pub mod scan2d;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod wavelet;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
