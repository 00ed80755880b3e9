//! Identity-preserving contextual distances for image restoration.
//!
//! The crate is organised around a small number of building blocks:
//!
//! * [`tensor`], [`rng`] and [`io`]: the `H×W×C` image carrier, a portable
//!   seeded random stream and 8-bit PNG I/O.
//! * [`pk`]: the sub-image decomposition (block tiles or strided phases) and
//!   its exact inverse.
//! * [`contextual`]: cosine distance matrices, the delta-like softmax kernel,
//!   the sub-image contextual distance and its analytic gradient.
//! * [`degrade`]: a seeded turbulence simulator (Gaussian blur, elastic warp,
//!   additive noise).
//! * [`hpc`]: a toy style-modulated generator that branches into `2^g`
//!   pseudo results per forward pass, with mean and variance maps.
//! * [`objective`]: the reconstruction objective over pseudo-result sets.
//! * [`optimize`]: gradient descent directly on pixels.
//! * [`metrics`]: PSNR, SSIM, cosine identity similarity and top-k accuracy.
//! * [`cli`]: the subcommand front end used by the `spcx` binary.
//!
//! Everything is computed in `f64`, and every random quantity is drawn from a
//! [`rng::SeededRng`], so results are reproducible bit-for-bit given a seed.

pub mod cli;
pub mod contextual;
pub mod degrade;
mod error;
pub mod hpc;
pub mod io;
pub mod metrics;
pub mod objective;
pub mod optimize;
pub mod pk;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
