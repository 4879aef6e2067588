//! Joint demosaicing and denoising with a generative adversarial network.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff graph with the
//!   handful of ops the networks need (conv, batch norm, pixel shuffle, ...).
//! * [`cfa`]: Bayer mosaic sampling, noise synthesis, 4-channel packing and
//!   dihedral augmentation.
//! * [`models`]: generator and discriminator construction and forward passes.
//! * [`losses`]: MSE, perceptual, adversarial and discriminator objectives.
//! * [`training`]: Adam and the alternating adversarial training loop.
//! * [`metrics`]: PSNR, CPSNR, SSIM and per-dataset reports.
//! * [`io`]: PNG, checkpoint and config serialization plus the CLI commands.

pub mod cfa;
pub mod cli;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
