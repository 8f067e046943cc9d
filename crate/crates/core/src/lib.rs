//! Masked-autoencoder representation learning for multi-channel microscopy.
//!
//! The crate covers image preprocessing and a synthetic plate generator
//! ([`data`]), patch tokens and masks ([`patch`]), a small reverse-mode
//! autodiff engine ([`nn`]), ViT encoders/decoders ([`vit`]), the standard
//! and channel-agnostic MAEs, the Fourier reconstruction loss, the training
//! loop and checkpoints.

pub mod ca_mae;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fourier;
pub mod mae;
pub mod nn;
pub mod patch;
pub mod seed;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
