//! Arbitrary-resolution image generation from a continuous latent field.
//!
//! The pipeline has two trained halves. A convolutional encoder maps an RGB
//! image to a dense latent field with the same spatial resolution, and a
//! windowed-attention renderer decodes that field at any requested output
//! size by building one token per output coordinate. A separate transformer
//! denoiser, trained with flow matching, generates new latent fields from
//! text prompts; its cost depends only on the latent size, never on the
//! requested output resolution.
//!
//! Training runs in two stages: [`training::stage1`] fits the encoder and
//! renderer (reconstruction plus a semantic distillation term from a frozen
//! teacher), then [`training::stage2`] fits the denoiser on frozen,
//! normalized latents. The [`cli`] module exposes both stages plus
//! generation, reconstruction, and a scaling benchmark as subcommands.
//!
//! Everything is deterministic given a seed: random draws come from named
//! [`rng`] streams, parameter init is a pure function of (seed, name), and
//! checkpoints restore training bit-exactly.

pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod flowmatch;
pub mod geometry;
pub mod guidance;
pub mod image_io;
pub mod params;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
