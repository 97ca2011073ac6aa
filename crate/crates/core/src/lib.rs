//! Heterogeneous-conditioned molecular generation: a SELFIES codec, an omics
//! β-VAE, a masked-language text encoder, an embedding-diffusion denoiser
//! conditioned on both, and the evaluation metrics used to judge its output.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod omics;
pub mod pipeline;
pub mod selfies;
pub mod text;
pub mod util;

pub use error::{Error, Result};
