//! Zero-shot non-rigid shape matching with a diffusion prior over functional maps.
//!
//! The crate covers the whole pipeline: triangle meshes and their Laplacians,
//! spectral bases, functional-map algebra, a small reverse-mode autodiff
//! engine, a score-based denoiser over absolute functional maps, mask
//! distillation with score distillation sampling, and a synthetic generator of
//! registered shape families.

pub mod diffgraph;
pub mod distill;
pub mod error;
pub mod fmap;
pub mod formats;
pub mod mesh;
pub mod sgm;
pub mod spectral;
pub mod synth;

pub use error::{Error, Result};

/// One standard normal draw.
pub(crate) fn randn<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
