//! Score-based generative model over (absolute) functional maps.
//!
//! The denoiser uses the usual preconditioning
//! `D(X; s) = c_skip X + c_out F(c_in X, emb(s))` where `F` is a residual MLP
//! over the flattened matrix and a sinusoidal noise embedding.

mod checkpoint;
mod denoiser;
mod sampler;
mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, SGM_MAGIC, SGM_VERSION};
pub use denoiser::{
    noise_embedding, Denoiser, DenoiserConfig, DiagonalGaussianDenoiser, IdentityDenoiser, NoiseSchedule,
    Preconditioning, SpectralDenoiser,
};
pub use sampler::{sample, sample_batch, sample_trajectory, sigma_grid};
pub use train::{batch_loss, denoising_loss, train_denoiser, TrainLog, TrainOptions};

use nalgebra::DMatrix;

use crate::error::Result;

/// `(D(X; s) - X) / s^2`
pub fn score<D: Denoiser + ?Sized>(denoiser: &D, x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    let d = denoiser.denoise(x, sigma)?;
    Ok((d - x) / (sigma * sigma))
}
