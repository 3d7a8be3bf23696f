use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::denoiser::{Denoiser, DenoiserConfig, NoiseSchedule, Preconditioning, SpectralDenoiser};
use crate::diffgraph::{cosine_lr, AdamState, Tape};
use crate::error::{Error, Result};
use crate::synth::MapDataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 1000,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean preconditioned loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

fn flat_rows(data: &MapDataset) -> Vec<Vec<f64>> {
    data.maps().iter().map(|m| m.transpose().as_slice().to_vec()).collect()
}

/// Fits a fresh denoiser to `data` by minimizing
/// `E |D(x + n; s) - x|^2 / c_out(s)^2` with `ln s ~ Normal(p_mean, p_std^2)`.
pub fn train_denoiser(
    data: &MapDataset,
    config: &DenoiserConfig,
    schedule: &NoiseSchedule,
    opts: &TrainOptions,
) -> Result<(SpectralDenoiser, TrainLog)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.order() != config.n {
        return Err(Error::shape(format!(
            "dataset maps are {0}x{0}, denoiser expects {1}x{1}",
            data.order(),
            config.n
        )));
    }
    if opts.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = SpectralDenoiser::init(config.clone(), schedule.clone(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let rows = flat_rows(data);
    let nn = config.n * config.n;
    let batches_per_epoch = rows.len().div_ceil(opts.batch_size);
    let total = opts.epochs * batches_per_epoch;
    let mut adam = AdamState::new(opts.lr, &model.params().shapes());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut step = 0;
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let mut sigmas = Vec::with_capacity(chunk.len());
            let mut noise = Vec::with_capacity(chunk.len());
            for _ in chunk {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigmas.push(
                    (schedule.p_mean + schedule.p_std * z)
                        .exp()
                        .clamp(schedule.sigma_min, schedule.sigma_max),
                );
                noise.push((0..nn).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>());
            }
            let maps: Vec<&[f64]> = chunk.iter().map(|&i| rows[i].as_slice()).collect();
            let (loss, grads) = batch_loss(&model, &maps, &sigmas, &noise)?;
            epoch_sum += loss * chunk.len() as f64;
            adam.lr = cosine_lr(opts.lr, step, total);
            adam.step(&mut model.params_mut().tensors_mut(), &grads)?;
            step += 1;
        }
        let mean = epoch_sum / rows.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at epoch {}",
                log.epoch_losses.len()
            )));
        }
        log.epoch_losses.push(mean);
    }
    Ok((model, log))
}

/// Preconditioned loss `mean |F(c_in x_n, s) - (x - c_skip x_n) / c_out|^2`
/// of one batch, with `x_n = x + s * eps`, and its parameter gradients.
/// Maps are row-major flattened.
pub fn batch_loss(
    model: &SpectralDenoiser,
    maps: &[&[f64]],
    sigmas: &[f64],
    eps: &[Vec<f64>],
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let nn = model.config().n * model.config().n;
    let b = maps.len();
    if b == 0 || sigmas.len() != b || eps.len() != b {
        return Err(Error::shape(format!(
            "batch of {b} maps with {} noise levels and {} noise draws",
            sigmas.len(),
            eps.len()
        )));
    }
    if maps.iter().any(|v| v.len() != nn) || eps.iter().any(|v| v.len() != nn) {
        return Err(Error::shape(format!("batch rows must have {nn} entries")));
    }
    let mut noisy = Vec::with_capacity(b);
    let mut target = DMatrix::zeros(b, nn);
    for r in 0..b {
        let s = sigmas[r];
        let p = Preconditioning::new(s, model.config().s_data);
        let xn: Vec<f64> = maps[r].iter().zip(&eps[r]).map(|(&v, &e)| v + s * e).collect();
        for j in 0..nn {
            target[(r, j)] = (maps[r][j] - p.c_skip * xn[j]) / p.c_out;
        }
        noisy.push(xn);
    }
    let refs: Vec<&[f64]> = noisy.iter().map(|v| v.as_slice()).collect();
    let input = model.input_rows(&refs, sigmas);
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let out = bound.forward(tape.constant(input))?;
    let loss = out.add_const(&(-&target))?.frobenius_sq().scale(1.0 / (b * nn) as f64);
    let g = tape.backward(loss)?;
    Ok((loss.scalar(), bound.gradients(&g)))
}

/// Preconditioned denoising loss at a fixed noise level, averaged over
/// `draws` noise samples per map.
pub fn denoising_loss<D: Denoiser + ?Sized>(
    denoiser: &D,
    data: &MapDataset,
    sigma: f64,
    s_data: f64,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Preconditioning::new(sigma, s_data);
    let mut total = 0.0;
    let mut count = 0usize;
    for _ in 0..draws {
        let noisy: Vec<DMatrix<f64>> = data
            .maps()
            .iter()
            .map(|m| m.map(|v| v + sigma * crate::randn(&mut rng)))
            .collect::<Vec<_>>();
        let den = denoiser.denoise_batch(&noisy, sigma)?;
        for (d, x) in den.iter().zip(data.maps()) {
            total += (d - x).norm_squared() / (p.c_out * p.c_out);
            count += x.len();
        }
    }
    Ok(total / count as f64)
}
