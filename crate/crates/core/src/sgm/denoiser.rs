use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Activation, MlpParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Side length of the square maps.
    pub n: usize,
    pub widths: Vec<usize>,
    pub emb_dim: usize,
    pub residual: bool,
    pub activation: Activation,
    pub s_data: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n: 30,
            widths: vec![256, 256, 256],
            emb_dim: 32,
            residual: true,
            activation: Activation::Gelu,
            s_data: 0.25,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "denoiser needs n >= 1 and nonempty positive widths, got n={} widths={:?}",
                self.n, self.widths
            )));
        }
        if self.emb_dim % 2 != 0 || self.emb_dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding dimension must be even and positive".into(),
            ));
        }
        if !(self.s_data > 0.0) {
            return Err(Error::InvalidArgument("s_data must be positive".into()));
        }
        Ok(())
    }

    /// Layer widths of the inner network including input and output.
    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.n * self.n + self.emb_dim];
        w.extend(&self.widths);
        w.push(self.n * self.n);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            sigma_min: 0.002,
            sigma_max: 3.0,
            p_mean: -1.2,
            p_std: 1.2,
            steps: 64,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.p_std > 0.0) || self.steps == 0 {
            return Err(Error::InvalidArgument("p_std and steps must be positive".into()));
        }
        Ok(())
    }

    pub fn check_sigma(&self, sigma: f64) -> Result<()> {
        if !(sigma >= self.sigma_min && sigma <= self.sigma_max) {
            return Err(Error::SigmaOutOfRange {
                sigma,
                min: self.sigma_min,
                max: self.sigma_max,
            });
        }
        Ok(())
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Preconditioning {
    pub c_in: f64,
    pub c_skip: f64,
    pub c_out: f64,
    pub c_noise: f64,
}

impl Preconditioning {
    pub fn new(sigma: f64, s_data: f64) -> Self {
        let v = sigma * sigma + s_data * s_data;
        Preconditioning {
            c_in: 1.0 / v.sqrt(),
            c_skip: s_data * s_data / v,
            c_out: sigma * s_data / v.sqrt(),
            c_noise: sigma.ln() / 4.0,
        }
    }
}

/// Sinusoidal features of `c_noise` with frequencies spaced geometrically in
/// `[1, 100]`.
pub fn noise_embedding(c_noise: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let f = if half > 1 {
            100f64.powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out.push((f * c_noise).cos());
        out.push((f * c_noise).sin());
    }
    out
}

/// Anything that maps a noisy matrix to an estimate of the clean one.
pub trait Denoiser {
    fn denoise(&self, x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>>;

    /// Denoises several matrices at the same noise level.
    fn denoise_batch(&self, xs: &[DMatrix<f64>], sigma: f64) -> Result<Vec<DMatrix<f64>>> {
        xs.iter().map(|x| self.denoise(x, sigma)).collect()
    }

    /// Matrix order the denoiser accepts, if fixed.
    fn order(&self) -> Option<usize> {
        None
    }

    /// Noise levels the denoiser was trained for, if limited.
    fn sigma_range(&self) -> Option<(f64, f64)> {
        None
    }
}

/// `D(X; s) = X`
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn denoise(&self, x: &DMatrix<f64>, _sigma: f64) -> Result<DMatrix<f64>> {
        Ok(x.clone())
    }
}

/// Exact posterior mean for data with independent entries
/// `X_ij ~ Normal(mean_ij, var_ij)`.
#[derive(Debug, Clone)]
pub struct DiagonalGaussianDenoiser {
    pub mean: DMatrix<f64>,
    pub variance: DMatrix<f64>,
}

impl DiagonalGaussianDenoiser {
    pub fn centered(variance: DMatrix<f64>) -> Self {
        let (r, c) = variance.shape();
        DiagonalGaussianDenoiser {
            mean: DMatrix::zeros(r, c),
            variance,
        }
    }
}

impl Denoiser for DiagonalGaussianDenoiser {
    fn denoise(&self, x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
        if x.shape() != self.variance.shape() {
            return Err(Error::shape("gaussian denoiser input shape"));
        }
        let s2 = sigma * sigma;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let v = self.variance[(i, j)];
            let m = self.mean[(i, j)];
            m + v * (x[(i, j)] - m) / (v + s2)
        }))
    }
}

/// Learned denoiser over `n x n` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDenoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: MlpParams,
}

impl SpectralDenoiser {
    /// All weights zero, so `D(X; s) = c_skip X`.
    pub fn zeros(config: DenoiserConfig, schedule: NoiseSchedule) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let params = MlpParams::zeros(&config.layer_widths(), config.activation, config.residual)?;
        Ok(SpectralDenoiser {
            config,
            schedule,
            params,
        })
    }

    /// Random hidden layers with a zero output layer.
    pub fn init(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MlpParams::lecun(
            &config.layer_widths(),
            config.activation,
            config.residual,
            true,
            &mut rng,
        )?;
        Ok(SpectralDenoiser {
            config,
            schedule,
            params,
        })
    }

    pub fn from_parts(config: DenoiserConfig, schedule: NoiseSchedule, params: MlpParams) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if params.widths() != config.layer_widths().as_slice() {
            return Err(Error::shape("parameter widths do not match the configuration"));
        }
        Ok(SpectralDenoiser {
            config,
            schedule,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    /// Network input rows `[c_in x_flat | emb]` for samples with per-row noise levels.
    pub(crate) fn input_rows(&self, xs: &[&[f64]], sigmas: &[f64]) -> DMatrix<f64> {
        let nn = self.config.n * self.config.n;
        let e = self.config.emb_dim;
        let mut inp = DMatrix::zeros(xs.len(), nn + e);
        for (b, (x, &s)) in xs.iter().zip(sigmas).enumerate() {
            let p = Preconditioning::new(s, self.config.s_data);
            for j in 0..nn {
                inp[(b, j)] = p.c_in * x[j];
            }
            for (j, v) in noise_embedding(p.c_noise, e).into_iter().enumerate() {
                inp[(b, nn + j)] = v;
            }
        }
        inp
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        let n = self.config.n;
        if x.shape() != (n, n) {
            return Err(Error::shape(format!("denoiser expects {n}x{n}, got {:?}", x.shape())));
        }
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl Denoiser for SpectralDenoiser {
    fn denoise(&self, x: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
        Ok(self.denoise_batch(std::slice::from_ref(x), sigma)?.remove(0))
    }

    fn order(&self) -> Option<usize> {
        Some(self.config.n)
    }

    fn sigma_range(&self) -> Option<(f64, f64)> {
        Some((self.schedule.sigma_min, self.schedule.sigma_max))
    }

    fn denoise_batch(&self, xs: &[DMatrix<f64>], sigma: f64) -> Result<Vec<DMatrix<f64>>> {
        self.schedule.check_sigma(sigma)?;
        for x in xs {
            self.check_input(x)?;
        }
        let n = self.config.n;
        let flat: Vec<Vec<f64>> = xs.iter().map(row_major).collect();
        let refs: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
        let sigmas = vec![sigma; xs.len()];
        let out = self.params.forward(&self.input_rows(&refs, &sigmas))?;
        let p = Preconditioning::new(sigma, self.config.s_data);
        let res: Vec<DMatrix<f64>> = xs
            .iter()
            .enumerate()
            .map(|(b, x)| DMatrix::from_fn(n, n, |i, j| p.c_skip * x[(i, j)] + p.c_out * out[(b, i * n + j)]))
            .collect();
        if res.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("denoiser output".into()));
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            n: 3,
            widths: vec![8, 8],
            emb_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn zero_net_is_skip_scaling() {
        let d = SpectralDenoiser::zeros(small(), NoiseSchedule::default()).unwrap();
        let x = DMatrix::from_fn(3, 3, |i, j| i as f64 - 0.3 * j as f64);
        for sigma in [0.002, 0.1, 1.0, 3.0] {
            let p = Preconditioning::new(sigma, 0.25);
            assert_eq!(d.denoise(&x, sigma).unwrap(), &x * p.c_skip);
        }
    }

    #[test]
    fn preconditioning_identities() {
        for sigma in [0.01, 0.25, 2.0] {
            let p = Preconditioning::new(sigma, 0.25);
            assert!((p.c_skip + (p.c_out / 0.25).powi(2) - 1.0).abs() < 1e-12);
            assert!((p.c_in * p.c_out - sigma * 0.25 / (sigma * sigma + 0.0625)).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_range_enforced() {
        let d = SpectralDenoiser::zeros(small(), NoiseSchedule::default()).unwrap();
        let x = DMatrix::zeros(3, 3);
        assert!(matches!(d.denoise(&x, 5.0), Err(Error::SigmaOutOfRange { .. })));
        assert!(matches!(
            d.denoise(&DMatrix::zeros(2, 2), 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn batch_matches_single_and_is_deterministic() {
        let d = SpectralDenoiser::init(small(), NoiseSchedule::default(), 3).unwrap();
        let mut d = d;
        // give the output layer some weight so the network contributes
        let last = d.params().n_layers() - 1;
        let w = d.params_mut().tensors_mut().into_iter().nth(2 * last).unwrap();
        w.iter_mut()
            .enumerate()
            .for_each(|(i, v)| *v = (i as f64 * 0.37).sin() * 0.1);
        let xs: Vec<_> = (0..4)
            .map(|k| DMatrix::from_fn(3, 3, |i, j| (k + i * j) as f64 * 0.1))
            .collect();
        let batch = d.denoise_batch(&xs, 0.7).unwrap();
        for (x, b) in xs.iter().zip(&batch) {
            let single = d.denoise(x, 0.7).unwrap();
            assert!((single - b).amax() < 1e-14);
        }
        assert_eq!(d.denoise_batch(&xs, 0.7).unwrap(), batch);
    }

    #[test]
    fn gaussian_denoiser_closed_form() {
        let d = DiagonalGaussianDenoiser::centered(DMatrix::from_element(1, 1, 0.25));
        let y = d.denoise(&DMatrix::from_element(1, 1, 2.0), 0.5).unwrap();
        assert!((y[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
