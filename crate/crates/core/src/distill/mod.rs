//! Turning a trained denoiser into matching signals: the distilled mask, the
//! SDS gradient, the properness loss, and the zero-shot optimization loop.

mod features;
mod zeroshot;

pub use features::{feature_forward, feature_input, init_feature_net, FeatureNetConfig};
pub use zeroshot::{
    ini_zoomout, prepare_pair, prepare_shape, step_loss, zero_shot_match, zero_shot_match_prepared, AblationMode,
    Descriptors, FrozenTerms, InitMask, LossTrace, MatchReport, MatchResult, PreparedPair, PreparedShape, StepLoss,
    ZeroShotConfig,
};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffgraph::Var;
use crate::error::{Error, Result};
use crate::fmap::Mask;
use crate::sgm::Denoiser;

/// Denoiser calls per batch during mask distillation.
const MASK_BATCH: usize = 128;

fn check_order<D: Denoiser + ?Sized>(denoiser: &D, c: &DMatrix<f64>) -> Result<()> {
    if c.nrows() != c.ncols() {
        return Err(Error::shape(format!("expected a square map, got {:?}", c.shape())));
    }
    if let Some(n) = denoiser.order() {
        if c.nrows() != n {
            return Err(Error::shape(format!(
                "denoiser works on {n}x{n} maps, got {:?}",
                c.shape()
            )));
        }
    }
    Ok(())
}

fn check_sigma<D: Denoiser + ?Sized>(denoiser: &D, sigma: f64) -> Result<()> {
    let (min, max) = denoiser.sigma_range().unwrap_or((0.0, f64::INFINITY));
    if !(sigma > 0.0 && sigma.is_finite() && sigma >= min && sigma <= max) {
        return Err(Error::SigmaOutOfRange { sigma, min, max });
    }
    Ok(())
}

/// Mask `M` with `M^2 = E[(|C|_s - D(|C|_s; s)) / (2 s^2 |C|_s)]`, where
/// `|C|_s = |C| + |n|` and `n ~ Normal(0, s^2)` elementwise.
///
/// Negative Monte-Carlo averages are clamped to zero before the square root.
pub fn distill_mask<D: Denoiser + ?Sized>(
    denoiser: &D,
    c_init: &DMatrix<f64>,
    sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<Mask> {
    check_order(denoiser, c_init)?;
    check_sigma(denoiser, sigma)?;
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "mask distillation needs at least one sample".into(),
        ));
    }
    let base = c_init.abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = DMatrix::<f64>::zeros(base.nrows(), base.ncols());
    let mut done = 0;
    while done < samples {
        let b = MASK_BATCH.min(samples - done);
        let noisy: Vec<DMatrix<f64>> = (0..b)
            .map(|_| base.map(|x| x + (sigma * crate::randn(&mut rng)).abs()))
            .collect();
        let den = denoiser.denoise_batch(&noisy, sigma)?;
        for (x, d) in noisy.iter().zip(&den) {
            for ((a, &xv), &dv) in acc.iter_mut().zip(x.iter()).zip(d.iter()) {
                // xv > 0 except when both |C| and the draw are exactly zero
                if xv > 0.0 {
                    *a += (xv - dv) / (2.0 * sigma * sigma * xv);
                }
            }
        }
        done += b;
    }
    let m = acc.map(|a| (a / samples as f64).max(0.0).sqrt());
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distilled mask".into()));
    }
    Mask::new(m)
}

/// Noise range for SDS draws; `sigma` is log-uniform on `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdsRange {
    pub min: f64,
    pub max: f64,
}

impl Default for SdsRange {
    fn default() -> Self {
        SdsRange { min: 0.05, max: 1.5 }
    }
}

/// One SDS draw `(X + n - D(X + n; s)) / s` with `n ~ Normal(0, s^2)`.
/// The result is meant to be injected as a constant cotangent at `X`.
pub fn sds_gradient<D: Denoiser + ?Sized>(
    denoiser: &D,
    c: &DMatrix<f64>,
    range: SdsRange,
    seed: u64,
) -> Result<DMatrix<f64>> {
    check_order(denoiser, c)?;
    if !(range.min > 0.0 && range.max >= range.min && range.max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bad SDS noise range [{}, {}]",
            range.min, range.max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.random();
    let sigma = (range.min.ln() + u * (range.max.ln() - range.min.ln())).exp();
    let noisy = c.map(|x| x + sigma * crate::randn(&mut rng));
    let d = denoiser.denoise(&noisy, sigma)?;
    Ok((noisy - d) / sigma)
}

/// `0.5 |X - stopgrad(X - g)|^2`: its value is `|g|^2 / 2` and its gradient
/// with respect to `X` is exactly `g`.
pub fn sds_loss<'t>(x: Var<'t>, g: &DMatrix<f64>) -> Result<Var<'t>> {
    if x.shape() != g.shape() {
        return Err(Error::shape("SDS gradient does not match its input"));
    }
    let target = x.to_matrix() - g;
    Ok(x.add_const(&(-target))?.frobenius_sq().scale(0.5))
}

/// `|C_raw - C_proper|^2` with `C_proper` held constant.
pub fn proper_loss<'t>(c_raw: Var<'t>, c_proper: &DMatrix<f64>) -> Result<Var<'t>> {
    if c_raw.shape() != c_proper.shape() {
        return Err(Error::shape(format!(
            "raw map is {:?}, proper map {:?}",
            c_raw.shape(),
            c_proper.shape()
        )));
    }
    Ok(c_raw.add_const(&(-c_proper))?.frobenius_sq())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::Tape;
    use crate::sgm::{DiagonalGaussianDenoiser, IdentityDenoiser};

    #[test]
    fn perfect_denoiser_gives_zero_mask() {
        let c = DMatrix::from_fn(4, 4, |i, j| if i == j { 1.0 } else { 0.1 * (i + j) as f64 });
        let m = distill_mask(&IdentityDenoiser, &c, 1.0, 20, 3).unwrap();
        assert!(m.matrix().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_oracle_mask() {
        let v = DMatrix::from_fn(3, 3, |i, j| 0.05 + 0.1 * (i * 3 + j) as f64);
        let d = DiagonalGaussianDenoiser::centered(v.clone());
        let sigma = 1.0;
        let m = distill_mask(&d, &DMatrix::zeros(3, 3), sigma, 10_000, 11).unwrap();
        for (mv, vv) in m.matrix().iter().zip(v.iter()) {
            let want = 1.0 / (2.0 * (vv + sigma * sigma));
            assert!((mv * mv / want - 1.0).abs() < 0.05, "{} vs {want}", mv * mv);
        }
    }

    #[test]
    fn mask_is_deterministic_and_nonnegative() {
        let d = DiagonalGaussianDenoiser {
            mean: DMatrix::from_element(3, 3, 2.0),
            variance: DMatrix::from_element(3, 3, 0.01),
        };
        let c = DMatrix::from_element(3, 3, 5.0);
        let a = distill_mask(&d, &c, 0.5, 30, 1).unwrap();
        assert_eq!(a, distill_mask(&d, &c, 0.5, 30, 1).unwrap());
        // denoiser pulls toward 2 < 5, so the ratio is positive here
        assert!(a.matrix().iter().all(|&x| x > 0.0));
        // pulling upward makes the ratio negative, which clamps to zero
        let z = distill_mask(&d, &DMatrix::zeros(3, 3), 0.01, 30, 1).unwrap();
        assert!(z.matrix().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_rejects_bad_sigma_and_shape() {
        let d = crate::sgm::SpectralDenoiser::zeros(
            crate::sgm::DenoiserConfig {
                n: 3,
                widths: vec![4],
                emb_dim: 4,
                ..Default::default()
            },
            crate::sgm::NoiseSchedule::default(),
        )
        .unwrap();
        assert!(matches!(
            distill_mask(&d, &DMatrix::zeros(3, 3), 5.0, 4, 0),
            Err(Error::SigmaOutOfRange { .. })
        ));
        assert!(matches!(
            distill_mask(&d, &DMatrix::zeros(4, 4), 1.0, 4, 0),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            distill_mask(&IdentityDenoiser, &DMatrix::zeros(2, 3), 1.0, 4, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn identity_denoiser_gives_zero_gradient() {
        let c = DMatrix::from_element(4, 4, 0.3);
        for s in 0..10 {
            let g = sds_gradient(&IdentityDenoiser, &c, SdsRange::default(), s).unwrap();
            assert!(g.amax() < 1e-15);
        }
    }

    #[test]
    fn sds_has_no_drift_at_the_data_point() {
        let x0 = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.05 });
        let delta = DiagonalGaussianDenoiser {
            mean: x0.clone(),
            variance: DMatrix::from_element(3, 3, 1e-8),
        };
        // D = 0 exposes the injected noise: g0 = (x0 + n) / s
        let zero = DiagonalGaussianDenoiser {
            mean: DMatrix::zeros(3, 3),
            variance: DMatrix::zeros(3, 3),
        };
        let s = 0.05;
        let range = SdsRange { min: s, max: s };
        let draws = 1000;
        let mut mean = DMatrix::<f64>::zeros(3, 3);
        let mut drift = DMatrix::<f64>::zeros(3, 3);
        for seed in 0..draws {
            let g = sds_gradient(&delta, &x0, range, seed).unwrap();
            let noise = sds_gradient(&zero, &x0, range, seed).unwrap() - &x0 / s;
            drift += &g - noise;
            mean += g;
        }
        mean /= draws as f64;
        drift /= draws as f64;
        assert!(drift.amax() < 0.05, "{}", drift.amax());
        // g itself is n / s, standard normal per entry
        assert!(mean.amax() < 5.0 / (draws as f64).sqrt(), "{}", mean.amax());
    }

    #[test]
    fn sds_points_back_to_data() {
        let x0 = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.0 });
        let d = DiagonalGaussianDenoiser {
            mean: x0.clone(),
            variance: DMatrix::from_element(3, 3, 1e-3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut hits = 0;
        for t in 0..50 {
            let far = x0.map(|v| v + 2.0 * crate::randn(&mut rng));
            let mut mean = DMatrix::<f64>::zeros(3, 3);
            for s in 0..20 {
                mean += sds_gradient(&d, &far, SdsRange::default(), t * 100 + s).unwrap();
            }
            // descending along g reduces |X - x0|
            if mean.dot(&(&far - &x0)) > 0.0 {
                hits += 1;
            }
        }
        assert!(hits >= 40, "{hits}/50");
    }

    #[test]
    fn sds_loss_injects_the_gradient() {
        let tape = Tape::new();
        let x = tape.param(DMatrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64));
        let g = DMatrix::from_fn(2, 3, |i, j| 0.1 * i as f64 - 0.3 * j as f64);
        let l = sds_loss(x, &g).unwrap();
        assert!((l.scalar() - 0.5 * g.norm_squared()).abs() < 1e-12);
        let grads = tape.backward(l).unwrap();
        assert!((grads.get(x) - &g).amax() < 1e-12);
    }

    #[test]
    fn proper_loss_value_and_gradient() {
        let tape = Tape::new();
        let raw = DMatrix::from_fn(3, 3, |i, j| (i as f64 - j as f64) * 0.2);
        let prop = DMatrix::identity(3, 3);
        let x = tape.param(raw.clone());
        let l = proper_loss(x, &prop).unwrap();
        assert!((l.scalar() - (&raw - &prop).norm_squared()).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert!((g.get(x) - (&raw - &prop) * 2.0).amax() < 1e-12);
        let t2 = Tape::new();
        assert_eq!(proper_loss(t2.param(prop.clone()), &prop).unwrap().scalar(), 0.0);
    }
}
