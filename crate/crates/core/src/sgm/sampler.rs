use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::denoiser::{Denoiser, NoiseSchedule};
use crate::error::{Error, Result};

/// `steps` geometrically spaced levels from `sigma_max` down to `sigma_min`,
/// followed by a final 0.
pub fn sigma_grid(schedule: &NoiseSchedule, steps: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = if steps <= 1 {
        vec![schedule.sigma_max]
    } else {
        let ratio = schedule.sigma_min / schedule.sigma_max;
        (0..steps)
            .map(|i| schedule.sigma_max * ratio.powf(i as f64 / (steps - 1) as f64))
            .collect()
    };
    grid.push(0.0);
    grid
}

fn check_finite(xs: &[DMatrix<f64>]) -> Result<()> {
    if xs.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("sampler state".into()));
    }
    Ok(())
}

/// Probability-flow integration with Heun steps; the last step to zero noise
/// is a plain Euler step. Returns the states after every step, starting with
/// the initial noise.
fn integrate<D: Denoiser + ?Sized>(
    denoiser: &D,
    n: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    count: usize,
    seed: u64,
    keep_trajectory: bool,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    schedule.validate()?;
    let grid = sigma_grid(schedule, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs: Vec<DMatrix<f64>> = (0..count)
        .map(|_| DMatrix::from_fn(n, n, |_, _| schedule.sigma_max * crate::randn(&mut rng)))
        .collect();
    let mut traj = vec![xs.clone()];
    for w in grid.windows(2) {
        let (s, s_next) = (w[0], w[1]);
        let den = denoiser.denoise_batch(&xs, s)?;
        let d: Vec<DMatrix<f64>> = xs.iter().zip(&den).map(|(x, dx)| (x - dx) / s).collect();
        let euler: Vec<DMatrix<f64>> = xs.iter().zip(&d).map(|(x, di)| x + di * (s_next - s)).collect();
        if s_next > 0.0 {
            let den2 = denoiser.denoise_batch(&euler, s_next)?;
            xs = xs
                .iter()
                .zip(&d)
                .zip(euler.iter().zip(&den2))
                .map(|((x, d1), (xe, de))| {
                    let d2 = (xe - de) / s_next;
                    x + (d1 + d2) * (0.5 * (s_next - s))
                })
                .collect();
        } else {
            xs = euler;
        }
        check_finite(&xs)?;
        if keep_trajectory {
            traj.push(xs.clone());
        }
    }
    if !keep_trajectory {
        traj = vec![xs];
    }
    Ok(traj)
}

/// Draws `count` samples in one batch; deterministic in `seed`.
pub fn sample_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    n: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    Ok(integrate(denoiser, n, schedule, steps, count, seed, false)?
        .pop()
        .unwrap_or_default())
}

pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    n: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    Ok(sample_batch(denoiser, n, schedule, steps, 1, seed)?.remove(0))
}

/// States of a single sample after each integration step.
pub fn sample_trajectory<D: Denoiser + ?Sized>(
    denoiser: &D,
    n: usize,
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    Ok(integrate(denoiser, n, schedule, steps, 1, seed, true)?
        .into_iter()
        .map(|mut v| v.remove(0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgm::DiagonalGaussianDenoiser;

    #[test]
    fn grid_is_geometric_and_ends_at_zero() {
        let s = NoiseSchedule::default();
        let g = sigma_grid(&s, 5);
        assert_eq!(g.len(), 6);
        assert_eq!(g[0], 3.0);
        assert!((g[4] - 0.002).abs() < 1e-15);
        assert_eq!(g[5], 0.0);
        let r = g[1] / g[0];
        assert!((g[2] / g[1] - r).abs() < 1e-12);
    }

    #[test]
    fn delta_distribution_collapses() {
        let x0 = DMatrix::from_fn(3, 3, |i, j| if i == j { 1.0 } else { 0.1 });
        let d = DiagonalGaussianDenoiser {
            mean: x0.clone(),
            variance: DMatrix::from_element(3, 3, 1e-10),
        };
        let x = sample(&d, 3, &NoiseSchedule::default(), 32, 7).unwrap();
        assert!((x - &x0).norm() < 0.1 * x0.norm());
    }

    #[test]
    fn gaussian_covariance_is_matched() {
        let s2 = 0.09;
        let sched = NoiseSchedule::default();
        let d = DiagonalGaussianDenoiser::centered(DMatrix::from_element(2, 2, s2));
        let xs = sample_batch(&d, 2, &sched, 40, 1000, 3).unwrap();
        let mut cov = nalgebra::Matrix4::<f64>::zeros();
        for x in &xs {
            let v = nalgebra::Vector4::new(x[(0, 0)], x[(0, 1)], x[(1, 0)], x[(1, 1)]);
            cov += v * v.transpose();
        }
        cov /= xs.len() as f64;
        for i in 0..4 {
            assert!((cov[(i, i)] / s2 - 1.0).abs() < 0.15, "{}", cov[(i, i)]);
            for j in 0..i {
                assert!(cov[(i, j)].abs() < 0.15 * s2);
            }
        }
    }

    #[test]
    fn trajectory_ends_at_sample() {
        let d = DiagonalGaussianDenoiser::centered(DMatrix::from_element(2, 2, 0.04));
        let s = NoiseSchedule::default();
        let t = sample_trajectory(&d, 2, &s, 10, 5).unwrap();
        assert_eq!(t.len(), 11);
        assert_eq!(t.last().unwrap(), &sample(&d, 2, &s, 10, 5).unwrap());
    }
}
