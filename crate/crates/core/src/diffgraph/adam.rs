use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Adam moments and step counter for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| DMatrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update at the current `lr`.
    pub fn step(&mut self, params: &mut [&mut DMatrix<f64>], grads: &[DMatrix<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape("optimizer parameter count"));
        }
        for i in 0..self.m.len() {
            if params[i].shape() != self.m[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(Error::shape(format!("optimizer tensor {i} shape")));
            }
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..g.len() {
                let gj = g[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = DMatrix::from_element(2, 2, 1.5);
        let mut opt = AdamState::new(0.1, &[(2, 2)]);
        opt.step(&mut [&mut p], &[DMatrix::zeros(2, 2)]).unwrap();
        assert_eq!(p, DMatrix::from_element(2, 2, 1.5));
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = DMatrix::zeros(1, 3);
        let g = DMatrix::from_row_slice(1, 3, &[2.0, -0.01, 300.0]);
        let mut opt = AdamState::new(1e-3, &[(1, 3)]);
        opt.step(&mut [&mut p], &[g.clone()]).unwrap();
        for j in 0..3 {
            assert!((p[j] + 1e-3 * g[j].signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = DMatrix::from_element(3, 1, 0.3);
            let mut opt = AdamState::new(0.01, &[(3, 1)]);
            for k in 0..20 {
                let g = p.map(|x| x * (k as f64 + 1.0).sin());
                opt.step(&mut [&mut p], &[g]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
