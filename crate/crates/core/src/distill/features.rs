use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffgraph::{Activation, MlpParams};
use crate::error::{Error, Result};
use crate::spectral::{default_hks_times, heat_kernel_signature, SpectralShape};

/// Per-vertex descriptor network shared by both shapes of a pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNetConfig {
    pub hidden: Vec<usize>,
    pub out_dim: usize,
    /// Number of HKS times appended to the coordinates.
    pub hks_count: usize,
    pub init_std: f64,
    pub activation: Activation,
    pub residual: bool,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            hidden: vec![256; 4],
            out_dim: 128,
            hks_count: 16,
            init_std: 0.02,
            activation: Activation::Gelu,
            residual: true,
        }
    }
}

impl FeatureNetConfig {
    pub fn input_dim(&self) -> usize {
        3 + self.hks_count
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(self.out_dim);
        w
    }

    /// `k` is the functional-map order the descriptors must support.
    pub fn validate(&self, k: usize) -> Result<()> {
        if self.hks_count == 0 || self.out_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("feature net dimensions must be positive".into()));
        }
        if self.out_dim < k {
            return Err(Error::InvalidArgument(format!(
                "descriptor count {} is below map order {k}",
                self.out_dim
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad init std {}", self.init_std)));
        }
        Ok(())
    }
}

/// Network input rows `[xyz | hks]`: coordinates centered and divided by
/// `sqrt(area)`, HKS columns of unit mass norm multiplied by `sqrt(area)`, so
/// both parts are independent of the mesh scale.
pub fn feature_input(shape: &SpectralShape, hks_count: usize) -> Result<DMatrix<f64>> {
    let mesh = &shape.mesh;
    let n = mesh.n_vertices();
    let root = mesh.total_area().sqrt();
    let c = mesh.centroid();
    let times = default_hks_times(&shape.basis, hks_count);
    let hks = heat_kernel_signature(&shape.basis, &shape.mass, &times)?;
    let mut out = DMatrix::zeros(n, 3 + hks_count);
    for (v, p) in mesh.vertices().iter().enumerate() {
        for a in 0..3 {
            out[(v, a)] = (p[a] - c[a]) / root;
        }
        for t in 0..hks_count {
            out[(v, 3 + t)] = hks[(v, t)] * root;
        }
    }
    Ok(out)
}

/// Weights `~ Normal(0, init_std^2)`, biases zero.
pub fn init_feature_net(cfg: &FeatureNetConfig, seed: u64) -> Result<MlpParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MlpParams::normal(&cfg.widths(), cfg.activation, cfg.residual, cfg.init_std, &mut rng)
}

/// `n x d` descriptor field of one shape.
pub fn feature_forward(theta: &MlpParams, shape: &SpectralShape, hks_count: usize) -> Result<DMatrix<f64>> {
    theta.forward(&feature_input(shape, hks_count)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffgraph::Tape;
    use crate::synth::{make_template, TemplateKind};

    fn shape() -> SpectralShape {
        SpectralShape::new(make_template(TemplateKind::Biped, 1).unwrap(), 12).unwrap()
    }

    #[test]
    fn zero_net_gives_constant_rows() {
        let cfg = FeatureNetConfig {
            hidden: vec![8],
            out_dim: 6,
            hks_count: 4,
            ..Default::default()
        };
        let theta = MlpParams::zeros(&cfg.widths(), cfg.activation, cfg.residual).unwrap();
        let f = feature_forward(&theta, &shape(), 4).unwrap();
        assert_eq!(f.shape(), (42, 6));
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn input_is_scale_invariant() {
        let sh = shape();
        let big = sh
            .mesh
            .with_vertices(sh.mesh.vertices().iter().map(|p| p * 3.0).collect())
            .unwrap();
        let sh2 = SpectralShape::new(big, 12).unwrap();
        let a = feature_input(&sh, 5).unwrap();
        let b = feature_input(&sh2, 5).unwrap();
        assert!((a - b).amax() < 1e-6);
    }

    #[test]
    fn permuting_vertices_permutes_rows() {
        let sh = shape();
        let n = sh.mesh.n_vertices();
        let order: Vec<usize> = (0..n).rev().collect();
        let sh2 = SpectralShape::new(sh.mesh.permuted(&order).unwrap(), 12).unwrap();
        let cfg = FeatureNetConfig {
            hidden: vec![16, 16],
            out_dim: 12,
            hks_count: 4,
            ..Default::default()
        };
        let theta = init_feature_net(&cfg, 3).unwrap();
        let a = feature_forward(&theta, &sh, 4).unwrap();
        let b = feature_forward(&theta, &sh2, 4).unwrap();
        for (i, &o) in order.iter().enumerate() {
            assert!((b.row(i) - a.row(o)).amax() < 1e-8);
        }
    }

    #[test]
    fn gradient_reaches_spectral_descriptors() {
        let sh = shape();
        let cfg = FeatureNetConfig {
            hidden: vec![6],
            out_dim: 5,
            hks_count: 3,
            init_std: 0.3,
            ..Default::default()
        };
        let theta = init_feature_net(&cfg, 1).unwrap();
        let input = feature_input(&sh, 3).unwrap();
        let proj = super::super::zeroshot::projector(&sh, 5);
        let weight = DMatrix::from_fn(5, 5, |i, j| ((i * 5 + j) as f64).sin());
        let f = |p: &MlpParams| (&proj * p.forward(&input).unwrap()).dot(&weight);
        let tape = Tape::new();
        let bound = theta.bind(&tape);
        let a = tape
            .constant(proj.clone())
            .matmul(bound.forward(tape.constant(input.clone())).unwrap())
            .unwrap();
        let loss = a.dot_const(&weight).unwrap();
        let grads = bound.gradients(&tape.backward(loss).unwrap());
        let h = 1e-5;
        for (t, g) in grads.iter().enumerate() {
            for idx in [0, g.len() / 2, g.len() - 1] {
                let mut plus = theta.clone();
                plus.tensors_mut()[t][idx] += h;
                let mut minus = theta.clone();
                minus.tensors_mut()[t][idx] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                assert!((fd - g[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[idx]);
            }
        }
    }
}
