//! Functional-map algebra: ground-truth maps, masks, the regularized solve,
//! point-map conversion, Zoomout and evaluation.

mod eval;
mod masks;
mod p2p;
mod penalties;
mod solve;

pub use eval::{cumulative_curve, geodesic_error, geodesic_error_with_table, GeodesicErrors};
pub use masks::{laplacian_mask, normalized_spectrum, resolvent_mask, slanted_mask};
pub use p2p::{p2p_from_fmap, zoomout, zoomout_with_map};
pub use penalties::{
    bij_penalty, bij_penalty_var, lap_commute_penalty, lap_commute_penalty_var, ortho_penalty, ortho_penalty_var,
};
pub use solve::{solve_fmap, solve_fmap_var, SolveOptions};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::mesh::MassDiagonal;
use crate::spectral::SpectralBasis;

/// `k2 x k1` matrix taking coefficients on shape 1 to coefficients on shape 2.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalMap(DMatrix<f64>);

impl FunctionalMap {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        if c.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("functional map entry".into()));
        }
        Ok(FunctionalMap(c))
    }

    pub fn identity(k: usize) -> Self {
        FunctionalMap(DMatrix::identity(k, k))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// `(k2, k1)`
    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn scaled(&self, s: f64) -> Self {
        FunctionalMap(&self.0 * s)
    }

    pub fn abs(&self) -> DMatrix<f64> {
        self.0.abs()
    }

    /// Leading `k2 x k1` block.
    pub fn truncated(&self, k2: usize, k1: usize) -> Result<Self> {
        let (r, c) = self.shape();
        if k2 > r || k1 > c {
            return Err(Error::KTooLarge {
                k: k2.max(k1),
                max: r.min(c),
            });
        }
        Ok(FunctionalMap(self.0.view((0, 0), (k2, k1)).into_owned()))
    }
}

/// Nonnegative elementwise weights, same shape as the map they regularize.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(DMatrix<f64>);

impl Mask {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if let Some(x) = m.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mask entry {x} is not a nonnegative number"
            )));
        }
        Ok(Mask(m))
    }

    pub fn ones(k2: usize, k1: usize) -> Self {
        Mask(DMatrix::from_element(k2, k1, 1.0))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

/// For every vertex of shape 1, the matched vertex on shape 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointMap(Vec<usize>);

impl PointMap {
    pub fn new(targets: Vec<usize>, n2: usize) -> Result<Self> {
        if let Some(&t) = targets.iter().find(|&&t| t >= n2) {
            return Err(Error::InvalidArgument(format!(
                "point map target {t} out of range for {n2} vertices"
            )));
        }
        Ok(PointMap(targets))
    }

    pub fn identity(n: usize) -> Self {
        PointMap((0..n).collect())
    }

    pub fn targets(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// Fraction of vertices on which both maps agree.
    pub fn agreement(&self, other: &PointMap) -> f64 {
        if self.0.is_empty() {
            return 1.0;
        }
        let same = self.0.iter().zip(&other.0).filter(|(a, b)| a == b).count();
        same as f64 / self.0.len() as f64
    }
}

/// `Phi2^T S2 Pi Phi1` for the pointwise map `corr`, at the full orders of
/// both bases.
pub fn gt_fmap(
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    corr: &PointMap,
    s2: &MassDiagonal,
) -> Result<FunctionalMap> {
    pullback(corr, basis1, basis2, s2, basis2.k(), basis1.k())
}

/// Same construction at a common order `k`.
pub fn fmap_from_p2p(
    pm: &PointMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    s2: &MassDiagonal,
    k: usize,
) -> Result<FunctionalMap> {
    pullback(pm, basis1, basis2, s2, k, k)
}

fn pullback(
    pm: &PointMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    s2: &MassDiagonal,
    k2: usize,
    k1: usize,
) -> Result<FunctionalMap> {
    if pm.len() != basis1.n() {
        return Err(Error::shape(format!(
            "point map has {} entries, shape 1 has {} vertices",
            pm.len(),
            basis1.n()
        )));
    }
    if s2.len() != basis2.n() {
        return Err(Error::shape("mass diagonal does not match shape 2"));
    }
    if k2 > basis2.k() || k1 > basis1.k() {
        return Err(Error::KTooLarge {
            k: k2.max(k1),
            max: basis1.k().min(basis2.k()),
        });
    }
    let n2 = basis2.n();
    let phi1 = basis1.phi();
    let phi2 = basis2.phi();
    // G[v, :] = S2[T(v)] * Phi2[T(v), :k2]
    let mut g = DMatrix::zeros(pm.len(), k2);
    for (v, &t) in pm.targets().iter().enumerate() {
        if t >= n2 {
            return Err(Error::InvalidArgument(format!("point map target {t} out of range")));
        }
        let w = s2[t];
        for j in 0..k2 {
            g[(v, j)] = w * phi2[(t, j)];
        }
    }
    FunctionalMap::new(g.transpose() * phi1.columns(0, k1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::SpectralShape;
    use crate::synth::{make_template, TemplateKind};

    #[test]
    fn identity_map_gives_identity() {
        let sh = SpectralShape::new(make_template(TemplateKind::Biped, 2).unwrap(), 12).unwrap();
        let c = gt_fmap(
            &sh.basis,
            &sh.basis,
            &PointMap::identity(sh.mesh.n_vertices()),
            &sh.mass,
        )
        .unwrap();
        assert!((c.matrix() - DMatrix::<f64>::identity(12, 12)).amax() < 1e-8);
    }

    #[test]
    fn constant_mode_gives_sqrt_area_ratio() {
        let m1 = make_template(TemplateKind::Icosphere, 2).unwrap();
        let m2 = m1
            .with_vertices(m1.vertices().iter().map(|p| p * 1.7).collect())
            .unwrap();
        let s1 = SpectralShape::new(m1, 4).unwrap();
        let s2 = SpectralShape::new(m2, 4).unwrap();
        let pm = PointMap::identity(s1.mesh.n_vertices());
        let c = fmap_from_p2p(&pm, &s1.basis, &s2.basis, &s2.mass, 1).unwrap();
        let ratio = (s2.mass.total() / s1.mass.total()).sqrt();
        assert!((c.matrix()[(0, 0)].abs() - ratio).abs() < 1e-9);
    }

    #[test]
    fn doubling_shape_two_doubles_map() {
        let m1 = make_template(TemplateKind::Biped, 2).unwrap();
        let m2 = m1
            .with_vertices(m1.vertices().iter().map(|p| p * 2.0).collect())
            .unwrap();
        let s1 = SpectralShape::new(m1, 8).unwrap();
        let s2 = SpectralShape::new(m2, 8).unwrap();
        let pm = PointMap::identity(s1.mesh.n_vertices());
        let c = gt_fmap(&s1.basis, &s2.basis, &pm, &s2.mass).unwrap();
        // eigenvectors of the scaled shape are Phi/2 with identical signs
        assert!((c.matrix() - DMatrix::<f64>::identity(8, 8) * 2.0).amax() < 1e-6);
    }

    #[test]
    fn point_map_rejects_out_of_range() {
        assert!(PointMap::new(vec![0, 3], 3).is_err());
        assert!(Mask::new(DMatrix::from_element(1, 1, -1.0)).is_err());
        assert!(FunctionalMap::new(DMatrix::from_element(1, 1, f64::NAN)).is_err());
    }
}
