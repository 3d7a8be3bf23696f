//! Truncated Laplace-Beltrami eigenbases and the operations built on them.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::formats::{atomic_write, put_f64, put_matrix_row_major, put_u32_len, read_file, ByteReader};
use crate::mesh::{cotan_stiffness, vertex_areas, MassDiagonal, SparseSymMatrix, TriangleMesh};

pub const SPEC_MAGIC: &[u8; 4] = b"SPEC";

/// Spectral coefficients of `d` functions, one column per function (`k x d`).
pub type CoeffMatrix = DMatrix<f64>;

/// First `k` generalized eigenpairs of `W phi = lambda S phi`.
///
/// Columns of `phi` are mass-orthonormal (`phi^T S phi = I`) and `lambda`
/// is ascending, starting at the (clamped) zero eigenvalue of the constants.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    phi: DMatrix<f64>,
    lambda: Vec<f64>,
}

impl SpectralBasis {
    pub fn from_parts(phi: DMatrix<f64>, lambda: Vec<f64>) -> Result<Self> {
        if phi.ncols() != lambda.len() {
            return Err(Error::shape(format!(
                "basis has {} columns but {} eigenvalues",
                phi.ncols(),
                lambda.len()
            )));
        }
        Ok(SpectralBasis { phi, lambda })
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// The leading `k` eigenpairs as an owned basis.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k > self.k() {
            return Err(Error::KTooLarge { k, max: self.k() });
        }
        Ok(SpectralBasis {
            phi: self.phi.columns(0, k).into_owned(),
            lambda: self.lambda[..k].to_vec(),
        })
    }

    /// View of the leading `k` eigenfunctions.
    pub fn phi_k(&self, k: usize) -> nalgebra::DMatrixView<'_, f64> {
        self.phi.columns(0, k)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(12 + 8 * (self.phi.len() + self.k()));
        out.extend_from_slice(SPEC_MAGIC);
        put_u32_len(&mut out, self.n())?;
        put_u32_len(&mut out, self.k())?;
        put_matrix_row_major(&mut out, &self.phi);
        for &l in &self.lambda {
            put_f64(&mut out, l);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(SPEC_MAGIC)?;
        let n = r.u32()? as usize;
        let k = r.u32()? as usize;
        let phi = DMatrix::from_row_slice(n, k, &r.f64s(n * k)?);
        let lambda = r.f64s(k)?;
        r.finish()?;
        SpectralBasis::from_parts(phi, lambda)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        atomic_write(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&read_file(path.as_ref())?)
    }
}

/// Max-abs deviation of `phi^T S phi` from the identity.
pub fn orthonormality_error(basis: &SpectralBasis, s: &MassDiagonal) -> f64 {
    let sphi = scale_rows(basis.phi(), s.as_slice());
    let gram = basis.phi().transpose() * sphi;
    let mut err: f64 = 0.0;
    for i in 0..gram.nrows() {
        for j in 0..gram.ncols() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((gram[(i, j)] - target).abs());
        }
    }
    err
}

/// Per-column residual `|W phi - lambda S phi| / (max|W| |phi|)`.
pub fn eigen_residuals(basis: &SpectralBasis, w: &SparseSymMatrix, s: &MassDiagonal) -> Vec<f64> {
    let wphi = w.mul_dense(basis.phi());
    let scale = w.max_abs().max(f64::MIN_POSITIVE);
    (0..basis.k())
        .map(|c| {
            let lam = basis.lambda[c];
            let mut r2 = 0.0;
            let mut p2 = 0.0;
            for i in 0..basis.n() {
                let p = basis.phi[(i, c)];
                let r = wphi[(i, c)] - lam * s[i] * p;
                r2 += r * r;
                p2 += p * p;
            }
            r2.sqrt() / (scale * p2.sqrt())
        })
        .collect()
}

pub(crate) fn scale_rows(m: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        row *= w[i];
    }
    out
}

/// Dense generalized eigensolve through the symmetric reduction
/// `S^-1/2 W S^-1/2`, returning the `k` smallest eigenpairs.
///
/// Each eigenvector is signed so that its first largest-magnitude entry is
/// positive, which makes repeated runs bitwise identical.
pub fn eigenbasis(w: &SparseSymMatrix, s: &MassDiagonal, k: usize) -> Result<SpectralBasis> {
    let n = w.dim();
    if s.len() != n {
        return Err(Error::shape(format!("W is {n}x{n} but S has {} entries", s.len())));
    }
    if k == 0 || k >= n {
        return Err(Error::KTooLarge {
            k,
            max: n.saturating_sub(1),
        });
    }
    let inv_sqrt: Vec<f64> = s.as_slice().iter().map(|a| 1.0 / a.sqrt()).collect();
    let mut reduced = DMatrix::zeros(n, n);
    for (i, j, v) in w.entries() {
        reduced[(i, j)] = v * inv_sqrt[i] * inv_sqrt[j];
    }
    let eig = SymmetricEigen::try_new(reduced, f64::EPSILON, 200 * n)
        .ok_or_else(|| Error::ConvergenceFailure(format!("dense eigensolve on n={n}")))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let mut phi = DMatrix::zeros(n, k);
    let mut lambda = Vec::with_capacity(k);
    for (c, &src) in order.iter().take(k).enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        for i in 0..n {
            col[i] *= inv_sqrt[i];
        }
        let mut arg = 0;
        for i in 1..n {
            if col[i].abs() > col[arg].abs() {
                arg = i;
            }
        }
        if col[arg] < 0.0 {
            col.neg_mut();
        }
        phi.set_column(c, &col);
        lambda.push(eig.eigenvalues[src].max(0.0));
    }
    let basis = SpectralBasis { phi, lambda };

    let ortho = orthonormality_error(&basis, s);
    if !(ortho < 1e-8) {
        return Err(Error::ConvergenceFailure(format!("orthonormality error {ortho:e}")));
    }
    let worst = eigen_residuals(&basis, w, s).into_iter().fold(0.0f64, f64::max);
    if !(worst < 1e-6) {
        return Err(Error::ConvergenceFailure(format!("eigen residual {worst:e}")));
    }
    Ok(basis)
}

/// `A = phi^T S F`.
pub fn project(basis: &SpectralBasis, s: &MassDiagonal, f: &DMatrix<f64>) -> Result<CoeffMatrix> {
    if f.nrows() != basis.n() || s.len() != basis.n() {
        return Err(Error::shape(format!(
            "function field has {} rows, basis has {}",
            f.nrows(),
            basis.n()
        )));
    }
    Ok(basis.phi.transpose() * scale_rows(f, s.as_slice()))
}

/// `phi A`.
pub fn reconstruct(basis: &SpectralBasis, a: &CoeffMatrix) -> Result<DMatrix<f64>> {
    if a.nrows() != basis.k() {
        return Err(Error::shape(format!(
            "coefficients have {} rows, basis order is {}",
            a.nrows(),
            basis.k()
        )));
    }
    Ok(&basis.phi * a)
}

/// Log-spaced diffusion times over `[4 ln10 / lambda_k, 4 ln10 / lambda_2]`.
pub fn default_hks_times(basis: &SpectralBasis, count: usize) -> Vec<f64> {
    let lam = basis.lambda();
    let lo = 4.0 * std::f64::consts::LN_10 / lam[lam.len() - 1];
    let hi = 4.0 * std::f64::consts::LN_10 / lam[1.min(lam.len() - 1)].max(f64::MIN_POSITIVE);
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| {
            let t = i as f64 / (count - 1) as f64;
            (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

/// Heat kernel signature `sum_i exp(-lambda_i t) phi_i(v)^2`, one column per
/// time, each column scaled to unit mass-weighted L2 norm.
pub fn heat_kernel_signature(basis: &SpectralBasis, s: &MassDiagonal, times: &[f64]) -> Result<DMatrix<f64>> {
    if s.len() != basis.n() {
        return Err(Error::shape("mass diagonal does not match basis"));
    }
    if let Some(t) = times.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidArgument(format!("diffusion time {t} must be positive")));
    }
    let n = basis.n();
    let mut out = DMatrix::zeros(n, times.len());
    for (c, &t) in times.iter().enumerate() {
        // shift by lambda_1 so long times do not underflow
        let l0 = basis.lambda[0];
        let weights: Vec<f64> = basis.lambda.iter().map(|l| (-(l - l0) * t).exp()).collect();
        let mut norm2 = 0.0;
        for v in 0..n {
            let h: f64 = (0..basis.k())
                .map(|i| weights[i] * basis.phi[(v, i)] * basis.phi[(v, i)])
                .sum();
            out[(v, c)] = h;
            norm2 += s[v] * h * h;
        }
        let norm = norm2.sqrt();
        if norm > 0.0 {
            out.column_mut(c).scale_mut(1.0 / norm);
        }
    }
    Ok(out)
}

/// A mesh with its mass matrix and a truncated eigenbasis.
#[derive(Debug, Clone)]
pub struct SpectralShape {
    pub mesh: TriangleMesh,
    pub mass: MassDiagonal,
    pub basis: SpectralBasis,
}

impl SpectralShape {
    pub fn new(mesh: TriangleMesh, k: usize) -> Result<Self> {
        let mass = vertex_areas(&mesh)?;
        let w = cotan_stiffness(&mesh)?;
        let basis = eigenbasis(&w, &mass, k)?;
        Ok(SpectralShape { mesh, mass, basis })
    }

    pub fn from_parts(mesh: TriangleMesh, basis: SpectralBasis) -> Result<Self> {
        let mass = vertex_areas(&mesh)?;
        if basis.n() != mesh.n_vertices() {
            return Err(Error::shape("basis does not match mesh"));
        }
        Ok(SpectralShape { mesh, mass, basis })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_template, TemplateKind};

    fn shape(kind: TemplateKind, level: usize, k: usize) -> SpectralShape {
        SpectralShape::new(make_template(kind, level).unwrap(), k).unwrap()
    }

    #[test]
    fn constant_mode_first() {
        let sh = shape(TemplateKind::Biped, 2, 10);
        let lam = sh.basis.lambda();
        assert!(lam[0] < 1e-8 * lam[9]);
        let c = 1.0 / sh.mass.total().sqrt();
        for v in 0..sh.basis.n() {
            assert!((sh.basis.phi()[(v, 0)].abs() - c).abs() < 1e-8 * c);
        }
        assert!(lam.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn project_identity_and_constant() {
        let sh = shape(TemplateKind::Biped, 2, 8);
        let a = project(&sh.basis, &sh.mass, sh.basis.phi()).unwrap();
        assert!((a - DMatrix::identity(8, 8)).amax() < 1e-8);
        let ones = DMatrix::from_element(sh.basis.n(), 1, 1.0);
        let a = project(&sh.basis, &sh.mass, &ones).unwrap();
        assert!((a[0].abs() - sh.mass.total().sqrt()).abs() < 1e-8);
        assert!(a.rows(1, 7).amax() < 1e-8);
    }

    #[test]
    fn reconstruct_trivial_cases() {
        let sh = shape(TemplateKind::Icosphere, 1, 6);
        let r = reconstruct(&sh.basis, &DMatrix::identity(6, 6)).unwrap();
        assert_eq!(&r, sh.basis.phi());
        let z = reconstruct(&sh.basis, &DMatrix::zeros(6, 2)).unwrap();
        assert_eq!(z.amax(), 0.0);
        assert!(matches!(
            reconstruct(&sh.basis, &DMatrix::zeros(5, 2)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            project(&sh.basis, &sh.mass, &DMatrix::zeros(3, 2)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn k_too_large() {
        let m = make_template(TemplateKind::Icosphere, 0).unwrap();
        let s = vertex_areas(&m).unwrap();
        let w = cotan_stiffness(&m).unwrap();
        assert!(matches!(eigenbasis(&w, &s, 12), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn eigenbasis_is_bitwise_deterministic() {
        let a = shape(TemplateKind::Biped, 2, 12);
        let b = shape(TemplateKind::Biped, 2, 12);
        assert_eq!(a.basis, b.basis);
    }

    #[test]
    fn hks_long_time_is_constant() {
        let sh = shape(TemplateKind::Biped, 2, 10);
        let h = heat_kernel_signature(&sh.basis, &sh.mass, &[1e6]).unwrap();
        let first = h[(0, 0)];
        assert!(h.column(0).iter().all(|x| (x - first).abs() < 1e-9 * first));
        let c = 1.0 / sh.mass.total().sqrt();
        assert!((first - c).abs() < 1e-9);
    }

    #[test]
    fn hks_rejects_nonpositive_time() {
        let sh = shape(TemplateKind::Icosphere, 1, 6);
        assert!(heat_kernel_signature(&sh.basis, &sh.mass, &[0.0]).is_err());
    }

    #[test]
    fn spec_block_roundtrip() {
        let sh = shape(TemplateKind::Icosphere, 1, 6);
        let bytes = sh.basis.encode().unwrap();
        assert_eq!(&bytes[..4], b"SPEC");
        let back = SpectralBasis::decode(&bytes).unwrap();
        assert_eq!(back, sh.basis);
        assert!(SpectralBasis::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
