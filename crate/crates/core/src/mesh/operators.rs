use std::ops::Index;

use nalgebra::{DMatrix, DVector};

use super::TriangleMesh;
use crate::error::{Error, Result};

/// Lumped per-vertex areas, the diagonal of the mass matrix `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassDiagonal(Vec<f64>);

impl MassDiagonal {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::DegenerateMesh {
                face: i,
                reason: format!("vertex {i} has non-positive lumped area"),
            });
        }
        Ok(MassDiagonal(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }
}

impl Index<usize> for MassDiagonal {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Symmetric sparse matrix in compressed-row form with both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSymMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed.
    /// Each off-diagonal triplet is mirrored, so callers pass one triangle.
    pub fn from_upper_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut full: Vec<(usize, usize, f64)> = Vec::with_capacity(triplets.len() * 2);
        for &(i, j, v) in triplets {
            full.push((i, j, v));
            if i != j {
                full.push((j, i, v));
            }
        }
        full.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(full.len());
        let mut vals: Vec<f64> = Vec::with_capacity(full.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in full {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(j);
                vals.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSymMatrix { n, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(p) => self.vals[r.start + p],
            Err(_) => 0.0,
        }
    }

    /// All stored entries `(row, col, value)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |(j, v)| (i, j, v)))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            for i in 0..self.n {
                out[(i, c)] = self.row(i).map(|(j, v)| v * x[(j, c)]).sum();
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.entries() {
            m[(i, j)] = v;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.vals.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Barycentric lumping: each vertex receives a third of every incident face.
pub fn vertex_areas(mesh: &TriangleMesh) -> Result<MassDiagonal> {
    let mut areas = vec![0.0; mesh.n_vertices()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let a = mesh.face_area(fi) / 3.0;
        for &v in f {
            areas[v] += a;
        }
    }
    MassDiagonal::new(areas)
}

/// Cotangent stiffness matrix, positive semidefinite with zero row sums.
///
/// `W_ij = -(cot a_ij + cot b_ij) / 2` for each edge and `W_ii = -sum_j W_ij`.
pub fn cotan_stiffness(mesh: &TriangleMesh) -> Result<SparseSymMatrix> {
    let v = mesh.vertices();
    let mut triplets = Vec::with_capacity(mesh.n_faces() * 6);
    let mut diag = vec![0.0; mesh.n_vertices()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        for corner in 0..3 {
            let o = f[corner];
            let i = f[(corner + 1) % 3];
            let j = f[(corner + 2) % 3];
            let u = v[i] - v[o];
            let w = v[j] - v[o];
            let cross = u.cross(&w).norm();
            if !(cross > 0.0) {
                return Err(Error::DegenerateMesh {
                    face: fi,
                    reason: "undefined cotangent".into(),
                });
            }
            let half_cot = 0.5 * u.dot(&w) / cross;
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            triplets.push((a, b, -half_cot));
            diag[i] += half_cot;
            diag[j] += half_cot;
        }
    }
    for (i, d) in diag.into_iter().enumerate() {
        triplets.push((i, i, d));
    }
    Ok(SparseSymMatrix::from_upper_triplets(mesh.n_vertices(), &triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_template, TemplateKind};
    use nalgebra::Point3;

    fn equilateral() -> TriangleMesh {
        TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn equilateral_areas_split_evenly() {
        let m = equilateral();
        let s = vertex_areas(&m).unwrap();
        let a = m.total_area();
        for i in 0..3 {
            assert!((s[i] - a / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn equilateral_cotan_entries() {
        let w = cotan_stiffness(&equilateral()).unwrap();
        let expected = -1.0 / (2.0 * 3f64.sqrt());
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            assert!((w.get(i, j) - expected).abs() < 1e-14);
            assert!((w.get(j, i) - expected).abs() < 1e-14);
        }
        assert!((w.get(0, 0) + 2.0 * expected).abs() < 1e-14);
    }

    #[test]
    fn flat_square_total_area_is_one() {
        let m = make_template(TemplateKind::Plane, 3).unwrap();
        let s = vertex_areas(&m).unwrap();
        assert!((s.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sphere_area_close_to_four_pi() {
        let m = make_template(TemplateKind::Icosphere, 3).unwrap();
        let s = vertex_areas(&m).unwrap();
        let rel = (s.total() - 4.0 * std::f64::consts::PI).abs() / (4.0 * std::f64::consts::PI);
        assert!(rel < 0.02, "rel = {rel}");
        assert!((s.total() - m.total_area()).abs() < 1e-9 * m.total_area());
    }

    #[test]
    fn stiffness_kills_constants_and_is_symmetric() {
        let m = make_template(TemplateKind::Biped, 2).unwrap();
        let w = cotan_stiffness(&m).unwrap();
        let ones = vec![1.0; m.n_vertices()];
        let r = w.mul_vec(&ones);
        let max = w.max_abs();
        assert!(r.iter().all(|x| x.abs() < 1e-9 * max));
        for (i, j, v) in w.entries() {
            assert!((v - w.get(j, i)).abs() <= 1e-12 * v.abs().max(1e-300));
        }
    }
}
