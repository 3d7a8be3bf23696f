//! Triangle meshes and the discrete operators built on them.
//!
//! The Laplace-Beltrami operator is discretized as `S^-1 W` where `S` is the
//! lumped (barycentric) vertex-area matrix and `W` the cotangent stiffness
//! matrix. Both are assembled here; the eigenproblem lives in
//! [`crate::spectral`].

mod geodesic;
pub mod io;
mod operators;

pub use geodesic::{geodesic_distances, GeodesicTable};
pub use io::{load_mesh, MeshFormat};
pub use operators::{cotan_stiffness, vertex_areas, MassDiagonal, SparseSymMatrix};

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Relative area below which a face is rejected, scaled by the squared
/// bounding-box diagonal.
pub const DEGENERATE_AREA_RATIO: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[usize; 3]>,
}

impl TriangleMesh {
    /// Builds a mesh, rejecting out-of-range indices, repeated corners and
    /// faces with (near-)zero area.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx >= n {
                    return Err(Error::IndexOutOfRange {
                        face: fi,
                        index: idx,
                        n,
                    });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::DegenerateMesh {
                    face: fi,
                    reason: "repeated vertex index".into(),
                });
            }
        }
        let mesh = TriangleMesh { vertices, faces };
        let diag = mesh.bbox_diagonal();
        let threshold = DEGENERATE_AREA_RATIO * diag * diag;
        for fi in 0..mesh.faces.len() {
            let area = mesh.face_area(fi);
            if !area.is_finite() || area <= threshold {
                return Err(Error::DegenerateMesh {
                    face: fi,
                    reason: format!("area {area:e} below threshold {threshold:e}"),
                });
            }
        }
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn face_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.faces[face];
        let (pa, pb, pc) = (&self.vertices[a], &self.vertices[b], &self.vertices[c]);
        0.5 * (pb - pa).cross(&(pc - pa)).norm()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    pub fn bbox_diagonal(&self) -> f64 {
        if self.vertices.is_empty() {
            return 0.0;
        }
        let mut lo = self.vertices[0].coords;
        let mut hi = lo;
        for v in &self.vertices {
            lo = lo.inf(&v.coords);
            hi = hi.sup(&v.coords);
        }
        (hi - lo).norm()
    }

    pub fn centroid(&self) -> Point3<f64> {
        let sum: Vector3<f64> = self.vertices.iter().map(|p| p.coords).sum();
        Point3::from(sum / self.vertices.len().max(1) as f64)
    }

    /// Undirected edges `(i, j)` with `i < j`, sorted, each listed once.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|&[a, b, c]| [(a, b), (b, c), (c, a)])
            .map(|(i, j)| if i < j { (i, j) } else { (j, i) })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        let sum: f64 = edges
            .iter()
            .map(|&(i, j)| (self.vertices[i] - self.vertices[j]).norm())
            .sum();
        sum / edges.len().max(1) as f64
    }

    /// Area-weighted vertex normals (unit length).
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for &[a, b, c] in &self.faces {
            let n = (self.vertices[b] - self.vertices[a]).cross(&(self.vertices[c] - self.vertices[a]));
            normals[a] += n;
            normals[b] += n;
            normals[c] += n;
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }

    /// Same connectivity with new positions; revalidates face areas.
    pub fn with_vertices(&self, vertices: Vec<Point3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(format!(
                "expected {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        TriangleMesh::new(vertices, self.faces.clone())
    }

    /// Uniformly rescaled about the centroid so the surface area is one.
    pub fn normalized_to_unit_area(&self) -> Self {
        let scale = 1.0 / self.total_area().sqrt();
        let c = self.centroid();
        let vertices = self.vertices.iter().map(|p| Point3::from((p - c) * scale)).collect();
        TriangleMesh {
            vertices,
            faces: self.faces.clone(),
        }
    }

    /// Copy with vertices relabelled so that new vertex `i` is old vertex `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.vertices.len();
        if order.len() != n {
            return Err(Error::shape("permutation length differs from vertex count"));
        }
        let mut inverse = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || inverse[old] != usize::MAX {
                return Err(Error::InvalidArgument("order is not a permutation".into()));
            }
            inverse[old] = new;
        }
        let vertices = order.iter().map(|&o| self.vertices[o]).collect();
        let faces = self
            .faces
            .iter()
            .map(|f| [inverse[f[0]], inverse[f[1]], inverse[f[2]]])
            .collect();
        Ok(TriangleMesh { vertices, faces })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tri() -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
        (
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
    }

    #[test]
    fn rejects_out_of_range_index() {
        let (v, _) = tri();
        let err = TriangleMesh::new(v, vec![[0, 1, 7]]).unwrap_err();
        assert!(matches!(err, Error::IndexOutOfRange { index: 7, .. }));
    }

    #[test]
    fn rejects_repeated_corner() {
        let (v, _) = tri();
        let err = TriangleMesh::new(v, vec![[0, 1, 1]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateMesh { .. }));
    }

    #[test]
    fn rejects_collinear_face() {
        let v = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        let err = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateMesh { .. }));
    }

    #[test]
    fn unit_area_normalization() {
        let (v, f) = tri();
        let m = TriangleMesh::new(v, f).unwrap().normalized_to_unit_area();
        assert!((m.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn permutation_roundtrip_preserves_area() {
        let (v, f) = tri();
        let m = TriangleMesh::new(v, f).unwrap();
        let p = m.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.vertices()[0], m.vertices()[2]);
        assert!((p.total_area() - m.total_area()).abs() < 1e-15);
    }
}
