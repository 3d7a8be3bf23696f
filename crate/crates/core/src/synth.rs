//! Registered families of deformed template meshes with exact ground truth.
//!
//! Every deformation keeps the template connectivity, so vertex `i` of a
//! sample corresponds to vertex `i` of the template and of every other sample.

use std::collections::HashMap;
use std::str::FromStr;

use nalgebra::{DMatrix, Point3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{gt_fmap, PointMap};
use crate::mesh::TriangleMesh;
use crate::spectral::SpectralShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// Unit icosphere, `10 * 4^level + 2` vertices.
    Icosphere,
    /// Icosphere warped into a torso with head, arms and legs.
    Biped,
    /// Flat unit square, `(2^level + 1)^2` vertices.
    Plane,
    /// Unit square with smooth height bumps.
    BumpyPlane,
}

impl FromStr for TemplateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icosphere" => Ok(TemplateKind::Icosphere),
            "biped" | "capsule-biped" | "stick-figure" => Ok(TemplateKind::Biped),
            "plane" => Ok(TemplateKind::Plane),
            "bumpy-plane" => Ok(TemplateKind::BumpyPlane),
            other => Err(Error::InvalidArgument(format!("unknown template kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TemplateKind::Icosphere => "icosphere",
            TemplateKind::Biped => "biped",
            TemplateKind::Plane => "plane",
            TemplateKind::BumpyPlane => "bumpy-plane",
        })
    }
}

fn icosphere(level: usize) -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| Vector3::new(p[0], p[1], p[2]).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vector3<f64>>| -> usize {
            let key = if a < b { (a, b) } else { (b, a) };
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts.into_iter().map(Point3::from).collect(), faces)
}

/// Radial limb bumps on the unit sphere, then an anisotropic body scaling.
fn biped(level: usize) -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
    let (verts, faces) = icosphere(level);
    // (direction, length, angular width)
    let limbs: [([f64; 3], f64, f64); 5] = [
        ([0.0, 0.0, 1.0], 0.25, 0.25),    // head
        ([1.0, 0.0, 0.55], 0.55, 0.22),   // raised arm
        ([-1.0, 0.0, -0.1], 0.50, 0.22),  // lowered arm
        ([0.35, 0.0, -1.0], 0.50, 0.25),  // leg
        ([-0.45, 0.1, -1.0], 0.45, 0.25), // leg
    ];
    let limbs: Vec<(Vector3<f64>, f64, f64)> = limbs
        .iter()
        .map(|(d, a, w)| (Vector3::new(d[0], d[1], d[2]).normalize(), *a, *w))
        .collect();
    let verts = verts
        .into_iter()
        .map(|p| {
            let u = p.coords;
            let r = 1.0
                + limbs
                    .iter()
                    .map(|(d, a, w)| a * (-(1.0 - u.dot(d)) / w).exp())
                    .sum::<f64>();
            let q = u * r;
            Point3::new(0.5 * q.x, 0.4 * q.y, 0.9 * q.z)
        })
        .collect();
    (verts, faces)
}

fn plane(level: usize, bumps: bool) -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
    let m = (1usize << level) + 1;
    let h = 1.0 / (m - 1) as f64;
    let mut verts = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            let (x, y) = (i as f64 * h, j as f64 * h);
            let z = if bumps {
                0.08 * (-((x - 0.3).powi(2) + (y - 0.35).powi(2)) / 0.02).exp()
                    - 0.06 * (-((x - 0.7).powi(2) + (y - 0.6).powi(2)) / 0.015).exp()
                    + 0.03 * (2.0 * std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).sin()
            } else {
                0.0
            };
            verts.push(Point3::new(x, y, z));
        }
    }
    let mut faces = Vec::with_capacity(2 * (m - 1) * (m - 1));
    for j in 0..m - 1 {
        for i in 0..m - 1 {
            let a = j * m + i;
            let (b, c, d) = (a + 1, a + m, a + m + 1);
            if (i + j) % 2 == 0 {
                faces.push([a, b, d]);
                faces.push([a, d, c]);
            } else {
                faces.push([a, b, c]);
                faces.push([b, d, c]);
            }
        }
    }
    (verts, faces)
}

/// Deterministic template mesh of the given kind and refinement level.
pub fn make_template(kind: TemplateKind, level: usize) -> Result<TriangleMesh> {
    if level > 6 {
        return Err(Error::InvalidArgument(format!("level {level} too large")));
    }
    let (v, f) = match kind {
        TemplateKind::Icosphere => icosphere(level),
        TemplateKind::Biped => biped(level),
        TemplateKind::Plane => plane(level.max(1), false),
        TemplateKind::BumpyPlane => plane(level.max(1), true),
    };
    TriangleMesh::new(v, f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformConfig {
    pub kind: TemplateKind,
    pub level: usize,
    /// Number of eigenfunction modes mixed per sample.
    pub modes: usize,
    /// Displacement bound as a fraction of the bounding-box diagonal.
    pub epsilon: f64,
    pub seed: u64,
    /// Largest accepted relative edge-length change.
    pub max_distortion: f64,
    pub max_retries: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        DeformConfig {
            kind: TemplateKind::Biped,
            level: 3,
            modes: 8,
            epsilon: 0.05,
            seed: 0,
            max_distortion: 0.25,
            max_retries: 10,
        }
    }
}

/// Lowest and highest (1-based) eigenfunction indices used as displacement modes.
pub const MODE_RANGE: (usize, usize) = (2, 12);

/// Template with the cached data needed to draw deformations.
#[derive(Debug, Clone)]
pub struct Deformer {
    template: TriangleMesh,
    normals: Vec<Vector3<f64>>,
    modes: Vec<Vec<f64>>,
    diag: f64,
    cfg: DeformConfig,
}

impl Deformer {
    pub fn new(cfg: &DeformConfig) -> Result<Self> {
        let template = make_template(cfg.kind, cfg.level)?;
        Self::with_template(template, cfg)
    }

    pub fn with_template(template: TriangleMesh, cfg: &DeformConfig) -> Result<Self> {
        let shape = SpectralShape::new(template, MODE_RANGE.1)?;
        let phi = shape.basis.phi();
        let modes = (MODE_RANGE.0 - 1..MODE_RANGE.1)
            .map(|j| {
                let col: Vec<f64> = phi.column(j).iter().copied().collect();
                let max = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                col.into_iter().map(|x| x / max).collect()
            })
            .collect();
        let template = shape.mesh;
        Ok(Deformer {
            normals: template.vertex_normals(),
            diag: template.bbox_diagonal(),
            template,
            modes,
            cfg: cfg.clone(),
        })
    }

    pub fn template(&self) -> &TriangleMesh {
        &self.template
    }

    pub fn config(&self) -> &DeformConfig {
        &self.cfg
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<Point3<f64>> {
        let b = self.cfg.modes.max(1);
        let amp = self.cfg.epsilon * self.diag / b as f64;
        let picks: Vec<(usize, f64)> = (0..self.cfg.modes)
            .map(|_| {
                let j = rng.random_range(0..self.modes.len());
                let c = if self.cfg.epsilon > 0.0 {
                    rng.random_range(-1.0..=1.0)
                } else {
                    0.0
                };
                (j, c * amp)
            })
            .collect();
        self.template
            .vertices()
            .iter()
            .enumerate()
            .map(|(v, p)| {
                let h: f64 = picks.iter().map(|&(j, c)| c * self.modes[j][v]).sum();
                p + self.normals[v] * h
            })
            .collect()
    }

    /// A deformed copy of the template with identical connectivity.
    pub fn deform(&self, sample_seed: u64) -> Result<TriangleMesh> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.cfg.seed, sample_seed));
        let mut last = f64::NAN;
        for _ in 0..=self.cfg.max_retries {
            let verts = self.draw(&mut rng);
            let candidate = match self.template.with_vertices(verts) {
                Ok(m) => m,
                Err(_) => continue,
            };
            last = edge_distortion(&self.template, &candidate);
            if last < self.cfg.max_distortion {
                return Ok(candidate);
            }
        }
        Err(Error::DistortionBoundExceeded {
            attempts: self.cfg.max_retries + 1,
            distortion: last,
        })
    }
}

/// SplitMix64-style mixing so nearby seeds give unrelated streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Largest relative change of any edge length between two meshes sharing connectivity.
pub fn edge_distortion(a: &TriangleMesh, b: &TriangleMesh) -> f64 {
    a.edges()
        .iter()
        .map(|&(i, j)| {
            let la = (a.vertices()[i] - a.vertices()[j]).norm();
            let lb = (b.vertices()[i] - b.vertices()[j]).norm();
            (lb / la - 1.0).abs()
        })
        .fold(0.0, f64::max)
}

pub fn deform(template: &TriangleMesh, cfg: &DeformConfig, sample_seed: u64) -> Result<TriangleMesh> {
    Deformer::with_template(template.clone(), cfg)?.deform(sample_seed)
}

/// Base for pair sample seeds, far from the `0..count` seeds used for training shapes.
pub const PAIR_SEED_BASE: u64 = 1 << 40;

/// Two deformations of one template and the vertex map between them.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub mesh1: TriangleMesh,
    pub mesh2: TriangleMesh,
    /// Sends vertex `i` of `mesh1` to its counterpart in `mesh2`.
    pub gt: PointMap,
}

/// Pair number `index`. With `shuffle` the second mesh's vertices are
/// reordered so identity correspondence cannot be read off the indices.
pub fn synthetic_pair(deformer: &Deformer, index: u64, shuffle: bool) -> Result<SyntheticPair> {
    let base = PAIR_SEED_BASE + 2 * index;
    let mesh1 = deformer.deform(base)?;
    let mesh2 = deformer.deform(base + 1)?;
    let n = mesh1.n_vertices();
    if !shuffle {
        return Ok(SyntheticPair {
            mesh1,
            mesh2,
            gt: PointMap::identity(n),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
        deformer.cfg.seed ^ PAIR_SEED_BASE,
        index,
    )));
    let mesh2 = mesh2.permuted(&order)?;
    let mut inv = vec![0; n];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    Ok(SyntheticPair {
        mesh1,
        mesh2,
        gt: PointMap::new(inv, n)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// `None` marks the template-to-template sanity row.
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub deform: DeformConfig,
    pub k: usize,
    pub entries: Vec<DatasetEntry>,
}

/// Ground-truth template-to-shape maps, signed, in manifest order.
#[derive(Debug, Clone)]
pub struct GtMaps {
    pub manifest: DatasetManifest,
    pub maps: Vec<DMatrix<f64>>,
}

/// Training maps for the spectral denoiser.
#[derive(Debug, Clone)]
pub struct MapDataset {
    n: usize,
    maps: Vec<DMatrix<f64>>,
}

impl MapDataset {
    pub fn new(maps: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = maps.first().ok_or(Error::EmptyDataset)?.nrows();
        for m in &maps {
            if m.nrows() != n || m.ncols() != n {
                return Err(Error::shape(format!("dataset maps must all be {n}x{n}")));
            }
            if m.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("dataset map entry".into()));
            }
        }
        Ok(MapDataset { n, maps })
    }

    /// Elementwise absolute values of the ground-truth maps.
    pub fn absolute(gt: &GtMaps) -> Result<Self> {
        Self::new(gt.maps.iter().map(|m| m.abs()).collect())
    }

    /// Signed maps with each shape-side eigenvector sign drawn at random,
    /// mimicking eigensolvers that return arbitrary signs.
    pub fn signed_random_flips(gt: &GtMaps, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps = gt
            .maps
            .iter()
            .map(|m| {
                let mut m = m.clone();
                for mut row in m.row_iter_mut() {
                    if rng.random_bool(0.5) {
                        row.neg_mut();
                    }
                }
                m
            })
            .collect();
        Self::new(maps)
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn maps(&self) -> &[DMatrix<f64>] {
        &self.maps
    }

    /// Mean over maps of `sum |diag| / sum |all|`.
    pub fn mean_diagonal_mass(&self) -> f64 {
        self.maps.iter().map(diagonal_mass).sum::<f64>() / self.maps.len() as f64
    }
}

pub fn diagonal_mass(m: &DMatrix<f64>) -> f64 {
    let total: f64 = m.iter().map(|x| x.abs()).sum();
    let diag: f64 = (0..m.nrows().min(m.ncols())).map(|i| m[(i, i)].abs()).sum();
    diag / total.max(f64::MIN_POSITIVE)
}

/// Fraction of squared Frobenius mass within `|i - j| <= band`.
pub fn band_mass(m: &DMatrix<f64>, band: usize) -> f64 {
    let mut inside = 0.0;
    let mut total = 0.0;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let e = m[(i, j)] * m[(i, j)];
            total += e;
            if i.abs_diff(j) <= band {
                inside += e;
            }
        }
    }
    inside / total.max(f64::MIN_POSITIVE)
}

/// Template-to-shape ground-truth maps `C = phi_shape^T S_shape phi_template` at order `k`.
pub fn build_fmap_dataset(cfg: &DeformConfig, count: usize, k: usize, include_self: bool) -> Result<GtMaps> {
    let deformer = Deformer::new(cfg)?;
    let template = SpectralShape::new(deformer.template().clone(), k)?;
    let identity = PointMap::identity(template.mesh.n_vertices());
    let mut entries = Vec::with_capacity(count + include_self as usize);
    let mut maps = Vec::with_capacity(entries.capacity());
    if include_self {
        entries.push(DatasetEntry {
            seed: None,
            mesh_path: None,
            map_path: None,
        });
        maps.push(gt_fmap(&template.basis, &template.basis, &identity, &template.mass)?.into_inner());
    }
    for s in 0..count as u64 {
        let mesh = deformer.deform(s)?;
        let shape = SpectralShape::new(mesh, k)?;
        let c = gt_fmap(&template.basis, &shape.basis, &identity, &shape.mass)?;
        entries.push(DatasetEntry {
            seed: Some(s),
            mesh_path: None,
            map_path: None,
        });
        maps.push(c.into_inner());
    }
    Ok(GtMaps {
        manifest: DatasetManifest {
            deform: cfg.clone(),
            k,
            entries,
        },
        maps,
    })
}
