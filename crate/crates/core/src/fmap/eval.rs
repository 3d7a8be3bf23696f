use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::PointMap;
use crate::error::{Error, Result};
use crate::mesh::{geodesic_distances, GeodesicTable, TriangleMesh};

/// Per-vertex geodesic errors normalized by the square root of the target area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicErrors {
    pub per_vertex: Vec<f64>,
    pub mean: f64,
    /// `100 * mean`, the scale used in benchmark tables.
    pub mean_x100: f64,
}

impl GeodesicErrors {
    fn from_errors(per_vertex: Vec<f64>) -> Self {
        let mean = if per_vertex.is_empty() {
            0.0
        } else {
            per_vertex.iter().sum::<f64>() / per_vertex.len() as f64
        };
        GeodesicErrors {
            per_vertex,
            mean,
            mean_x100: 100.0 * mean,
        }
    }
}

fn check(pred: &PointMap, gt: &PointMap, n2: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "predicted map has {} entries, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    if let Some(&t) = pred.targets().iter().chain(gt.targets()).find(|&&t| t >= n2) {
        return Err(Error::InvalidArgument(format!(
            "target {t} out of range for {n2} vertices"
        )));
    }
    Ok(())
}

/// Runs one Dijkstra per distinct ground-truth target.
pub fn geodesic_error(pred: &PointMap, gt: &PointMap, mesh2: &TriangleMesh) -> Result<GeodesicErrors> {
    check(pred, gt, mesh2.n_vertices())?;
    let scale = mesh2.total_area().sqrt();
    let mut rows: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut errors = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.targets().iter().zip(gt.targets()) {
        if p == g {
            errors.push(0.0);
            continue;
        }
        if !rows.contains_key(&g) {
            rows.insert(g, geodesic_distances(mesh2, g)?);
        }
        errors.push(rows[&g][p] / scale);
    }
    Ok(GeodesicErrors::from_errors(errors))
}

/// Same as [`geodesic_error`] with precomputed all-pairs distances.
pub fn geodesic_error_with_table(
    pred: &PointMap,
    gt: &PointMap,
    table: &GeodesicTable,
    area2: f64,
) -> Result<GeodesicErrors> {
    check(pred, gt, table.n())?;
    let scale = area2.sqrt();
    let errors = pred
        .targets()
        .iter()
        .zip(gt.targets())
        .map(|(&p, &g)| table.get(g, p) / scale)
        .collect();
    Ok(GeodesicErrors::from_errors(errors))
}

/// Fraction of errors `<= t` for each threshold `t`.
pub fn cumulative_curve(errors: &[f64], thresholds: &[f64]) -> Vec<f64> {
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    thresholds
        .iter()
        .map(|&t| {
            if sorted.is_empty() {
                return 1.0;
            }
            sorted.partition_point(|&e| e <= t) as f64 / sorted.len() as f64
        })
        .collect()
}
