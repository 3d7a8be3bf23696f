use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;
use specmatch::formats::atomic_write;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapInfo {
    pub rows: usize,
    pub cols: usize,
    /// Value drawn as white; zero is black.
    pub max: f64,
}

/// Binary P6 image of `|m|`, linear gray over `[0, max |m|]`, one pixel per entry.
pub fn ppm(m: &DMatrix<f64>) -> (Vec<u8>, HeatmapInfo) {
    let max = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let mut out = format!("P6\n{} {}\n255\n", m.ncols(), m.nrows()).into_bytes();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let g = if max > 0.0 {
                (m[(i, j)].abs() / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.extend_from_slice(&[g, g, g]);
        }
    }
    let info = HeatmapInfo {
        rows: m.nrows(),
        cols: m.ncols(),
        max,
    };
    (out, info)
}

/// Writes `<stem>.ppm` and the `<stem>.json` sidecar.
pub fn write_heatmap(dir: &Path, stem: &str, m: &DMatrix<f64>) -> CliResult<()> {
    let (bytes, info) = ppm(m);
    atomic_write(&dir.join(format!("{stem}.ppm")), &bytes)?;
    atomic_write(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(&info)?)?;
    Ok(())
}
