//! Dataset, training, sampling and mask commands.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use specmatch::distill::distill_mask;
use specmatch::fmap::{gt_fmap, PointMap};
use specmatch::formats::{atomic_write, read_fmat, write_fmat, write_pmap};
use specmatch::mesh::io::{load_mesh_auto, write_off};
use specmatch::sgm::{load_checkpoint, sample_trajectory, save_checkpoint, train_denoiser, Denoiser};
use specmatch::spectral::SpectralShape;
use specmatch::synth::{synthetic_pair, DatasetEntry, DatasetManifest, DeformConfig, Deformer, GtMaps, MapDataset};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::heatmap::write_heatmap;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| specmatch::Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Lib(specmatch::Error::Format(format!("{}: {e}", path.display()))))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Lib(specmatch::Error::Io {
            path: dir.into(),
            source: e,
        })
    })
}

/// Resolves a manifest-relative path.
pub fn beside(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub seed: u64,
    pub mesh: String,
}

/// Written by `synth-data` as `shapes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapesManifest {
    pub deform: DeformConfig,
    pub template: String,
    pub shapes: Vec<ShapeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub mesh1: String,
    pub mesh2: String,
    /// PMAP from `mesh1` vertices to `mesh2` vertices.
    pub gt: String,
}

/// Written by `synth-data` as `pairs.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairsManifest {
    pub deform: DeformConfig,
    pub shuffled: bool,
    pub pairs: Vec<PairEntry>,
}

pub fn synth_data(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    create_dir(out)?;
    let deformer = Deformer::new(&cfg.deform)?;
    write_off(deformer.template(), out.join("template.off"))?;
    let mut shapes = Vec::with_capacity(cfg.synth.count);
    for s in 0..cfg.synth.count as u64 {
        let name = format!("shape_{s:05}.off");
        write_off(&deformer.deform(s)?, out.join(&name))?;
        shapes.push(ShapeEntry { seed: s, mesh: name });
    }
    write_json(
        &out.join("shapes.json"),
        &ShapesManifest {
            deform: cfg.deform.clone(),
            template: "template.off".into(),
            shapes,
        },
    )?;
    let mut pairs = Vec::with_capacity(cfg.synth.pairs);
    for p in 0..cfg.synth.pairs {
        let pair = synthetic_pair(&deformer, p as u64, cfg.synth.shuffle_pairs)?;
        let entry = PairEntry {
            mesh1: format!("pair_{p:03}_a.off"),
            mesh2: format!("pair_{p:03}_b.off"),
            gt: format!("pair_{p:03}_gt.pmap"),
        };
        write_off(&pair.mesh1, out.join(&entry.mesh1))?;
        write_off(&pair.mesh2, out.join(&entry.mesh2))?;
        write_pmap(out.join(&entry.gt), pair.gt.targets())?;
        pairs.push(entry);
    }
    write_json(
        &out.join("pairs.json"),
        &PairsManifest {
            deform: cfg.deform.clone(),
            shuffled: cfg.synth.shuffle_pairs,
            pairs,
        },
    )?;
    println!(
        "wrote {} shapes and {} pairs to {}",
        cfg.synth.count,
        cfg.synth.pairs,
        out.display()
    );
    Ok(())
}

/// Written by `build-dataset` as `dataset.json`, next to the stacked `maps.fmat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub k: usize,
    pub count: usize,
    pub signed: bool,
    /// All maps stacked vertically, `count * k` rows.
    pub maps: String,
    pub mean_diagonal_mass: f64,
    pub manifest: DatasetManifest,
}

pub fn build_dataset(cfg: &RunConfig, manifest_path: &Path, k: usize, signed: bool, out: &Path) -> CliResult<()> {
    let manifest: ShapesManifest = read_json(manifest_path)?;
    let template = SpectralShape::new(load_mesh_auto(beside(manifest_path, &manifest.template))?, k)?;
    let identity = PointMap::identity(template.mesh.n_vertices());
    let mut entries = vec![DatasetEntry {
        seed: None,
        mesh_path: Some(manifest.template.clone()),
        map_path: None,
    }];
    let mut maps = vec![gt_fmap(&template.basis, &template.basis, &identity, &template.mass)?.into_inner()];
    for e in &manifest.shapes {
        let shape = SpectralShape::new(load_mesh_auto(beside(manifest_path, &e.mesh))?, k)?;
        if shape.mesh.n_vertices() != template.mesh.n_vertices() {
            return Err(
                specmatch::Error::ShapeMismatch(format!("{} is not registered to the template", e.mesh)).into(),
            );
        }
        maps.push(gt_fmap(&template.basis, &shape.basis, &identity, &shape.mass)?.into_inner());
        entries.push(DatasetEntry {
            seed: Some(e.seed),
            mesh_path: Some(e.mesh.clone()),
            map_path: None,
        });
    }
    let gt = GtMaps {
        manifest: DatasetManifest {
            deform: manifest.deform.clone(),
            k,
            entries,
        },
        maps,
    };
    let data = if signed {
        MapDataset::signed_random_flips(&gt, cfg.seed)?
    } else {
        MapDataset::absolute(&gt)?
    };
    create_dir(out)?;
    write_fmat(out.join("maps.fmat"), &stack(data.maps()))?;
    write_json(
        &out.join("dataset.json"),
        &DatasetFile {
            k,
            count: data.len(),
            signed,
            maps: "maps.fmat".into(),
            mean_diagonal_mass: data.mean_diagonal_mass(),
            manifest: gt.manifest,
        },
    )?;
    println!("wrote {} maps of order {k} to {}", data.len(), out.display());
    Ok(())
}

fn stack(maps: &[DMatrix<f64>]) -> DMatrix<f64> {
    let k = maps.first().map_or(0, |m| m.nrows());
    let mut out = DMatrix::zeros(k * maps.len(), k);
    for (i, m) in maps.iter().enumerate() {
        out.view_mut((i * k, 0), (k, k)).copy_from(m);
    }
    out
}

pub fn load_dataset(dir: &Path) -> CliResult<(DatasetFile, MapDataset)> {
    let meta: DatasetFile = read_json(&dir.join("dataset.json"))?;
    let all = read_fmat(dir.join(&meta.maps))?;
    let k = meta.k;
    if k == 0 || all.ncols() != k || all.nrows() != k * meta.count {
        return Err(specmatch::Error::ShapeMismatch(format!(
            "maps.fmat is {}x{}, expected {} maps of order {k}",
            all.nrows(),
            all.ncols(),
            meta.count
        ))
        .into());
    }
    let maps = (0..meta.count)
        .map(|i| all.view((i * k, 0), (k, k)).into_owned())
        .collect();
    Ok((meta, MapDataset::new(maps)?))
}

#[derive(Serialize)]
struct TrainReport<'a> {
    dataset: String,
    count: usize,
    k: usize,
    config: &'a RunConfig,
    epoch_losses: Vec<f64>,
}

pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path) -> CliResult<()> {
    let (meta, data) = load_dataset(dataset)?;
    let dcfg = cfg.denoiser.with_order(data.order());
    let (model, log) = train_denoiser(&data, &dcfg, &cfg.schedule, &cfg.train_options())?;
    save_checkpoint(&model, out)?;
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.json");
    write_json(
        Path::new(&log_path),
        &TrainReport {
            dataset: dataset.display().to_string(),
            count: meta.count,
            k: meta.k,
            config: cfg,
            epoch_losses: log.epoch_losses.clone(),
        },
    )?;
    let last = log.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!("trained {} epochs, final loss {last:.6}", log.epoch_losses.len());
    Ok(())
}

#[derive(Serialize)]
struct SampleReport {
    checkpoint: String,
    seed: u64,
    steps: usize,
    samples: Vec<String>,
    frames: Vec<Vec<String>>,
}

/// Frame indices `0, ..., last` spread evenly.
fn frame_indices(len: usize, frames: usize) -> Vec<usize> {
    if len == 0 || frames == 0 {
        return Vec::new();
    }
    if frames == 1 || len == 1 {
        return vec![len - 1];
    }
    let mut idx: Vec<usize> = (0..frames).map(|f| f * (len - 1) / (frames - 1)).collect();
    idx.dedup();
    idx
}

pub fn sample(
    checkpoint: &Path,
    count: usize,
    seed: u64,
    steps: Option<usize>,
    frames: usize,
    out: &Path,
) -> CliResult<()> {
    let model = load_checkpoint(checkpoint)?;
    let schedule = model.schedule().clone();
    let steps = steps.unwrap_or(schedule.steps);
    let n = model.config().n;
    create_dir(out)?;
    let mut report = SampleReport {
        checkpoint: checkpoint.display().to_string(),
        seed,
        steps,
        samples: Vec::new(),
        frames: Vec::new(),
    };
    for i in 0..count {
        let traj = sample_trajectory(&model, n, &schedule, steps, specmatch::synth::mix_seed(seed, i as u64))?;
        let name = format!("sample_{i:03}.fmat");
        write_fmat(out.join(&name), traj.last().expect("trajectory is nonempty"))?;
        let mut names = Vec::new();
        for f in frame_indices(traj.len(), frames) {
            let stem = format!("sample_{i:03}_step_{f:03}");
            write_heatmap(out, &stem, &traj[f])?;
            names.push(format!("{stem}.ppm"));
        }
        report.samples.push(name);
        report.frames.push(names);
    }
    write_json(&out.join("samples.json"), &report)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct MaskEntry {
    sigma: f64,
    mask: String,
    heatmap: String,
}

#[derive(Serialize)]
struct MaskReport {
    checkpoint: String,
    fmap: String,
    samples: usize,
    seed: u64,
    masks: Vec<MaskEntry>,
}

pub fn distill(checkpoint: &Path, fmap: &Path, sigmas: &[f64], samples: usize, seed: u64, out: &Path) -> CliResult<()> {
    let model = load_checkpoint(checkpoint)?;
    let c = read_fmat(fmap)?;
    if Some(c.nrows()) != model.order() || !c.is_square() {
        return Err(specmatch::Error::ShapeMismatch(format!(
            "map is {}x{} but the checkpoint models order {}",
            c.nrows(),
            c.ncols(),
            model.config().n
        ))
        .into());
    }
    create_dir(out)?;
    let mut report = MaskReport {
        checkpoint: checkpoint.display().to_string(),
        fmap: fmap.display().to_string(),
        samples,
        seed,
        masks: Vec::new(),
    };
    for &sigma in sigmas {
        let mask = distill_mask(&model, &c, sigma, samples, seed)?;
        let stem = format!("mask_sigma_{sigma}");
        write_fmat(out.join(format!("{stem}.fmat")), mask.matrix())?;
        write_heatmap(out, &stem, mask.matrix())?;
        report.masks.push(MaskEntry {
            sigma,
            mask: format!("{stem}.fmat"),
            heatmap: format!("{stem}.ppm"),
        });
    }
    write_json(&out.join("masks.json"), &report)?;
    println!("wrote {} masks to {}", sigmas.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_cover_both_ends() {
        assert_eq!(frame_indices(65, 5), vec![0, 16, 32, 48, 64]);
        assert_eq!(frame_indices(3, 8), vec![0, 1, 2]);
        assert_eq!(frame_indices(10, 1), vec![9]);
        assert!(frame_indices(10, 0).is_empty());
    }

    #[test]
    fn stack_and_split_roundtrip() {
        let maps: Vec<DMatrix<f64>> = (0..3)
            .map(|i| DMatrix::from_fn(2, 2, |r, c| (i * 4 + r * 2 + c) as f64))
            .collect();
        let s = stack(&maps);
        assert_eq!(s.shape(), (6, 2));
        assert_eq!(s[(4, 1)], 9.0);
    }
}
