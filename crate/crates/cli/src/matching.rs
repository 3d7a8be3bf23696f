//! Matching, evaluation, ablation and baseline commands.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use specmatch::distill::{
    ini_zoomout, prepare_pair, zero_shot_match_prepared, AblationMode, InitMask, MatchReport, PreparedPair,
};
use specmatch::fmap::{cumulative_curve, geodesic_error, PointMap};
use specmatch::formats::{atomic_write, read_pmap, write_fmat, write_pmap};
use specmatch::mesh::io::load_mesh_auto;
use specmatch::mesh::TriangleMesh;
use specmatch::sgm::{load_checkpoint, SpectralDenoiser};
use specmatch::synth::mix_seed;

use crate::config::RunConfig;
use crate::data::{beside, create_dir, read_json, write_json, PairsManifest};
use crate::error::{CliError, CliResult};
use crate::heatmap::write_heatmap;

fn load_gt(path: &Path, mesh1: &TriangleMesh, mesh2: &TriangleMesh) -> CliResult<PointMap> {
    let idx = read_pmap(path)?;
    if idx.len() != mesh1.n_vertices() {
        return Err(specmatch::Error::ShapeMismatch(format!(
            "ground truth has {} entries, mesh1 has {} vertices",
            idx.len(),
            mesh1.n_vertices()
        ))
        .into());
    }
    Ok(PointMap::new(idx, mesh2.n_vertices())?)
}

/// Priors for the two map statistics; the signed one is only needed by
/// modes that denoise signed maps.
pub struct Priors {
    pub absolute: SpectralDenoiser,
    pub signed: Option<SpectralDenoiser>,
}

impl Priors {
    pub fn load(checkpoint: &Path, signed: Option<&Path>) -> CliResult<Self> {
        Ok(Priors {
            absolute: load_checkpoint(checkpoint)?,
            signed: signed.map(load_checkpoint).transpose()?,
        })
    }

    fn for_mode(&self, mode: AblationMode) -> CliResult<&SpectralDenoiser> {
        if mode.signed_prior() {
            self.signed
                .as_ref()
                .ok_or_else(|| CliError::usage(format!("mode {mode} needs --signed-checkpoint")))
        } else {
            Ok(&self.absolute)
        }
    }
}

#[derive(Serialize)]
struct MatchFile<'a> {
    result: MatchReport,
    config: &'a RunConfig,
    mesh1: String,
    mesh2: String,
}

pub fn match_pair(
    cfg: &RunConfig,
    mesh1: &Path,
    mesh2: &Path,
    priors: &Priors,
    gt: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    let m1 = load_mesh_auto(mesh1)?;
    let m2 = load_mesh_auto(mesh2)?;
    let gt = gt.map(|p| load_gt(p, &m1, &m2)).transpose()?;
    let zs = &cfg.zeroshot;
    let den = priors.for_mode(zs.mode)?;
    let pair = prepare_pair(m1, m2, gt, zs)?;
    let result = zero_shot_match_prepared(&pair, den, zs, None, cfg.seed)?;
    create_dir(out)?;
    write_fmat(out.join("fmap.fmat"), result.fmap.matrix())?;
    write_fmat(out.join("c_init.fmat"), result.c_init.matrix())?;
    write_pmap(out.join("p2p.pmap"), result.point_map.targets())?;
    if let Some(mask) = &result.mask {
        write_fmat(out.join("mask.fmat"), mask.matrix())?;
        write_heatmap(out, "mask", mask.matrix())?;
    }
    write_json(
        &out.join("report.json"),
        &MatchFile {
            result: result.report(zs),
            config: cfg,
            mesh1: mesh1.display().to_string(),
            mesh2: mesh2.display().to_string(),
        },
    )?;
    match &result.errors {
        Some(e) => println!("mode {} mean error x100 {:.3}", zs.mode, e.mean_x100),
        None => println!("mode {} done", zs.mode),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalFile {
    n: usize,
    mean: f64,
    mean_x100: f64,
    max: f64,
}

/// Thresholds of the cumulative curve, in units of `sqrt(area)`.
pub fn curve_thresholds() -> Vec<f64> {
    (0..=100).map(|i| i as f64 * 0.0025).collect()
}

pub fn eval(pred: &Path, gt: &Path, mesh2: &Path, out: &Path) -> CliResult<()> {
    let m2 = load_mesh_auto(mesh2)?;
    let pred = read_pmap(pred)?;
    let gt = read_pmap(gt)?;
    let n2 = m2.n_vertices();
    let e = geodesic_error(&PointMap::new(pred, n2)?, &PointMap::new(gt, n2)?, &m2)?;
    create_dir(out)?;
    write_json(
        &out.join("eval.json"),
        &EvalFile {
            n: e.per_vertex.len(),
            mean: e.mean,
            mean_x100: e.mean_x100,
            max: e.per_vertex.iter().fold(0.0, |a: f64, &b| a.max(b)),
        },
    )?;
    let t = curve_thresholds();
    let mut csv = String::from("threshold,fraction\n");
    for (x, y) in t.iter().zip(cumulative_curve(&e.per_vertex, &t)) {
        csv += &format!("{x},{y}\n");
    }
    atomic_write(&out.join("curve.csv"), csv.as_bytes())?;
    println!("mean error x100 {:.3}", e.mean_x100);
    Ok(())
}

/// Runs `f` on every pair index with up to `jobs` threads; results keep pair order.
fn for_pairs<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    let slots: Vec<Mutex<Option<CliResult<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let jobs = jobs.clamp(1, n.max(1));
    std::thread::scope(|s| {
        for j in 0..jobs {
            let (f, slots) = (&f, &slots);
            s.spawn(move || {
                for p in (j..n).step_by(jobs) {
                    *slots[p].lock().unwrap() = Some(f(p));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every pair visited"))
        .collect()
}

fn load_pair(manifest: &Path, pairs: &PairsManifest, p: usize, cfg: &RunConfig) -> CliResult<PreparedPair> {
    let e = &pairs.pairs[p];
    let m1 = load_mesh_auto(beside(manifest, &e.mesh1))?;
    let m2 = load_mesh_auto(beside(manifest, &e.mesh2))?;
    let gt = load_gt(&beside(manifest, &e.gt), &m1, &m2)?;
    Ok(prepare_pair(m1, m2, Some(gt), &cfg.zeroshot)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct Row {
    pub name: String,
    pub mean_error_x100: f64,
    pub per_pair_x100: Vec<f64>,
}

#[derive(Serialize)]
struct TableFile<'a> {
    pairs: String,
    rows: &'a [Row],
    config: &'a RunConfig,
}

fn write_table(out: &Path, stem: &str, pairs: &Path, rows: &[Row], cfg: &RunConfig) -> CliResult<()> {
    create_dir(out)?;
    write_json(
        &out.join(format!("{stem}.json")),
        &TableFile {
            pairs: pairs.display().to_string(),
            rows,
            config: cfg,
        },
    )?;
    let mut csv = String::from("name,mean_error_x100\n");
    for r in rows {
        csv += &format!("{},{}\n", r.name, r.mean_error_x100);
        println!("{:<16} {:>10.3}", r.name, r.mean_error_x100);
    }
    atomic_write(&out.join(format!("{stem}.csv")), csv.as_bytes())?;
    Ok(())
}

fn rows(names: Vec<String>, per_pair: Vec<Vec<f64>>) -> Vec<Row> {
    names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let errs: Vec<f64> = per_pair.iter().map(|v| v[i]).collect();
            Row {
                name,
                mean_error_x100: errs.iter().sum::<f64>() / errs.len().max(1) as f64,
                per_pair_x100: errs,
            }
        })
        .collect()
}

fn error_x100(r: &specmatch::distill::MatchResult) -> f64 {
    r.errors.as_ref().map_or(f64::NAN, |e| e.mean_x100)
}

pub fn ablate(
    cfg: &RunConfig,
    pairs_path: &Path,
    priors: &Priors,
    modes: &[AblationMode],
    jobs: usize,
    out: &Path,
) -> CliResult<()> {
    let pairs: PairsManifest = read_json(pairs_path)?;
    for &m in modes {
        priors.for_mode(m)?;
    }
    let per_pair = for_pairs(pairs.pairs.len(), jobs, |p| {
        let pair = load_pair(pairs_path, &pairs, p, cfg)?;
        modes
            .iter()
            .map(|&mode| {
                let zs = specmatch::distill::ZeroShotConfig {
                    mode,
                    ..cfg.zeroshot.clone()
                };
                let r =
                    zero_shot_match_prepared(&pair, priors.for_mode(mode)?, &zs, None, mix_seed(cfg.seed, p as u64))?;
                Ok(error_x100(&r))
            })
            .collect::<CliResult<Vec<f64>>>()
    })?;
    let names = modes.iter().map(|m| m.to_string()).collect();
    write_table(out, "ablation", pairs_path, &rows(names, per_pair), cfg)
}

pub fn baseline(
    cfg: &RunConfig,
    pairs_path: &Path,
    checkpoint: Option<&PathBuf>,
    masks: &[InitMask],
    jobs: usize,
    out: &Path,
) -> CliResult<()> {
    let pairs: PairsManifest = read_json(pairs_path)?;
    let model = checkpoint.map(load_checkpoint).transpose()?;
    if masks.contains(&InitMask::Distilled) && model.is_none() {
        return Err(CliError::usage("the distilled mask needs --checkpoint"));
    }
    let per_pair = for_pairs(pairs.pairs.len(), jobs, |p| {
        let pair = load_pair(pairs_path, &pairs, p, cfg)?;
        masks
            .iter()
            .map(|&kind| {
                let r = ini_zoomout(&pair, kind, model.as_ref(), &cfg.zeroshot, mix_seed(cfg.seed, p as u64))?;
                Ok(error_x100(&r))
            })
            .collect::<CliResult<Vec<f64>>>()
    })?;
    let names = masks.iter().map(|m| m.to_string()).collect();
    write_table(out, "baseline", pairs_path, &rows(names, per_pair), cfg)
}
