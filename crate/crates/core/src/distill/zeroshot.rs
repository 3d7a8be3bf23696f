use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::features::{feature_input, init_feature_net, FeatureNetConfig};
use super::{distill_mask, proper_loss, sds_gradient, sds_loss, SdsRange};
use crate::diffgraph::{hstack, AdamState, MlpParams, Tape, Var};
use crate::error::{Error, Result};
use crate::fmap::{
    bij_penalty_var, geodesic_error, geodesic_error_with_table, lap_commute_penalty_var, laplacian_mask,
    ortho_penalty_var, resolvent_mask, slanted_mask, solve_fmap, solve_fmap_var, zoomout, zoomout_with_map,
    FunctionalMap, GeodesicErrors, Mask, PointMap, SolveOptions,
};
use crate::mesh::{GeodesicTable, TriangleMesh};
use crate::sgm::Denoiser;
use crate::spectral::SpectralShape;
use crate::synth::mix_seed;

const INIT_TAG: u64 = 0x1417;
const MASK_TAG: u64 = 0x3a5c;
const SDS_TAG: u64 = 0x5d5;

/// Loss configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// SDS with a signed-map denoiser on `C_raw`; no mask, no properness.
    VanillaSds,
    /// No optimization: random descriptors, distilled mask, Zoomout.
    MaskZoomout,
    /// Properness loss on the unregularized map.
    Proper,
    /// SDS on the absolute mask-regularized map.
    MaskSds,
    /// Properness loss against Zoomout of the mask-regularized map.
    MaskProper,
    /// `MaskProper` plus SDS on `|C_raw|`.
    Full,
    /// `Full` plus orthogonality, bijectivity and Laplacian commutativity.
    FullAxiomatic,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::VanillaSds,
        AblationMode::MaskZoomout,
        AblationMode::Proper,
        AblationMode::MaskSds,
        AblationMode::MaskProper,
        AblationMode::Full,
        AblationMode::FullAxiomatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::VanillaSds => "vanilla-sds",
            AblationMode::MaskZoomout => "mask-zoomout",
            AblationMode::Proper => "proper",
            AblationMode::MaskSds => "mask-sds",
            AblationMode::MaskProper => "mask-proper",
            AblationMode::Full => "full",
            AblationMode::FullAxiomatic => "full-axiomatic",
        }
    }

    /// Whether the mode distills a mask.
    pub fn uses_mask(self) -> bool {
        !matches!(self, AblationMode::VanillaSds | AblationMode::Proper)
    }

    pub fn optimizes(self) -> bool {
        self != AblationMode::MaskZoomout
    }

    /// Whether the SDS term needs a denoiser trained on signed maps.
    pub fn signed_prior(self) -> bool {
        self == AblationMode::VanillaSds
    }

    fn proper_source(self) -> Option<bool> {
        // Some(true): Zoomout of C_reg, Some(false): Zoomout of C_raw
        match self {
            AblationMode::Proper => Some(false),
            AblationMode::MaskProper | AblationMode::Full | AblationMode::FullAxiomatic => Some(true),
            _ => None,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))
    }
}

/// Mask used by the one-shot "initial descriptors + Zoomout" baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMask {
    None,
    Laplacian,
    Resolvent,
    Slanted,
    Distilled,
}

impl InitMask {
    pub const ALL: [InitMask; 5] = [
        InitMask::None,
        InitMask::Laplacian,
        InitMask::Resolvent,
        InitMask::Slanted,
        InitMask::Distilled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitMask::None => "none",
            InitMask::Laplacian => "laplacian",
            InitMask::Resolvent => "resolvent",
            InitMask::Slanted => "slanted",
            InitMask::Distilled => "distilled",
        }
    }
}

impl fmt::Display for InitMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mask {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotConfig {
    /// Order of the estimated map.
    pub k: usize,
    pub sigma_mask: f64,
    pub mask_samples: usize,
    /// In-loop Zoomout order; `None` means `ceil(4k/3)`.
    pub zoom_target: Option<usize>,
    /// Mask weight in the regularized solve.
    pub alpha: f64,
    pub steps: usize,
    pub lr: f64,
    pub sds_sigma_min: f64,
    pub sds_sigma_max: f64,
    pub sds_weight: f64,
    /// Order of the final Zoomout, capped by the basis size.
    pub eval_target: usize,
    /// The mask is redistilled every this many steps.
    pub mask_every: usize,
    pub zoom_step: usize,
    pub ortho_weight: f64,
    pub bij_weight: f64,
    pub lap_weight: f64,
    pub mode: AblationMode,
    pub features: FeatureNetConfig,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            k: 30,
            sigma_mask: 1.0,
            mask_samples: 100,
            zoom_target: None,
            alpha: 0.1,
            steps: 1000,
            lr: 1e-3,
            sds_sigma_min: 0.05,
            sds_sigma_max: 1.5,
            sds_weight: 1.0,
            eval_target: 150,
            mask_every: 50,
            zoom_step: 1,
            ortho_weight: 0.1,
            bij_weight: 0.1,
            lap_weight: 0.1,
            mode: AblationMode::Full,
            features: FeatureNetConfig::default(),
        }
    }
}

impl ZeroShotConfig {
    pub fn in_loop_target(&self) -> usize {
        self.zoom_target.unwrap_or((4 * self.k).div_ceil(3))
    }

    pub fn sds_range(&self) -> SdsRange {
        SdsRange {
            min: self.sds_sigma_min,
            max: self.sds_sigma_max,
        }
    }

    /// Smallest basis order the run needs.
    pub fn min_basis_order(&self) -> usize {
        self.k.max(self.in_loop_target())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("zero-shot config: {what}")));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.sigma_mask > 0.0 && self.sigma_mask.is_finite()) {
            return bad("sigma_mask must be positive");
        }
        if self.mask_samples == 0 || self.mask_every == 0 || self.zoom_step == 0 {
            return bad("mask_samples, mask_every and zoom_step must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.sds_sigma_min > 0.0 && self.sds_sigma_max >= self.sds_sigma_min && self.sds_sigma_max.is_finite()) {
            return bad("SDS noise range must satisfy 0 < min <= max");
        }
        for w in [self.sds_weight, self.ortho_weight, self.bij_weight, self.lap_weight] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad("loss weights must be >= 0");
            }
        }
        if self.in_loop_target() < self.k || self.eval_target < self.k {
            return bad("Zoomout targets must be >= k");
        }
        self.features.validate(self.k)
    }
}

/// A mesh with its eigenbasis and descriptor-network input.
#[derive(Debug, Clone)]
pub struct PreparedShape {
    pub shape: SpectralShape,
    pub input: DMatrix<f64>,
}

/// Basis order `min(eval_target, n - 1)`, rejected when below what the loop needs.
pub fn prepare_shape(mesh: TriangleMesh, cfg: &ZeroShotConfig) -> Result<PreparedShape> {
    cfg.validate()?;
    let max = mesh.n_vertices().saturating_sub(1);
    let need = cfg.min_basis_order();
    if need > max {
        return Err(Error::KTooLarge { k: need, max });
    }
    let order = cfg.eval_target.max(need).min(max);
    let shape = SpectralShape::new(mesh, order)?;
    let input = feature_input(&shape, cfg.features.hks_count)?;
    Ok(PreparedShape { shape, input })
}

/// Two prepared shapes and optional ground truth for evaluation.
#[derive(Debug, Clone)]
pub struct PreparedPair {
    pub source: PreparedShape,
    pub target: PreparedShape,
    pub gt: Option<PointMap>,
    pub table: Option<GeodesicTable>,
}

pub fn prepare_pair(
    mesh1: TriangleMesh,
    mesh2: TriangleMesh,
    gt: Option<PointMap>,
    cfg: &ZeroShotConfig,
) -> Result<PreparedPair> {
    if let Some(g) = &gt {
        if g.len() != mesh1.n_vertices() || g.targets().iter().any(|&t| t >= mesh2.n_vertices()) {
            return Err(Error::shape("ground-truth map does not fit the meshes"));
        }
    }
    let table = match gt {
        Some(_) => Some(GeodesicTable::new(&mesh2)?),
        None => None,
    };
    Ok(PreparedPair {
        source: prepare_shape(mesh1, cfg)?,
        target: prepare_shape(mesh2, cfg)?,
        gt,
        table,
    })
}

impl PreparedPair {
    fn eval_order(&self, cfg: &ZeroShotConfig) -> usize {
        cfg.eval_target
            .min(self.source.shape.basis.k())
            .min(self.target.shape.basis.k())
    }

    /// Normalized spectral descriptors `(A1, A2)` of order `k` for `desc`.
    pub fn spectral_descriptors(&self, desc: &Descriptors, k: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Problem::new(self, k).values(desc)
    }

    /// The untrained descriptor network used for a run with `seed`.
    pub fn initial_descriptors(cfg: &ZeroShotConfig, seed: u64) -> Result<Descriptors> {
        Ok(Descriptors::Network(init_feature_net(
            &cfg.features,
            mix_seed(seed, INIT_TAG),
        )?))
    }

    fn errors(&self, pred: &PointMap) -> Result<Option<GeodesicErrors>> {
        let Some(gt) = &self.gt else { return Ok(None) };
        let mesh2 = &self.target.shape.mesh;
        let e = match &self.table {
            Some(t) => geodesic_error_with_table(pred, gt, t, mesh2.total_area())?,
            None => geodesic_error(pred, gt, mesh2)?,
        };
        Ok(Some(e))
    }
}

/// `k x n` matrix `Phi_k^T S` taking vertex functions to spectral coefficients.
pub(crate) fn projector(shape: &SpectralShape, k: usize) -> DMatrix<f64> {
    let s = shape.mass.as_slice();
    let mut p = shape.basis.phi_k(k).transpose();
    for (v, mut col) in p.column_iter_mut().enumerate() {
        col *= s[v];
    }
    p
}

/// What the optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub enum Descriptors {
    /// A descriptor network applied to both shapes.
    Network(MlpParams),
    /// Spectral descriptor coefficients `A1`, `A2` (`k x d`) optimized directly.
    Free { a1: DMatrix<f64>, a2: DMatrix<f64> },
}

impl Descriptors {
    fn shapes(&self) -> Vec<(usize, usize)> {
        match self {
            Descriptors::Network(p) => p.shapes(),
            Descriptors::Free { a1, a2 } => vec![a1.shape(), a2.shape()],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        match self {
            Descriptors::Network(p) => p.tensors_mut(),
            Descriptors::Free { a1, a2 } => vec![a1, a2],
        }
    }
}

/// Constant data shared by every step of one run.
struct Problem<'a> {
    pair: &'a PreparedPair,
    proj1: DMatrix<f64>,
    proj2: DMatrix<f64>,
    k: usize,
}

impl<'a> Problem<'a> {
    fn new(pair: &'a PreparedPair, k: usize) -> Self {
        Problem {
            proj1: projector(&pair.source.shape, k),
            proj2: projector(&pair.target.shape, k),
            pair,
            k,
        }
    }

    fn values(&self, desc: &Descriptors) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let tape = Tape::new();
        let (a1, a2, _) = place(&tape, self, desc)?;
        Ok((a1.to_matrix(), a2.to_matrix()))
    }
}

const STD_EPS: f64 = 1e-8;

/// Spectral coefficients of the standardized features `[1 | F_std] / sqrt(area)`.
/// Each feature column is centered and scaled to unit variance under the
/// normalized vertex mass, so the columns have unit mass norm before
/// projection.
fn descriptors<'t>(tape: &'t Tape, f: Var<'t>, shape: &SpectralShape, proj: &DMatrix<f64>) -> Result<Var<'t>> {
    let mass = shape.mass.as_slice();
    let area = shape.mass.total();
    let (n, d) = f.shape();
    let w = tape.constant(DMatrix::from_fn(1, n, |_, v| mass[v] / area));
    let mean = w.matmul(f)?;
    let fc = f.add_row(mean.scale(-1.0))?;
    let var = w.matmul(fc.hadamard(fc)?)?;
    let inv = var.add_const(&DMatrix::from_element(1, d, STD_EPS))?.powf(-0.5);
    let fs = fc.mul_row(inv)?.scale(1.0 / area.sqrt());
    let ones = tape.constant(DMatrix::from_element(n, 1, 1.0 / area.sqrt()));
    tape.constant(proj.clone()).matmul(hstack(&[ones, fs])?)
}

/// Per-step loss values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub proper: Vec<f64>,
    /// `|g|^2 / 2` for the injected SDS gradient `g`.
    pub sds: Vec<f64>,
    pub penalty: Vec<f64>,
    pub total: Vec<f64>,
}

impl LossTrace {
    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    pub mode: AblationMode,
    pub seed: u64,
    /// Map after the final Zoomout, at the evaluation order.
    pub fmap: FunctionalMap,
    pub point_map: PointMap,
    /// `k x k` unregularized map from the final descriptors.
    pub c_raw: FunctionalMap,
    /// `k x k` map handed to the final Zoomout: the raw map after
    /// optimization, the mask-regularized map in mask-zoomout mode.
    pub c_init: FunctionalMap,
    /// Last distilled mask, if the mode uses one.
    pub mask: Option<Mask>,
    pub trace: LossTrace,
    pub wall_clock_s: f64,
    pub errors: Option<GeodesicErrors>,
}

/// JSON-friendly summary of a [`MatchResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub mode: AblationMode,
    pub seed: u64,
    pub config: ZeroShotConfig,
    pub eval_order: usize,
    pub trace: LossTrace,
    pub mean_error: Option<f64>,
    pub mean_error_x100: Option<f64>,
    pub wall_clock_s: f64,
}

impl MatchResult {
    pub fn report(&self, cfg: &ZeroShotConfig) -> MatchReport {
        MatchReport {
            mode: self.mode,
            seed: self.seed,
            config: cfg.clone(),
            eval_order: self.fmap.shape().0,
            trace: self.trace.clone(),
            mean_error: self.errors.as_ref().map(|e| e.mean),
            mean_error_x100: self.errors.as_ref().map(|e| e.mean_x100),
            wall_clock_s: self.wall_clock_s,
        }
    }
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("step {step}: {msg}")),
        e => e,
    }
}

fn place<'t>(tape: &'t Tape, problem: &Problem<'_>, desc: &Descriptors) -> Result<(Var<'t>, Var<'t>, Vec<Var<'t>>)> {
    let (a1, a2, vars) = match desc {
        Descriptors::Network(p) => {
            let bound = p.bind(tape);
            let f1 = bound.forward(tape.constant(problem.pair.source.input.clone()))?;
            let f2 = bound.forward(tape.constant(problem.pair.target.input.clone()))?;
            let a1 = descriptors(tape, f1, &problem.pair.source.shape, &problem.proj1)?;
            let a2 = descriptors(tape, f2, &problem.pair.target.shape, &problem.proj2)?;
            (a1, a2, bound.vars().to_vec())
        }
        Descriptors::Free { a1, a2 } => {
            let v1 = tape.param(a1.clone());
            let v2 = tape.param(a2.clone());
            (v1, v2, vec![v1, v2])
        }
    };
    Ok((a1, a2, vars))
}

/// Quantities one step holds constant: the Zoomout target of the proper loss
/// and the injected SDS gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrozenTerms {
    pub c_proper: Option<DMatrix<f64>>,
    pub sds_grad: Option<DMatrix<f64>>,
}

/// Loss parts of one step and the gradient for each optimized tensor.
#[derive(Debug, Clone)]
pub struct StepLoss {
    pub proper: f64,
    pub sds: f64,
    pub penalty: f64,
    pub total: f64,
    pub grads: Vec<DMatrix<f64>>,
}

fn sds_input<'t>(
    mode: AblationMode,
    c_raw: Var<'t>,
    c_reg: impl FnOnce() -> Result<Var<'t>>,
) -> Result<Option<Var<'t>>> {
    Ok(match mode {
        AblationMode::VanillaSds => Some(c_raw),
        AblationMode::Full | AblationMode::FullAxiomatic => Some(c_raw.abs()),
        AblationMode::MaskSds => Some(c_reg()?.abs()),
        _ => None,
    })
}

fn freeze<D: Denoiser + ?Sized>(
    problem: &Problem<'_>,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    mask: Option<&Mask>,
    denoiser: &D,
    cfg: &ZeroShotConfig,
    sds_seed: u64,
) -> Result<FrozenTerms> {
    let s1 = &problem.pair.source.shape;
    let s2 = &problem.pair.target.shape;
    let opts = SolveOptions::default();
    let c_raw = solve_fmap(a1, a2, 0.0, None, opts)?.into_inner();
    let c_reg = || -> Result<DMatrix<f64>> { Ok(solve_fmap(a1, a2, cfg.alpha, mask, opts)?.into_inner()) };
    let c_proper = match cfg.mode.proper_source() {
        Some(from_reg) => {
            let src = if from_reg { c_reg()? } else { c_raw.clone() };
            let z = zoomout(
                &FunctionalMap::new(src)?,
                &s1.basis,
                &s2.basis,
                &s2.mass,
                cfg.in_loop_target(),
                cfg.zoom_step,
            )?;
            Some(z.truncated(problem.k, problem.k)?.into_inner())
        }
        None => None,
    };
    let sds_grad = if cfg.sds_weight > 0.0 {
        let tape = Tape::new();
        let x = sds_input(cfg.mode, tape.constant(c_raw), || Ok(tape.constant(c_reg()?)))?;
        match x {
            Some(x) => Some(sds_gradient(denoiser, &x.value(), cfg.sds_range(), sds_seed)?),
            None => None,
        }
    } else {
        None
    };
    Ok(FrozenTerms { c_proper, sds_grad })
}

#[allow(clippy::too_many_arguments)]
fn evaluate<'t>(
    tape: &'t Tape,
    problem: &Problem<'_>,
    a1: Var<'t>,
    a2: Var<'t>,
    vars: &[Var<'t>],
    mask: Option<&Mask>,
    cfg: &ZeroShotConfig,
    frozen: &FrozenTerms,
) -> Result<StepLoss> {
    let s1 = &problem.pair.source.shape;
    let s2 = &problem.pair.target.shape;
    let opts = SolveOptions::default();
    let c_raw = solve_fmap_var(a1, a2, 0.0, None, opts)?;
    let zero = || tape.constant(DMatrix::zeros(1, 1));
    let proper = match &frozen.c_proper {
        Some(target) => proper_loss(c_raw, target)?,
        None => zero(),
    };
    let sds = match &frozen.sds_grad {
        Some(g) => match sds_input(cfg.mode, c_raw, || solve_fmap_var(a1, a2, cfg.alpha, mask, opts))? {
            Some(x) => sds_loss(x, g)?,
            None => zero(),
        },
        None => zero(),
    };
    let penalty = if cfg.mode == AblationMode::FullAxiomatic {
        let c21 = solve_fmap_var(a2, a1, 0.0, None, opts)?;
        ortho_penalty_var(c_raw)?
            .scale(cfg.ortho_weight)
            .add(bij_penalty_var(c_raw, c21)?.scale(cfg.bij_weight))?
            .add(lap_commute_penalty_var(c_raw, s1.basis.lambda(), s2.basis.lambda())?.scale(cfg.lap_weight))?
    } else {
        zero()
    };
    let total = proper.add(sds.scale(cfg.sds_weight))?.add(penalty)?;
    let g = tape.backward(total)?;
    Ok(StepLoss {
        proper: proper.scalar(),
        sds: sds.scalar(),
        penalty: penalty.scalar(),
        total: total.scalar(),
        grads: vars.iter().map(|&v| g.get(v)).collect(),
    })
}

/// Total loss of `desc` on `pair` with `mask` and `frozen` held fixed, and
/// its gradient with respect to every tensor of `desc`.
pub fn step_loss(
    pair: &PreparedPair,
    desc: &Descriptors,
    mask: Option<&Mask>,
    cfg: &ZeroShotConfig,
    frozen: &FrozenTerms,
) -> Result<StepLoss> {
    let problem = Problem::new(pair, cfg.k);
    let tape = Tape::new();
    let (a1, a2, vars) = place(&tape, &problem, desc)?;
    evaluate(&tape, &problem, a1, a2, &vars, mask, cfg, frozen)
}

fn step_losses<D: Denoiser + ?Sized>(
    problem: &Problem<'_>,
    desc: &Descriptors,
    mask: Option<&Mask>,
    denoiser: &D,
    cfg: &ZeroShotConfig,
    sds_seed: u64,
) -> Result<StepLoss> {
    let tape = Tape::new();
    let (a1, a2, vars) = place(&tape, problem, desc)?;
    let frozen = freeze(problem, &a1.value(), &a2.value(), mask, denoiser, cfg, sds_seed)?;
    evaluate(&tape, problem, a1, a2, &vars, mask, cfg, &frozen)
}

fn build_mask<D: Denoiser + ?Sized>(
    kind: InitMask,
    c_raw: &DMatrix<f64>,
    problem: &Problem<'_>,
    denoiser: Option<&D>,
    cfg: &ZeroShotConfig,
    seed: u64,
) -> Result<Option<Mask>> {
    let k = problem.k;
    let l1 = &problem.pair.source.shape.basis.lambda()[..k];
    let l2 = &problem.pair.target.shape.basis.lambda()[..k];
    Ok(match kind {
        InitMask::None => None,
        InitMask::Laplacian => Some(laplacian_mask(l1, l2)),
        InitMask::Resolvent => Some(resolvent_mask(l1, l2)),
        InitMask::Slanted => {
            let slope = l2[k - 1] / l1[k - 1];
            Some(slanted_mask(k, k, slope))
        }
        InitMask::Distilled => {
            let d = denoiser.ok_or_else(|| Error::InvalidArgument("distilled mask needs a denoiser".into()))?;
            Some(distill_mask(d, c_raw, cfg.sigma_mask, cfg.mask_samples, seed)?)
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &Problem<'_>,
    cfg: &ZeroShotConfig,
    c_raw: DMatrix<f64>,
    c_init: DMatrix<f64>,
    mask: Option<Mask>,
    trace: LossTrace,
    seed: u64,
    started: Instant,
) -> Result<MatchResult> {
    let pair = problem.pair;
    let s1 = &pair.source.shape;
    let s2 = &pair.target.shape;
    let c_init = FunctionalMap::new(c_init)?;
    let (fmap, point_map) = zoomout_with_map(
        &c_init,
        &s1.basis,
        &s2.basis,
        &s2.mass,
        pair.eval_order(cfg),
        cfg.zoom_step,
    )?;
    let errors = pair.errors(&point_map)?;
    Ok(MatchResult {
        mode: cfg.mode,
        seed,
        fmap,
        point_map,
        c_raw: FunctionalMap::new(c_raw)?,
        c_init,
        mask,
        trace,
        wall_clock_s: started.elapsed().as_secs_f64(),
        errors,
    })
}

/// Runs the zero-shot loop on a prepared pair. `init` overrides the default
/// random descriptor network (seeded from `seed`).
pub fn zero_shot_match_prepared<D: Denoiser + ?Sized>(
    pair: &PreparedPair,
    denoiser: &D,
    cfg: &ZeroShotConfig,
    init: Option<Descriptors>,
    seed: u64,
) -> Result<MatchResult> {
    cfg.validate()?;
    let started = Instant::now();
    let k = cfg.k;
    let problem = Problem::new(pair, k);
    let mut desc = match init {
        Some(d) => d,
        None => Descriptors::Network(init_feature_net(&cfg.features, mix_seed(seed, INIT_TAG))?),
    };
    if let Descriptors::Free { a1, a2 } = &desc {
        if a1.nrows() != k || a2.nrows() != k || a1.ncols() != a2.ncols() {
            return Err(Error::shape("free descriptors must both be k x d"));
        }
    }
    let steps = if cfg.mode.optimizes() { cfg.steps } else { 0 };
    let mut adam = AdamState::new(cfg.lr, &desc.shapes());
    let mut trace = LossTrace::default();
    let mut mask: Option<Mask> = None;
    for step in 0..steps {
        let mut run = || -> Result<StepLoss> {
            if cfg.mode.uses_mask() && step % cfg.mask_every == 0 {
                let (a1, a2) = problem.values(&desc)?;
                let raw = solve_fmap(&a1, &a2, 0.0, None, SolveOptions::default())?.into_inner();
                mask = Some(distill_mask(
                    denoiser,
                    &raw,
                    cfg.sigma_mask,
                    cfg.mask_samples,
                    mix_seed(seed ^ MASK_TAG, step as u64),
                )?);
            }
            let l = step_losses(
                &problem,
                &desc,
                mask.as_ref(),
                denoiser,
                cfg,
                mix_seed(seed ^ SDS_TAG, step as u64),
            )?;
            if !l.total.is_finite() {
                return Err(Error::NonFinite("total loss".into()));
            }
            adam.step(&mut desc.tensors_mut(), &l.grads)?;
            Ok(l)
        };
        let l = run().map_err(|e| at_step(step, e))?;
        trace.proper.push(l.proper);
        trace.sds.push(l.sds);
        trace.penalty.push(l.penalty);
        trace.total.push(l.total);
    }
    let (a1, a2) = problem.values(&desc).map_err(|e| at_step(steps, e))?;
    let opts = SolveOptions::default();
    let c_raw = solve_fmap(&a1, &a2, 0.0, None, opts)?.into_inner();
    // Optimizing modes hand over the optimized raw map; re-solving with a
    // fresh mask would override the directions the loss has shaped.
    let (c_init, mask) = if cfg.mode.uses_mask() && steps == 0 {
        let m = build_mask(
            InitMask::Distilled,
            &c_raw,
            &problem,
            Some(denoiser),
            cfg,
            mix_seed(seed ^ MASK_TAG, steps as u64),
        )?;
        (solve_fmap(&a1, &a2, cfg.alpha, m.as_ref(), opts)?.into_inner(), m)
    } else {
        (c_raw.clone(), mask)
    };
    finish(&problem, cfg, c_raw, c_init, mask, trace, seed, started)
}

/// Zero-shot matching of two meshes without ground truth.
pub fn zero_shot_match<D: Denoiser + ?Sized>(
    mesh1: &TriangleMesh,
    mesh2: &TriangleMesh,
    denoiser: &D,
    cfg: &ZeroShotConfig,
    seed: u64,
) -> Result<MatchResult> {
    let pair = prepare_pair(mesh1.clone(), mesh2.clone(), None, cfg)?;
    zero_shot_match_prepared(&pair, denoiser, cfg, None, seed)
}

/// One regularized solve from the untrained descriptor network followed by
/// the final Zoomout. The denoiser is only needed for [`InitMask::Distilled`].
pub fn ini_zoomout<D: Denoiser + ?Sized>(
    pair: &PreparedPair,
    kind: InitMask,
    denoiser: Option<&D>,
    cfg: &ZeroShotConfig,
    seed: u64,
) -> Result<MatchResult> {
    cfg.validate()?;
    let started = Instant::now();
    let problem = Problem::new(pair, cfg.k);
    let desc = Descriptors::Network(init_feature_net(&cfg.features, mix_seed(seed, INIT_TAG))?);
    let (a1, a2) = problem.values(&desc)?;
    let opts = SolveOptions::default();
    let c_raw = solve_fmap(&a1, &a2, 0.0, None, opts)?.into_inner();
    let mask = build_mask(kind, &c_raw, &problem, denoiser, cfg, mix_seed(seed ^ MASK_TAG, 0))?;
    let c_init = match &mask {
        Some(m) => solve_fmap(&a1, &a2, cfg.alpha, Some(m), opts)?.into_inner(),
        None => c_raw.clone(),
    };
    let cfg = ZeroShotConfig {
        mode: AblationMode::MaskZoomout,
        ..cfg.clone()
    };
    finish(&problem, &cfg, c_raw, c_init, mask, LossTrace::default(), seed, started)
}
