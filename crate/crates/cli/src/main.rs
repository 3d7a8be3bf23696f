mod config;
mod data;
mod error;
mod heatmap;
mod matching;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specmatch::distill::{AblationMode, InitMask};

use config::RunConfig;
use error::{CliError, CliResult};
use matching::Priors;

/// Zero-shot shape matching with spectral map priors.
#[derive(Parser)]
#[command(name = "specmatch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set zeroshot.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Global seed; overrides `seed` from the file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut set = self.set.clone();
        if let Some(s) = self.seed {
            set.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &set)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a template, deformed training shapes and held-out pairs.
    SynthData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ground-truth maps of every shape in a `shapes.json` manifest.
    BuildDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Map order; defaults to `zeroshot.k`.
        #[arg(long)]
        k: Option<usize>,
        /// Keep signs, flipping each shape-side basis function at random.
        #[arg(long)]
        signed: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a map denoiser on a dataset directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw maps from a trained denoiser.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Integration steps; defaults to the checkpoint schedule.
        #[arg(long)]
        steps: Option<usize>,
        /// Trajectory heatmaps per sample.
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill masks from a denoiser around a given map.
    DistillMask {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fmap: PathBuf,
        /// One or more noise levels.
        #[arg(long, value_delimiter = ',', default_value = "1")]
        sigma: Vec<f64>,
        #[arg(long = "N", default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Zero-shot match of two meshes.
    Match {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        mesh1: PathBuf,
        #[arg(long)]
        mesh2: PathBuf,
        /// Prior over absolute maps.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prior over signed maps, used by `vanilla-sds`.
        #[arg(long)]
        signed_checkpoint: Option<PathBuf>,
        /// Ground-truth PMAP; adds errors to the report.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Geodesic error of a predicted correspondence.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        mesh2: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean error of each ablation mode over a pairs manifest.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        signed_checkpoint: Option<PathBuf>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "vanilla-sds,mask-zoomout,mask-proper,full"
        )]
        modes: Vec<AblationMode>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialization by a fixed or distilled mask followed by Zoomout.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pairs: PathBuf,
        /// Needed for the distilled mask.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "laplacian,resolvent,slanted,distilled")]
        mask: Vec<InitMask>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::SynthData { cfg, out } => data::synth_data(&cfg.resolve()?, &out),
        Command::BuildDataset {
            cfg,
            manifest,
            k,
            signed,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let k = k.unwrap_or(cfg.zeroshot.k);
            data::build_dataset(&cfg, &manifest, k, signed, &out)
        }
        Command::Train { cfg, dataset, out } => data::train(&cfg.resolve()?, &dataset, &out),
        Command::Sample {
            checkpoint,
            count,
            seed,
            steps,
            frames,
            out,
        } => data::sample(&checkpoint, count, seed, steps, frames, &out),
        Command::DistillMask {
            checkpoint,
            fmap,
            sigma,
            samples,
            seed,
            out,
        } => data::distill(&checkpoint, &fmap, &sigma, samples, seed, &out),
        Command::Match {
            cfg,
            mesh1,
            mesh2,
            checkpoint,
            signed_checkpoint,
            gt,
            out,
        } => {
            let priors = Priors::load(&checkpoint, signed_checkpoint.as_deref())?;
            matching::match_pair(&cfg.resolve()?, &mesh1, &mesh2, &priors, gt.as_deref(), &out)
        }
        Command::Eval { pred, gt, mesh2, out } => matching::eval(&pred, &gt, &mesh2, &out),
        Command::Ablate {
            cfg,
            pairs,
            checkpoint,
            signed_checkpoint,
            modes,
            jobs,
            out,
        } => {
            let cfg = cfg.resolve()?;
            let priors = Priors::load(&checkpoint, signed_checkpoint.as_deref())?;
            matching::ablate(&cfg, &pairs, &priors, &modes, jobs, &out)
        }
        Command::Baseline {
            cfg,
            pairs,
            checkpoint,
            mask,
            jobs,
            out,
        } => matching::baseline(&cfg.resolve()?, &pairs, checkpoint.as_ref(), &mask, jobs, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first).line());
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code() as u8)
        }
    }
}
