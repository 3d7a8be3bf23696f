//! `key=value` run configuration.
//!
//! Keys are dotted paths into [`RunConfig`] (`zeroshot.alpha`,
//! `zeroshot.features.hidden`, `deform.level`, ...). Lists are comma
//! separated; optional values accept `none`. Later assignments win, so
//! `--set` flags override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use specmatch::diffgraph::Activation;
use specmatch::distill::ZeroShotConfig;
use specmatch::sgm::{DenoiserConfig, NoiseSchedule, TrainOptions};
use specmatch::synth::DeformConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub widths: Vec<usize>,
    pub emb_dim: usize,
    pub residual: bool,
    pub activation: Activation,
    pub s_data: f64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        let d = DenoiserConfig::default();
        DenoiserSection {
            widths: d.widths,
            emb_dim: d.emb_dim,
            residual: d.residual,
            activation: d.activation,
            s_data: d.s_data,
        }
    }
}

impl DenoiserSection {
    /// The map order comes from the dataset.
    pub fn with_order(&self, n: usize) -> DenoiserConfig {
        DenoiserConfig {
            n,
            widths: self.widths.clone(),
            emb_dim: self.emb_dim,
            residual: self.residual,
            activation: self.activation,
            s_data: self.s_data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainOptions::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    /// Training shapes written by `synth-data`.
    pub count: usize,
    /// Held-out pairs written by `synth-data`.
    pub pairs: usize,
    pub shuffle_pairs: bool,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            count: 100,
            pairs: 10,
            shuffle_pairs: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthSection,
    pub deform: DeformConfig,
    pub denoiser: DenoiserSection,
    pub schedule: NoiseSchedule,
    pub train: TrainSection,
    pub zeroshot: ZeroShotConfig,
}

impl RunConfig {
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            seed: self.seed,
        }
    }

    /// Defaults, then the file (if any), then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let defaults = serde_json::to_value(RunConfig::default())?;
        let mut tree = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Lib(specmatch::Error::Io {
                    path: path.into(),
                    source: e,
                })
            })?;
            for (no, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                assign(&mut tree, &defaults, line)
                    .map_err(|m| CliError::usage(format!("{}:{}: {m}", path.display(), no + 1)))?;
            }
        }
        for o in overrides {
            assign(&mut tree, &defaults, o).map_err(|m| CliError::usage(format!("--set {o}: {m}")))?;
        }
        serde_json::from_value(tree).map_err(|e| CliError::usage(format!("config: {e}")))
    }
}

/// Types come from `defaults`, so optional keys stay resettable to `none`.
fn assign(tree: &mut Value, defaults: &Value, line: &str) -> Result<(), String> {
    let (key, value) = line.split_once('=').ok_or("expected key=value")?;
    let (key, value) = (key.trim(), value.trim());
    let mut node = &mut *tree;
    let mut model = defaults;
    for part in key.split('.') {
        let unknown = || format!("unknown key {key:?}");
        node = node.as_object_mut().and_then(|o| o.get_mut(part)).ok_or_else(unknown)?;
        model = model.get(part).ok_or_else(unknown)?;
    }
    if model.is_object() {
        return Err(format!("{key:?} is a section, not a value"));
    }
    *node = parse_like(model, value).ok_or_else(|| format!("bad value {value:?} for {key:?}"))?;
    Ok(())
}

fn number(s: &str) -> Option<Value> {
    if let Ok(u) = s.parse::<u64>() {
        return Some(u.into());
    }
    s.parse::<f64>().ok().filter(|x| x.is_finite()).map(Value::from)
}

/// Parses `s` into a value of the same JSON type as `current`.
fn parse_like(current: &Value, s: &str) -> Option<Value> {
    match current {
        Value::Bool(_) => s.parse::<bool>().ok().map(Value::Bool),
        Value::Number(n) if n.is_u64() => s.parse::<u64>().ok().map(Value::from),
        Value::Number(_) => s.parse::<f64>().ok().filter(|x| x.is_finite()).map(Value::from),
        Value::String(_) => Some(Value::String(s.to_string())),
        Value::Array(_) => s
            .split(',')
            .map(|t| t.trim())
            .filter(|t| !t.is_empty())
            .map(number)
            .collect::<Option<Vec<_>>>()
            .map(Value::Array),
        Value::Null => {
            if s.eq_ignore_ascii_case("none") {
                Some(Value::Null)
            } else {
                number(s)
            }
        }
        Value::Object(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use specmatch::distill::AblationMode;

    fn load(lines: &[&str]) -> CliResult<RunConfig> {
        RunConfig::load(None, &lines.iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }

    #[test]
    fn defaults_roundtrip() {
        assert_eq!(load(&[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_apply_by_type() {
        let c = load(&[
            "seed=7",
            "zeroshot.alpha = 0.5",
            "zeroshot.mode=vanilla-sds",
            "zeroshot.features.hidden=32,16",
            "zeroshot.zoom_target=44",
            "deform.kind=icosphere",
            "denoiser.residual=false",
            "schedule.sigma_max=2",
        ])
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.zeroshot.alpha, 0.5);
        assert_eq!(c.zeroshot.mode, AblationMode::VanillaSds);
        assert_eq!(c.zeroshot.features.hidden, vec![32, 16]);
        assert_eq!(c.zeroshot.zoom_target, Some(44));
        assert!(!c.denoiser.residual);
        assert_eq!(c.schedule.sigma_max, 2.0);
        let back = load(&["zeroshot.zoom_target=44", "zeroshot.zoom_target=none"]).unwrap();
        assert_eq!(back.zeroshot.zoom_target, None);
    }

    #[test]
    fn unknown_and_malformed_keys_are_usage_errors() {
        for bad in [
            "zeroshot.nope=1",
            "nope=1",
            "zeroshot=1",
            "seed",
            "seed=-1",
            "zeroshot.mode=fancy",
            "zeroshot.k=1.5",
        ] {
            let e = load(&[bad]).unwrap_err();
            assert_eq!(e.code(), 2, "{bad}");
        }
    }

    #[test]
    fn file_comments_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        std::fs::write(&p, "# comment\nseed = 3 # trailing\n\nzeroshot.steps=5\n").unwrap();
        let c = RunConfig::load(Some(&p), &["seed=4".into()]).unwrap();
        assert_eq!((c.seed, c.zeroshot.steps), (4, 5));
        std::fs::write(&p, "seed=1\nbogus=2\n").unwrap();
        let e = RunConfig::load(Some(&p), &[]).unwrap_err();
        assert!(e.to_string().contains(":2:"), "{e}");
    }
}
