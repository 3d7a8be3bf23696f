//! `SGM1` denoiser checkpoints.
//!
//! Layout (little-endian): magic, `u32` version, config block
//! (`u32` n, `u32` width count, `u32` widths, `u32` embedding dim,
//! `u8` residual, `u32` activation, `f64` s_data, `f64` sigma_min,
//! `f64` sigma_max, `f64` p_mean, `f64` p_std, `u32` sampler steps), then
//! `u32` tensor count and for each tensor a `u32`-prefixed UTF-8 name,
//! `u32` rows, `u32` cols and a row-major `f64` payload.

use std::path::Path;

use nalgebra::DMatrix;

use super::denoiser::{DenoiserConfig, NoiseSchedule, SpectralDenoiser};
use crate::diffgraph::{Activation, MlpParams};
use crate::error::{Error, Result};
use crate::formats::{atomic_write, put_f64, put_matrix_row_major, put_u32, put_u32_len, read_file, ByteReader};

pub const SGM_MAGIC: &[u8; 4] = b"SGM1";
pub const SGM_VERSION: u32 = 1;

fn tensor_name(i: usize) -> String {
    format!("{}{}", if i % 2 == 0 { "w" } else { "b" }, i / 2)
}

pub fn encode_checkpoint(model: &SpectralDenoiser) -> Result<Vec<u8>> {
    let cfg = model.config();
    let sch = model.schedule();
    let mut out = Vec::new();
    out.extend_from_slice(SGM_MAGIC);
    put_u32(&mut out, SGM_VERSION);
    put_u32_len(&mut out, cfg.n)?;
    put_u32_len(&mut out, cfg.widths.len())?;
    for &w in &cfg.widths {
        put_u32_len(&mut out, w)?;
    }
    put_u32_len(&mut out, cfg.emb_dim)?;
    out.push(cfg.residual as u8);
    put_u32(&mut out, cfg.activation.code());
    for v in [cfg.s_data, sch.sigma_min, sch.sigma_max, sch.p_mean, sch.p_std] {
        put_f64(&mut out, v);
    }
    put_u32_len(&mut out, sch.steps)?;
    let tensors = model.params().tensors();
    put_u32_len(&mut out, tensors.len())?;
    for (i, t) in tensors.iter().enumerate() {
        let name = tensor_name(i);
        put_u32_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32_len(&mut out, t.nrows())?;
        put_u32_len(&mut out, t.ncols())?;
        put_matrix_row_major(&mut out, t);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SpectralDenoiser> {
    let mut r = ByteReader::new(bytes);
    r.magic(SGM_MAGIC)?;
    let version = r.u32()?;
    if version != SGM_VERSION {
        return Err(Error::Version {
            found: version,
            expected: SGM_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let nw = r.u32()? as usize;
    if nw > 1024 {
        return Err(Error::Format(format!("implausible layer count {nw}")));
    }
    let widths = (0..nw)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let emb_dim = r.u32()? as usize;
    let residual = match r.u8()? {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad residual flag {b}"))),
    };
    let code = r.u32()?;
    let activation = Activation::from_code(code).ok_or_else(|| Error::Format(format!("unknown activation {code}")))?;
    let s_data = r.f64()?;
    let schedule = NoiseSchedule {
        sigma_min: r.f64()?,
        sigma_max: r.f64()?,
        p_mean: r.f64()?,
        p_std: r.f64()?,
        steps: r.u32()? as usize,
    };
    let config = DenoiserConfig {
        n,
        widths,
        emb_dim,
        residual,
        activation,
        s_data,
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != tensor_name(i) {
            return Err(Error::Format(format!("unexpected tensor {name:?} at position {i}")));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f64s(
            rows.checked_mul(cols)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        tensors.push(DMatrix::from_row_slice(rows, cols, &data));
    }
    r.finish()?;
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    schedule.validate().map_err(|e| Error::Format(e.to_string()))?;
    let params = MlpParams::from_tensors(&config.layer_widths(), activation, residual, tensors)
        .map_err(|e| Error::Format(e.to_string()))?;
    SpectralDenoiser::from_parts(config, schedule, params)
}

pub fn save_checkpoint(model: &SpectralDenoiser, path: impl AsRef<Path>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SpectralDenoiser> {
    decode_checkpoint(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> SpectralDenoiser {
        let cfg = DenoiserConfig {
            n: 3,
            widths: vec![5, 5],
            emb_dim: 4,
            ..DenoiserConfig::default()
        };
        SpectralDenoiser::init(cfg, NoiseSchedule::default(), 2).unwrap()
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let m = model();
        let bytes = encode_checkpoint(&m).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sgm");
        save_checkpoint(&model(), &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        save_checkpoint(&load_checkpoint(&p).unwrap(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn version_and_magic_errors() {
        let mut bytes = encode_checkpoint(&model()).unwrap();
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Version { found: 9, .. })
        ));
        bytes[4] = 1;
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format(_))));
        let good = encode_checkpoint(&model()).unwrap();
        assert!(matches!(
            decode_checkpoint(&good[..good.len() - 3]),
            Err(Error::Format(_))
        ));
    }
}
