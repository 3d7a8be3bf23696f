//! Little-endian binary containers shared by the library and the CLI.
//!
//! * `FMAT`: magic, `u32` rows, `u32` cols, `f64` row-major payload.
//! * `PMAP`: magic, `u32` n, `u32` indices.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const FMAT_MAGIC: &[u8; 4] = b"FMAT";
pub const PMAP_MAGIC: &[u8; 4] = b"PMAP";

/// Writes through a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => Path::new(&tmp_name).to_path_buf(),
    };
    let res = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    res.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Cursor over a byte buffer with bounds-checked little-endian reads.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u32_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} exceeds u32")))?;
    put_u32(out, v);
    Ok(())
}

/// Row-major `f64` payload.
pub(crate) fn put_matrix_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            put_f64(out, m[(i, j)]);
        }
    }
}

pub fn encode_fmat(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + 8 * m.len());
    out.extend_from_slice(FMAT_MAGIC);
    put_u32_len(&mut out, m.nrows())?;
    put_u32_len(&mut out, m.ncols())?;
    put_matrix_row_major(&mut out, m);
    Ok(out)
}

pub fn decode_fmat(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = ByteReader::new(bytes);
    r.magic(FMAT_MAGIC)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let data = r.f64s(rows * cols)?;
    r.finish()?;
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_fmat(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    atomic_write(path.as_ref(), &encode_fmat(m)?)
}

pub fn read_fmat(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    decode_fmat(&read_file(path.as_ref())?)
}

pub fn encode_pmap(indices: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * indices.len());
    out.extend_from_slice(PMAP_MAGIC);
    put_u32_len(&mut out, indices.len())?;
    for &i in indices {
        put_u32_len(&mut out, i)?;
    }
    Ok(out)
}

pub fn decode_pmap(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = ByteReader::new(bytes);
    r.magic(PMAP_MAGIC)?;
    let n = r.u32()? as usize;
    let out = (0..n)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(out)
}

pub fn write_pmap(path: impl AsRef<Path>, indices: &[usize]) -> Result<()> {
    atomic_write(path.as_ref(), &encode_pmap(indices)?)
}

pub fn read_pmap(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    decode_pmap(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fmat_layout_is_row_major_le() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = encode_fmat(&m).unwrap();
        assert_eq!(&b[..4], b"FMAT");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &3u32.to_le_bytes());
        assert_eq!(&b[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&b[20..28], &2.0f64.to_le_bytes());
        assert_eq!(b.len(), 12 + 48);
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(decode_fmat(b"XMAT\0\0\0\0\0\0\0\0"), Err(Error::Format(_))));
        let mut b = encode_fmat(&DMatrix::from_element(2, 2, 1.0)).unwrap();
        b.pop();
        assert!(matches!(decode_fmat(&b), Err(Error::Format(_))));
        assert!(matches!(
            decode_pmap(b"PMAP\x02\0\0\0\x01\0\0\0"),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn fmat_roundtrip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let m = DMatrix::from_fn(rows, cols, |i, j| {
                f64::from_bits(seed.wrapping_mul(31 + i as u64).wrapping_add(j as u64) >> 2)
            });
            let back = decode_fmat(&encode_fmat(&m).unwrap()).unwrap();
            prop_assert_eq!(
                m.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn pmap_roundtrip(v in proptest::collection::vec(0usize..100_000, 0..50)) {
            prop_assert_eq!(decode_pmap(&encode_pmap(&v).unwrap()).unwrap(), v);
        }
    }
}
