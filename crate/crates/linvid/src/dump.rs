//! Binary tensor dumps.
//!
//! ```text
//! magic     b"LTNSR1"  (f64 payload) or b"LTNSR1f" (f32 payload)
//! rank      u32 LE
//! extents   rank × u64 LE
//! payload   row-major, LE
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use linvid_core::Tensor;

pub const MAGIC_F64: &[u8] = b"LTNSR1";
pub const MAGIC_F32: &[u8] = b"LTNSR1f";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, thiserror::Error)]
pub enum DumpError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a tensor dump: {0}")]
    Format(String),
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor, precision: Precision) -> io::Result<()> {
    w.write_all(match precision {
        Precision::F64 => MAGIC_F64,
        Precision::F32 => MAGIC_F32,
    })?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 8);
    match precision {
        Precision::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        Precision::F32 => t
            .data()
            .iter()
            .for_each(|&v| buf.extend_from_slice(&(v as f32).to_le_bytes())),
    }
    w.write_all(&buf)
}

/// Reads one dump. Both payload widths load as `f64`.
pub fn read_tensor<R: Read>(mut r: R) -> Result<(Tensor, Precision), DumpError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (precision, mut rest) = if let Some(rest) = bytes.strip_prefix(MAGIC_F32) {
        (Precision::F32, rest)
    } else if let Some(rest) = bytes.strip_prefix(MAGIC_F64) {
        (Precision::F64, rest)
    } else {
        return Err(DumpError::Format("bad magic".into()));
    };
    let mut take = |n: usize| -> Result<&[u8], DumpError> {
        if rest.len() < n {
            return Err(DumpError::Format("truncated header".into()));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = u64::from_le_bytes(take(8)?.try_into().unwrap());
        shape.push(usize::try_from(e).map_err(|_| DumpError::Format(format!("extent {e} too large")))?);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| DumpError::Format("element count overflows".into()))?;
    let width = match precision {
        Precision::F64 => 8,
        Precision::F32 => 4,
    };
    if rest.len() != numel * width {
        return Err(DumpError::Format(format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            rest.len(),
            numel * width
        )));
    }
    let data: Vec<f64> = match precision {
        Precision::F64 => rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Precision::F32 => rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let t = Tensor::new(&shape, data).map_err(|e| DumpError::Format(e.to_string()))?;
    Ok((t, precision))
}

pub fn save(path: &Path, t: &Tensor, precision: Precision) -> io::Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, precision)?;
    fs::write(path, buf)
}

pub fn load(path: &Path) -> Result<Tensor, DumpError> {
    read_tensor(fs::File::open(path)?).map(|(t, _)| t)
}
