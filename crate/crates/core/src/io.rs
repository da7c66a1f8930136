//! `PVGT` tensor files: magic `PVGT`, `u32` rank, `rank × u32` extents, then
//! the values as `f32`, everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PVGT";

pub fn write_tensor<W: Write>(mut out: W, t: &Tensor<f32>) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

/// Decodes a tensor; `origin` names the source in error messages.
pub fn read_tensor<R: Read>(mut input: R, origin: &Path) -> Result<Tensor<f32>> {
    let fail = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    let mut word = [0u8; 4];
    let mut read_word = |input: &mut R, what: &str| -> Result<[u8; 4]> {
        input
            .read_exact(&mut word)
            .map_err(|_| fail(format!("truncated while reading {what}")))?;
        Ok(word)
    };
    let magic = read_word(&mut input, "magic")?;
    if &magic != MAGIC {
        return Err(fail(format!("bad magic {magic:?}")));
    }
    let rank = u32::from_le_bytes(read_word(&mut input, "rank")?) as usize;
    if rank > 16 {
        return Err(fail(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let e = u32::from_le_bytes(read_word(&mut input, "extent")?) as usize;
        if e == 0 {
            return Err(fail(format!("extent {d} is zero")));
        }
        shape.push(e);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| fail("extent product overflows".into()))?;
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| fail(format!("read error: {e}")))?;
    if bytes.len() != numel * 4 {
        return Err(fail(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            numel * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data).map_err(|e| fail(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(BufWriter::new(file), t).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(BufReader::new(file), path)
}
