//! Named-tensor map on disk:
//!
//! ```text
//! "AMBS1"
//! u64 count
//! count × { u64 name_len, name (UTF-8), u64 rank, rank × u64 dim, numel × f32 }
//! ```
//!
//! All integers and reals little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DiffError, Tensor};

pub const MAGIC: &[u8; 5] = b"AMBS1";

/// Guards against allocating absurd buffers from a corrupt header.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor<f32>)]) -> Result<(), DiffError> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u64).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DiffError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>, DiffError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic header".into()));
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut r)?;
        if len > 1 << 16 {
            return Err(DiffError::Checkpoint(format!("name length {len} too large")));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let rank = read_u64(&mut r)?;
        if rank > 8 {
            return Err(DiffError::Checkpoint(format!("{name}: rank {rank} too large")));
        }
        let shape = (0..rank).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1u64, |a, &d| a.checked_mul(d)).unwrap_or(u64::MAX);
        if numel > MAX_ELEMENTS {
            return Err(DiffError::Checkpoint(format!("{name}: {numel} elements too large")));
        }
        let mut bytes = vec![0u8; numel as usize * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let shape: Vec<usize> = shape.into_iter().map(|d| d as usize).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, tensors: &[(String, Tensor<f32>)]) -> Result<(), DiffError> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, DiffError> {
    read_tensors(BufReader::new(File::open(path)?))
}
