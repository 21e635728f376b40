//! Tiny binary tensor container for checkpoints: magic, version, then a
//! sequence of (name, shape, little-endian f64 data) records. Byte-exact
//! round trips by construction.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::IxDyn;

use crate::var::Arr;

const MAGIC: &[u8; 4] = b"AVNT";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TensorFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor file (bad magic)")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    BadVersion(u32),
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
}

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl Iterator<Item = (&'a str, &'a Arr)>,
) -> Result<(), TensorFileError> {
    let tensors: Vec<_> = tensors.collect();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, arr) in tensors {
        let nb = name.as_bytes();
        w.write_all(&(nb.len() as u32).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in arr.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Arr)>, TensorFileError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(TensorFileError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 20 {
            return Err(TensorFileError::Corrupt("oversized name".into()));
        }
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb)
            .map_err(|_| TensorFileError::Corrupt("name not utf8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            let d = u64::from_le_bytes(b) as usize;
            len = len
                .checked_mul(d)
                .ok_or_else(|| TensorFileError::Corrupt("shape overflow".into()))?;
            shape.push(d);
        }
        if len > 1 << 30 {
            return Err(TensorFileError::Corrupt("oversized tensor".into()));
        }
        let mut data = vec![0f64; len];
        for v in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
        }
        let arr = Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| TensorFileError::Corrupt(e.to_string()))?;
        out.push((name, arr));
    }
    Ok(out)
}

pub fn write_tensors_file<'a>(
    path: &Path,
    tensors: impl Iterator<Item = (&'a str, &'a Arr)>,
) -> Result<(), TensorFileError> {
    let f = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), tensors)
}

pub fn read_tensors_file(path: &Path) -> Result<Vec<(String, Arr)>, TensorFileError> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorFileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
