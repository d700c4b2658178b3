//! Little-endian binary container of named `f64` tensors.
//!
//! Layout: magic `FDLT`, `u32` version, `u32` tensor count, then per
//! tensor a `u32` name length, UTF-8 name, `u32` rank, `u64` dims and the
//! `f64` payload in row-major order.

use std::io::{self, Read, Write};

use crate::autodiff::Tensor;

pub const MAGIC: [u8; 4] = *b"FDLT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TensorFileError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported tensor file version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("corrupt tensor file: {0}")]
    Corrupt(String),
}

pub fn write_tensors<W: Write>(
    mut out: W,
    tensors: &[(String, Tensor<f64>)],
) -> Result<(), TensorFileError> {
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn to_bytes(tensors: &[(String, Tensor<f64>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, tensors).expect("writing to memory");
    buf
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TensorFileError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorFileError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// upper bound on elements read from one header, so corrupt sizes fail fast
const MAX_ELEMENTS: u64 = 1 << 28;

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor<f64>)>, TensorFileError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TensorFileError::Magic(magic));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(TensorFileError::Version { found: version });
    }
    let count = read_u32(&mut input)?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        if len > 4096 {
            return Err(TensorFileError::Corrupt(format!("name length {len}")));
        }
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorFileError::Corrupt("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        if rank == 0 || rank > 8 {
            return Err(TensorFileError::Corrupt(format!("rank {rank} for `{name}`")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: u64 = 1;
        for _ in 0..rank {
            let d = read_u64(&mut input)?;
            n = n.saturating_mul(d);
            shape.push(d as usize);
        }
        if n == 0 || n > MAX_ELEMENTS {
            return Err(TensorFileError::Corrupt(format!("shape {shape:?} for `{name}`")));
        }
        let mut raw = vec![0u8; n as usize * 8];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| TensorFileError::Corrupt(e.to_string()))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(TensorFileError::Corrupt("trailing bytes".into()));
    }
    Ok(out)
}
