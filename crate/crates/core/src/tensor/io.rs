//! GRLT binary tensor container.
//!
//! Layout: magic `"GRLT"`, u8 version (=1), u8 dtype code (0 = f32,
//! 1 = f64), u8 rank, `rank` little-endian u64 extents, then the raw
//! little-endian values. No compression.

use std::io::{Read, Write};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GRLT";
pub const VERSION: u8 = 1;

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(7 + 8 * t.rank() + t.numel() * T::BYTES);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(T::DTYPE_CODE);
    buf.push(t.rank() as u8);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(r: &mut impl Read) -> Result<Tensor<T>> {
    let mut head = [0u8; 7];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated GRLT header".into()))?;
    if &head[0..4] != MAGIC {
        return Err(Error::Format("bad GRLT magic".into()));
    }
    if head[4] != VERSION {
        return Err(Error::Format(format!("unsupported GRLT version {}", head[4])));
    }
    if head[5] != T::DTYPE_CODE {
        return Err(Error::Format(format!(
            "dtype code {} does not match requested element type (code {})",
            head[5],
            T::DTYPE_CODE
        )));
    }
    let rank = head[6] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        r.read_exact(&mut e)
            .map_err(|_| Error::Format("truncated GRLT extents".into()))?;
        let ext = u64::from_le_bytes(e) as usize;
        if ext == 0 {
            return Err(Error::Format("zero extent in GRLT shape".into()));
        }
        shape.push(ext);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * T::BYTES];
    r.read_exact(&mut raw)
        .map_err(|_| Error::Format("truncated GRLT payload".into()))?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}
