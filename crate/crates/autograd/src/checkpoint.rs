//! Binary checkpoint format:
//!
//! ```text
//! "SYMW"  u32 version  u32 tensor_count
//! repeat: u32 name_len  name(utf-8)  u32 rank  u64 dims[rank]  f64 data[..]
//! ```
//! All integers and doubles little-endian.

use std::io::{Read, Write};

use crate::error::{AutogradError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SYMW";
pub const VERSION: u32 = 1;

// Guards against allocating absurd buffers from corrupted headers.
const MAX_RANK: u32 = 8;
const MAX_NAME: u32 = 4096;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
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

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| AutogradError::BadMagic)?;
    if &magic != MAGIC {
        return Err(AutogradError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(AutogradError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::with_capacity(count.min(1024) as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)?;
        if name_len > MAX_NAME {
            return Err(AutogradError::Malformed(format!("name length {name_len}")));
        }
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| AutogradError::Malformed("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)?;
        if rank > MAX_RANK {
            return Err(AutogradError::Malformed(format!("rank {rank} for {name}")));
        }
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| AutogradError::Malformed(format!("dims {dims:?} overflow")))?;
        let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| {
            AutogradError::Malformed(format!("dims {dims:?} overflow"))
        })?];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    Ok(out)
}
