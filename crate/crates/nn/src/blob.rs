//! Length-prefixed little-endian tensor blobs: the payload format of the
//! model files. Each blob is `name_len:u32, name, ndim:u32, dims:u64*,
//! data:f64*`.

use std::io::{Read, Write};

use crate::{NnError, Result, Tensor};

/// Magic for model files built from these blobs.
pub const BLOB_MAGIC: &[u8; 4] = b"BLM1";

pub fn write_tensor_blob<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<()> {
    let name = name.as_bytes();
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor_blob<R: Read>(r: &mut R) -> Result<(String, Tensor)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 1 << 16 {
        return Err(NnError::Format(format!("name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(NnError::Format(format!("rank {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        shape.push(u64::from_le_bytes(b) as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(NnError::Format(format!("tensor of {n} elements")));
    }
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((name, Tensor::new(shape, data)?))
}
