//! Binary parameter checkpoints.
//!
//! Layout (little-endian): magic `DRIMLCKPT`, `u32` format version, `u64`
//! parameter count, then per parameter: `u64` name length, UTF-8 name,
//! `u64` rank, `u64` dims, `f64` values.

use std::io::{Read, Write};

use super::{DiffError, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 9] = b"DRIMLCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for p in store.params() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Upper bound on any length field, to fail fast on corrupt input.
const MAX_LEN: u64 = 1 << 32;

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(r)?;
    if v > MAX_LEN {
        return Err(DiffError::Checkpoint(format!("{what} {v} out of range")));
    }
    Ok(v as usize)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 9];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DiffError::Checkpoint("bad magic".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != FORMAT_VERSION {
        return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_len(&mut r, "parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_len(&mut r, "name length")?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| DiffError::Checkpoint(e.to_string()))?;
        let rank = read_len(&mut r, "rank")?;
        let shape = (0..rank)
            .map(|_| read_len(&mut r, "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        store.add(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

/// Loads a checkpoint into an existing store with the same layout.
pub fn restore_into<R: Read>(r: R, store: &mut ParamStore) -> Result<()> {
    let loaded = read_checkpoint(r)?;
    store.copy_from(&loaded)
}
