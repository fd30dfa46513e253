//! Binary checkpoint format.
//!
//! Layout (little-endian): magic "DVCK", u32 version = 1, u32 entry count;
//! per entry: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, then
//! f32 data (product of dims values).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{shape_len, ParamStore, Scalar};

const MAGIC: &[u8; 4] = b"DVCK";
const VERSION: u32 = 1;

/// Write all parameters of a store, in registration order, as f32.
pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("parameter name too long: {}", p.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        if p.shape.len() > u8::MAX as usize {
            return Err(Error::Format(format!("rank too large for {}", p.name)));
        }
        w.write_all(&[p.shape.len() as u8])?;
        for d in &p.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in p.data.iter() {
            w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Raw entries of a checkpoint file: (name, shape, f32 data).
pub fn read_checkpoint_entries(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| Error::Format(format!("parameter name not UTF-8: {e}")))?;
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let rank = b1[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let len = shape_len(&shape);
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4));
        }
        entries.push((name, shape, data));
    }
    Ok(entries)
}

/// Load a checkpoint into an existing store. The file must contain exactly
/// the store's parameters (same names and shapes). Momentum buffers are left
/// untouched.
pub fn load_checkpoint_into<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let entries = read_checkpoint_entries(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} entries, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (name, shape, data) in entries {
        let id = store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if store.get(id).shape != shape {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for `{name}`: file {:?}, model {:?}",
                shape,
                store.get(id).shape
            )));
        }
        let buf = store.data_mut(id);
        for (dst, src) in buf.iter_mut().zip(&data) {
            *dst = S::from_f64(f64::from(*src));
        }
    }
    Ok(())
}
