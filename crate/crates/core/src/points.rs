//! LiDAR point clouds and their on-disk binary format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An N x 4 set of LiDAR returns: (x, y, z, intensity), in a stated frame.
///
/// Coordinates are kept in f64 so rigid-transform round trips stay exact to
/// well below a nanometer; the on-disk format stores f32.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64; 4]> {
        self.points.iter()
    }

    /// Append all points of `other`.
    pub fn extend_from(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().all(|p| p.iter().all(|v| v.is_finite()))
    }
}

const MAGIC: &[u8; 4] = b"DVPC";
const VERSION: u32 = 1;

/// Write a cloud in the binary point format: magic "DVPC", u32 version = 1,
/// u32 point count, then count x 4 little-endian f32 (x, y, z, intensity).
pub fn write_dvpc<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u32).to_le_bytes())?;
    for p in cloud.iter() {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a cloud written by [`write_dvpc`].
pub fn read_dvpc<R: Read>(r: &mut R) -> Result<PointCloud> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad point file magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported point file version {version}"
        )));
    }
    r.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut points = Vec::with_capacity(count);
    let mut fbuf = [0u8; 4];
    for _ in 0..count {
        let mut p = [0.0f64; 4];
        for v in &mut p {
            r.read_exact(&mut fbuf)?;
            *v = f32::from_le_bytes(fbuf) as f64;
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn save_dvpc(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dvpc(&mut f, cloud)?;
    f.flush()?;
    Ok(())
}

pub fn load_dvpc(path: &Path) -> Result<PointCloud> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dvpc(&mut f)
}
