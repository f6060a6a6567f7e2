//! The HVOL volume file format.
//!
//! ```text
//! "HVOL" | u16 version | u32 nx | u32 ny | u32 nz
//! f32 sx | f32 sy | f32 sz | u8 dtype (0 = f32)
//! str contrast_tag | str subject_id
//! voxels, little-endian f32, x fastest
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Spacing is stored at
//! single precision.

use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::Result;
use crate::volume::{Spacing, Volume};

pub const HVOL_MAGIC: &[u8; 4] = b"HVOL";
pub const HVOL_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn to_bytes(v: &Volume) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(HVOL_MAGIC);
    w.u16(HVOL_VERSION);
    for d in v.dims() {
        w.u32(d as u32);
    }
    for s in v.spacing().0 {
        w.f32(s as f32);
    }
    w.u8(DTYPE_F32);
    w.str(&v.contrast_tag);
    w.str(&v.subject_id);
    for &x in v.data() {
        w.f32(x);
    }
    w.finish()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes, "HVOL");
    if r.take(4)? != HVOL_MAGIC {
        return Err(r.error("bad magic"));
    }
    let version = r.u16()?;
    if version != HVOL_VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let spacing = Spacing([r.f32()? as f64, r.f32()? as f64, r.f32()? as f64]);
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(r.error(format!("unsupported dtype code {dtype}")));
    }
    let contrast_tag = r.str()?;
    let subject_id = r.str()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.error("dimension product overflows"))?;
    let raw = r.take(n.checked_mul(4).ok_or_else(|| r.error("volume too large"))?)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    r.expect_end()?;
    Ok(Volume::new(dims, spacing, data)?.with_tags(contrast_tag, subject_id))
}

pub fn write(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    std::fs::write(path, to_bytes(v))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Volume> {
    from_bytes(&std::fs::read(path)?)
}
