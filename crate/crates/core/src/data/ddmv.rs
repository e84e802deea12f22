//! The little-endian `DDMV` volume format: magic, version u32, dtype u8
//! (0 = f64 intensities, 1 = u8 labels), D, H, W as u32, then the payload
//! row-major with W fastest.

use std::fs;
use std::path::Path;

use super::{LabelVolume, Volume};
use crate::binio::ByteReader;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DDMV";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Bytes before the payload.
pub const DDMV_HEADER_LEN: usize = 4 + 4 + 1 + 12;

fn header(dtype: u8, dims: [usize; 3]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(DDMV_HEADER_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(dtype);
    for d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let mut buf = header(DTYPE_F64, v.dims());
    buf.reserve(v.data().len() * 8);
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write(path, &buf)
}

pub fn write_labels(path: &Path, v: &LabelVolume) -> Result<()> {
    let mut buf = header(DTYPE_U8, v.dims());
    buf.extend_from_slice(v.labels());
    write(path, &buf)
}

/// Parses the header and returns the payload and dims after checking the
/// payload length for `elem` bytes per voxel.
fn open(path: &Path, bytes: &[u8], dtype: u8, elem: usize) -> Result<([usize; 3], Vec<u8>)> {
    let mut r = ByteReader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, expected DDMV"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let found = r.u8()?;
    if found != dtype {
        return Err(Error::format(path, format!("dtype {found}, expected {dtype}")));
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    let len = dims
        .iter()
        .try_fold(elem, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let payload = r.take(len)?.to_vec();
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    Ok((dims, payload))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, payload) = open(path, &bytes, DTYPE_F64, 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Volume::new(dims, data).map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_labels(path: &Path, classes: usize) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (dims, payload) = open(path, &bytes, DTYPE_U8, 1)?;
    LabelVolume::new(dims, payload, classes).map_err(|e| Error::format(path, e.to_string()))
}
