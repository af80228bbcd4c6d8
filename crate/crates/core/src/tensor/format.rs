//! "AWTF" tensor files: magic, u32 LE version, u8 dtype (0 = f32), u8 ndim,
//! `ndim` u32 LE dims, then the row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const AWTF_MAGIC: &[u8; 4] = b"AWTF";
pub const AWTF_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

pub fn write_awtf_to<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    w.write_all(AWTF_MAGIC)?;
    w.write_all(&AWTF_VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, t.ndim() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_awtf_from<T: Scalar, R: Read>(r: &mut R, context: &str) -> Result<Tensor<T>> {
    let fmt = |msg: String| Error::format(context, msg);
    let mut head = [0u8; 10];
    r.read_exact(&mut head)
        .map_err(|e| fmt(format!("truncated header: {e}")))?;
    if &head[..4] != AWTF_MAGIC {
        return Err(fmt(format!("bad magic {:?}", &head[..4])));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != AWTF_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    if head[8] != DTYPE_F32 {
        return Err(fmt(format!("unsupported dtype {}", head[8])));
    }
    let ndim = head[9] as usize;
    if ndim == 0 {
        return Err(fmt("zero-rank tensor".into()));
    }
    let mut dims = vec![0u8; 4 * ndim];
    r.read_exact(&mut dims)
        .map_err(|e| fmt(format!("truncated dims: {e}")))?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|e| fmt(format!("truncated payload for shape {shape:?}: {e}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(&shape, data).map_err(|e| fmt(e.to_string()))
}

pub fn write_awtf<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_awtf_to(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_awtf<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let t = read_awtf_from(&mut r, &path.display().to_string())?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::format(path.display().to_string(), "trailing bytes")),
        Err(e) => Err(Error::io(path, e)),
    }
}
