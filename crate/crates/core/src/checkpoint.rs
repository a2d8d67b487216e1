//! Binary container for named `f32` tensors plus a text manifest.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic      8 bytes  "BATCKPT1"
//! manifest   len, then UTF-8 bytes
//! count      number of tensors
//! per tensor:
//!   name     len, then UTF-8 bytes
//!   rank     followed by `rank` extents
//!   data     product(extents) little-endian f32 values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{BatError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"BATCKPT1";

pub fn write_to(w: &mut impl Write, manifest: &str, params: &ParamSet<f32>) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    write_bytes(w, manifest.as_bytes())?;
    write_u32(w, params.len() as u32)?;
    for (name, t) in params.iter() {
        write_bytes(w, name.as_bytes())?;
        write_u32(w, t.rank() as u32)?;
        for &e in t.shape() {
            write_u32(w, e as u32)?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_from(r: &mut impl Read) -> Result<(String, ParamSet<f32>)> {
    let mut magic = [0u8; 8];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(BatError::data("not a checkpoint file (bad magic)"));
    }
    let manifest = String::from_utf8(read_bytes(r)?)
        .map_err(|_| BatError::data("checkpoint manifest is not UTF-8"))?;
    let count = read_u32(r)?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = String::from_utf8(read_bytes(r)?)
            .map_err(|_| BatError::data("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        read_exact(r, &mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok((manifest, params))
}

pub fn save(path: &Path, manifest: &str, params: &ParamSet<f32>) -> Result<()> {
    let file = File::create(path).map_err(|e| BatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, manifest, params)
        .and_then(|_| w.flush())
        .map_err(|e| BatError::io(path, e))
}

pub fn load(path: &Path) -> Result<(String, ParamSet<f32>)> {
    let file = File::open(path).map_err(|e| BatError::io(path, e))?;
    read_from(&mut BufReader::new(file))
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> std::io::Result<()> {
    write_u32(w, b.len() as u32)?;
    w.write_all(b)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| BatError::data("truncated checkpoint"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    Ok(buf)
}
