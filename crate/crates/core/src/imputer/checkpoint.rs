//! Binary checkpoint: magic, format version, a JSON header with the config
//! and shape, then every named tensor as little-endian f32.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{dims_of, Imputer, ImputerConfig, ImputerShape, Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PMDLCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ImputerConfig,
    shape: ImputerShape,
}

pub fn write_checkpoint<W: Write>(model: &Imputer, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: model.config().clone(),
        shape: model.shape().clone(),
    })?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let tensors = model.params().named_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, shape, data) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r)?))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    Ok(buf)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Imputer> {
    if &read_exact::<_, 8>(&mut r)? != MAGIC {
        return Err(Error::Format("not an imputer checkpoint".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let header_len = read_u64(&mut r)? as usize;
    if header_len > 1 << 24 {
        return Err(Error::Format("oversized checkpoint header".into()));
    }
    let header: Header = serde_json::from_slice(&read_bytes(&mut r, header_len)?)?;
    header.config.validate()?;
    let mut params = Params::zeros(&dims_of(&header.config, &header.shape));
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", expected.len())));
    }
    for ((name, shape), slot) in expected.iter().zip(params.tensors_mut()) {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 256 {
            return Err(Error::Format("oversized tensor name".into()));
        }
        let found = String::from_utf8(read_bytes(&mut r, name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &found != name {
            return Err(Error::Format(format!("expected tensor {name}, found {found}")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Format(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        for v in slot.iter_mut() {
            *v = f64::from(f32::from_le_bytes(read_exact(&mut r)?));
        }
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Imputer::from_parts(header.config, header.shape, params)
}

pub fn save_checkpoint(model: &Imputer, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Imputer> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
