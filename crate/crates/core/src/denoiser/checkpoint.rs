//! Checkpoint files.
//!
//! Layout (little endian): `"FCKP"`, `u16` version (1), `u32` JSON length,
//! the [`ArchSpec`] as UTF-8 JSON, `u64` parameter count, then the parameters
//! as `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ArchSpec, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn::Real;

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u16 = 1;

pub fn encode<T: Real>(model: &DenoiserModel<T>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(model.arch())?;
    let mut out = Vec::with_capacity(18 + json.len() + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.params() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<DenoiserModel<T>> {
    let truncated = || Error::Format("truncated checkpoint".into());
    if bytes.len() < 10 {
        return Err(truncated());
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let json_end = 10usize.checked_add(json_len).ok_or_else(truncated)?;
    let count_end = json_end.checked_add(8).ok_or_else(truncated)?;
    if bytes.len() < count_end {
        return Err(truncated());
    }
    let arch: ArchSpec = serde_json::from_slice(&bytes[10..json_end])?;
    let count = u64::from_le_bytes(bytes[json_end..count_end].try_into().unwrap()) as usize;
    let body = &bytes[count_end..];
    if Some(body.len()) != count.checked_mul(4) {
        return Err(Error::Format(format!(
            "checkpoint body has {} bytes for {count} parameters",
            body.len()
        )));
    }
    let params = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    DenoiserModel::from_params(arch, params)
}

pub fn save<T: Real>(path: impl AsRef<Path>, model: &DenoiserModel<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(model)?)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<DenoiserModel<T>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}
