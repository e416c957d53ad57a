//! FGRID raster files and 8-bit PGM previews.
//!
//! Layout (little endian): `"FGRD"`, `u16` version (1), `u32` width, `u32`
//! height, `f64` origin x, `f64` origin y, `f64` pixel size, then
//! `height * width` `f32` values row-major, top row first. Nodata is a quiet NaN.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Grid;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FGRD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 8 * 3;

pub fn encode(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + grid.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    let (x0, y0) = grid.origin();
    out.extend_from_slice(&x0.to_le_bytes());
    out.extend_from_slice(&y0.to_le_bytes());
    out.extend_from_slice(&grid.pixel_size().to_le_bytes());
    for &v in grid.values() {
        let v = if v.is_finite() { v as f32 } else { f32::NAN };
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated FGRID header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad FGRID magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported FGRID version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let width = u32_at(6);
    let height = u32_at(10);
    let x0 = f64_at(14);
    let y0 = f64_at(22);
    let pixel_size = f64_at(30);
    let n = width
        .checked_mul(height)
        .ok_or_else(|| Error::Format("FGRID dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != n * 4 {
        return Err(Error::Format(format!(
            "FGRID body has {} bytes, expected {}",
            body.len(),
            n * 4
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Grid::with_georef(width, height, pixel_size, (x0, y0), values)
}

pub fn write(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(grid))?;
    w.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<Grid> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Binary PGM (P5) with a min-max stretch over valid pixels; nodata maps to 0.
pub fn encode_pgm(grid: &Grid) -> Vec<u8> {
    let (lo, hi) = grid.valid_range().unwrap_or((0.0, 1.0));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    out.extend(grid.values().iter().map(|&v| {
        if v.is_finite() {
            (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: impl AsRef<Path>, grid: &Grid) -> Result<()> {
    std::fs::write(path, encode_pgm(grid))?;
    Ok(())
}
