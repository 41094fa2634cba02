//! Little-endian map checkpoint: magic, version, count, then fixed-size records.

use super::{Gaussian, GaussianMap, SplatError};
use crate::fsutil::write_atomic;
use nalgebra::Vector3;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GSPL";
const HEADER: usize = 4 + 4 + 8;
const RECORD: usize = 3 * 8 + 3 * 4 + 4 + 4;

pub fn encode_map(map: &GaussianMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + RECORD * map.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(map.len() as u64).to_le_bytes());
    for g in map.gaussians() {
        for x in g.position.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for c in g.color.iter() {
            out.extend_from_slice(&(*c as f32).to_le_bytes());
        }
        out.extend_from_slice(&(g.opacity as f32).to_le_bytes());
        out.extend_from_slice(&(g.radius as f32).to_le_bytes());
    }
    out
}

pub fn decode_map(bytes: &[u8]) -> Result<GaussianMap, SplatError> {
    let bad = |m: &str| SplatError::Checkpoint(m.to_string());
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(bad("missing header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER..];
    if count.checked_mul(RECORD) != Some(body.len()) {
        return Err(bad(&format!("expected {count} records, found {} bytes", body.len())));
    }
    let f64_at = |r: &[u8], i: usize| f64::from_le_bytes(r[i..i + 8].try_into().unwrap());
    let f32_at = |r: &[u8], i: usize| f32::from_le_bytes(r[i..i + 4].try_into().unwrap()) as f64;
    let gaussians = body
        .chunks_exact(RECORD)
        .map(|r| Gaussian {
            position: Vector3::new(f64_at(r, 0), f64_at(r, 8), f64_at(r, 16)),
            color: Vector3::new(f32_at(r, 24), f32_at(r, 28), f32_at(r, 32)),
            opacity: f32_at(r, 36),
            radius: f32_at(r, 40),
        })
        .collect();
    let map = GaussianMap::from_gaussians(gaussians);
    map.validate()?;
    Ok(map)
}

pub fn write_map(path: &Path, map: &GaussianMap) -> Result<(), SplatError> {
    write_atomic(path, &encode_map(map)).map_err(|source| SplatError::Io { path: path.into(), source })
}

pub fn read_map(path: &Path) -> Result<GaussianMap, SplatError> {
    let bytes = std::fs::read(path).map_err(|source| SplatError::Io { path: path.into(), source })?;
    decode_map(&bytes)
}
