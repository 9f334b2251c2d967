//! Model file: magic, format version, input dim, hidden sizes, then every
//! parameter as a little-endian f32 (per layer: weights row-major, then
//! biases) and a trailing SHA-256 of all preceding bytes. Header integers
//! are little-endian u32.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::mlp::param_count;
use super::{DistilledModel, TrainError};

pub const MODEL_MAGIC: [u8; 4] = *b"MCDM";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub fn model_bytes(model: &DistilledModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * model.params.len() + DIGEST_LEN);
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.input_dim as u32).to_le_bytes());
    out.extend_from_slice(&(model.hidden_sizes.len() as u32).to_le_bytes());
    for &h in &model.hidden_sizes {
        out.extend_from_slice(&(h as u32).to_le_bytes());
    }
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, TrainError> {
    let b = bytes.get(*pos..*pos + 4).ok_or_else(|| TrainError::Format("header is truncated".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(b.try_into().expect("slice of four bytes")))
}

/// Parses a model file. The version is read before the checksum so files
/// from a newer writer report a version mismatch.
pub fn model_from_bytes(bytes: &[u8]) -> Result<DistilledModel, TrainError> {
    if bytes.len() < 8 {
        return Err(TrainError::ChecksumMismatch);
    }
    if bytes[..4] != MODEL_MAGIC {
        return Err(TrainError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes"));
    if version > MODEL_FORMAT_VERSION {
        return Err(TrainError::VersionMismatch { found: version, supported: MODEL_FORMAT_VERSION });
    }
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(TrainError::ChecksumMismatch);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(TrainError::ChecksumMismatch);
    }
    let mut pos = 8;
    let input_dim = read_u32(body, &mut pos)? as usize;
    let layers = read_u32(body, &mut pos)? as usize;
    if layers > 64 {
        return Err(TrainError::Format(format!("{layers} hidden layers")));
    }
    let hidden_sizes = (0..layers).map(|_| read_u32(body, &mut pos).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
    let mut sizes = vec![input_dim];
    sizes.extend(&hidden_sizes);
    sizes.push(1);
    let count = param_count(&sizes);
    let rest = &body[pos..];
    if rest.len() != 4 * count {
        return Err(TrainError::Format(format!("expected {count} parameters, found {} bytes", rest.len())));
    }
    let params = rest.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
    let model = DistilledModel { input_dim, hidden_sizes, params, provenance: None };
    model.validate()?;
    Ok(model)
}

pub fn save_model(model: &DistilledModel, path: &Path) -> Result<(), TrainError> {
    model.validate()?;
    fs::write(path, model_bytes(model))
        .map_err(|source| TrainError::Io { path: path.display().to_string(), source })
}

/// Loads a model file. Provenance is not part of the file and comes back
/// empty.
pub fn load_model(path: &Path) -> Result<DistilledModel, TrainError> {
    let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.display().to_string(), source })?;
    model_from_bytes(&bytes)
}
