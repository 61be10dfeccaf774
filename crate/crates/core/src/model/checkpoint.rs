//! Binary checkpoint format.
//!
//! Layout: magic `DFPO`, format version as 4-byte little-endian unsigned,
//! 4-byte little-endian config-blob length, the config as UTF-8 JSON, then
//! every parameter array as 32-bit little-endian floats in canonical order
//! (embedding, positional, layers in index order with attention then FFN,
//! final norm, output projection).

use super::{init_params, ModelConfig, ModelParams};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"DFPO";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("malformed config blob: {0}")]
    BadConfig(String),
}

pub fn save_checkpoint(
    params: &ModelParams,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let blob = serde_json::to_vec(&params.config)
        .map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(&blob)?;
    for array in params.arrays() {
        for &v in array.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    read_exact(&mut r, &mut word, "config length")?;
    let blob_len = u32::from_le_bytes(word) as usize;
    let mut blob = vec![0u8; blob_len];
    read_exact(&mut r, &mut blob, "config blob")?;
    let config: ModelConfig =
        serde_json::from_slice(&blob).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    config.validate().map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    // Materialize the right shapes, then overwrite every value from the file.
    let mut params = init_params(&config, 0).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;
    for array in params.arrays_mut() {
        for slot in array.data_mut() {
            read_exact(&mut r, &mut word, "parameter data")?;
            *slot = f64::from(f32::from_le_bytes(word));
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(CheckpointError::Truncated("trailing bytes after parameters".into()));
    }
    Ok((params.clone(), params.config))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated(what.into())
        } else {
            CheckpointError::Io(e)
        }
    })
}
