//! Binary checkpoint: magic, version, JSON metadata, then named parameter
//! blocks (shape + little-endian `f32` data).
//!
//! ```text
//! b"GVLPCKPT" u32 version
//! u64 meta_len  meta_len bytes of JSON (CheckpointMeta)
//! u32 block_count
//! per block: u32 name_len name u32 ndim u64×ndim f32×numel
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{ModelConfig, ModelParams};
use crate::assembler::AssemblyConfig;

pub const MAGIC: &[u8; 8] = b"GVLPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("metadata: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("block {index}: expected `{expected}` {expected_shape:?}, found `{found}` {found_shape:?}")]
    Block {
        index: usize,
        expected: String,
        expected_shape: Vec<usize>,
        found: String,
        found_shape: Vec<usize>,
    },
    #[error("expected {expected} blocks, found {found}")]
    BlockCount { expected: usize, found: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

/// Everything needed to rebuild inputs for a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub assembly: AssemblyConfig,
    pub vocab: Vec<String>,
    pub step: u64,
    /// Config hash of the corpus the model was trained on.
    pub corpus_hash: String,
    pub run_hash: String,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    meta: &CheckpointMeta,
    params: &ModelParams<f32>,
) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let json = serde_json::to_vec(meta)?;
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    let infos = params.block_infos();
    w.write_u32::<LittleEndian>(infos.len() as u32)?;
    for (info, data) in infos.iter().zip(params.blocks()) {
        w.write_u32::<LittleEndian>(info.name.len() as u32)?;
        w.write_all(info.name.as_bytes())?;
        w.write_u32::<LittleEndian>(info.shape.len() as u32)?;
        for &d in &info.shape {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &x in data {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(
    mut r: R,
) -> Result<(CheckpointMeta, ModelParams<f32>), CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let meta: CheckpointMeta = serde_json::from_slice(&json)?;
    meta.model.validate().map_err(CheckpointError::Config)?;

    let mut params = ModelParams::<f32>::zeros(&meta.model);
    let infos = params.block_infos();
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != infos.len() {
        return Err(CheckpointError::BlockCount {
            expected: infos.len(),
            found: count,
        });
    }
    for (index, (info, data)) in infos.iter().zip(params.blocks_mut()).enumerate() {
        let name_len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len.min(1 << 16)];
        r.read_exact(&mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim.min(8))
            .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if name != info.name || shape != info.shape {
            return Err(CheckpointError::Block {
                index,
                expected: info.name.clone(),
                expected_shape: info.shape.clone(),
                found: name,
                found_shape: shape,
            });
        }
        r.read_f32_into::<LittleEndian>(data)?;
    }
    Ok((meta, params))
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ModelParams<f32>,
) -> Result<(), CheckpointError> {
    write_checkpoint(BufWriter::new(File::create(path)?), meta, params)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams<f32>), CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
