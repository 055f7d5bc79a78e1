//! Model checkpoint format.
//!
//! Layout: magic `UNDL`, one version byte, a u32-LE header length, a JSON
//! header (config, parameter names/shapes/byte offsets, CRC32 of the data
//! section, config hash, memo flag), then the parameter buffers concatenated
//! as little-endian f32.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LmConfig, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UNDL";
pub const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
    /// Byte length of this buffer.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: LmConfig,
    params: Vec<ParamEntry>,
    /// CRC32 (IEEE) of the whole data section.
    checksum: u32,
    /// FNV-1a hash of the canonical config JSON; compared before any
    /// merge or KL evaluation between checkpoints.
    config_hash: u64,
    /// Set on auxiliary models fine-tuned on the forget set. Such a model
    /// contains exactly the content meant to be forgotten; treat the file
    /// accordingly.
    #[serde(default)]
    memo_forget_trained: bool,
}

/// FNV-1a over the canonical JSON of the config.
pub fn config_hash(config: &LmConfig) -> u64 {
    let json = serde_json::to_string(config).expect("config serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// CRC32 (IEEE 802.3, reflected).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB88320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFFFFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

/// Serialize parameters to the checkpoint format.
pub fn save(params: &ModelParams, path: &Path, memo_forget_trained: bool) -> Result<()> {
    let mut entries = Vec::with_capacity(params.tensors.len());
    let mut data = Vec::new();
    for (name, t) in &params.tensors {
        let offset = data.len() as u64;
        for v in &t.data {
            data.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape.clone(),
            offset,
            len: (t.data.len() * 4) as u64,
        });
    }
    let header = Header {
        config: params.config.clone(),
        params: entries,
        checksum: crc32(&data),
        config_hash: config_hash(&params.config),
        memo_forget_trained,
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&[VERSION])?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&data)?;
    Ok(())
}

/// Load a checkpoint, verifying magic, version, checksum, and shapes.
pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.len() < 9 || &bytes[0..4] != MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: missing UNDL magic",
            path.display()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::CorruptCheckpoint(format!(
            "unsupported checkpoint version {}",
            bytes[4]
        )));
    }
    let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    if bytes.len() < 9 + hlen {
        return Err(Error::CorruptCheckpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[9..9 + hlen])?;
    let data = &bytes[9 + hlen..];
    if crc32(data) != header.checksum {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: data checksum mismatch",
            path.display()
        )));
    }
    header.config.validate().map_err(|e| {
        Error::CorruptCheckpoint(format!("{}: bad config: {e}", path.display()))
    })?;

    let mut tensors = BTreeMap::new();
    for entry in &header.params {
        let start = entry.offset as usize;
        let end = start + entry.len as usize;
        if end > data.len() || entry.len % 4 != 0 {
            return Err(Error::CorruptCheckpoint(format!(
                "buffer {} out of bounds",
                entry.name
            )));
        }
        let values: Vec<f32> = data[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let numel: usize = entry.shape.iter().product();
        if numel != values.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "buffer {} shape/length mismatch",
                entry.name
            )));
        }
        tensors.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
    }
    Ok(LoadedCheckpoint {
        params: ModelParams {
            config: header.config,
            tensors,
        },
        config_hash: header.config_hash,
        memo_forget_trained: header.memo_forget_trained,
    })
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub params: ModelParams,
    pub config_hash: u64,
    pub memo_forget_trained: bool,
}

/// Error out unless two parameter sets share a config hash (and shapes).
pub fn check_compatible(a: &ModelParams, b: &ModelParams, what: &str) -> Result<()> {
    if config_hash(&a.config) != config_hash(&b.config) || !a.compatible_with(b) {
        return Err(Error::IncompatibleCheckpoint(format!(
            "{what}: models have different configs or parameter sets"
        )));
    }
    Ok(())
}
