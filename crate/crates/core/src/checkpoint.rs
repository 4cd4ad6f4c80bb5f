//! Binary container shared by checkpoints and saved datasets.
//!
//! ```text
//! "UBPA"                      4 bytes magic
//! version                     u32 little-endian (currently 1)
//! header length               u32 little-endian
//! header                      UTF-8 JSON object, with a "blocks" array of {name, len}
//! blocks                      Σ len little-endian f64 values, in header order
//! ```

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"UBPA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a UBPA container (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated: {0}")]
    Truncated(String),
    #[error("container header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

/// Decoded container: JSON header (without the block table) and named blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Value,
    pub blocks: Vec<(String, Vec<f64>)>,
}

impl Container {
    pub fn new(header: Value) -> Self {
        Self {
            header,
            blocks: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) {
        self.blocks.push((name.into(), values.to_vec()));
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut header = self.header.clone();
        let Value::Object(map) = &mut header else {
            return Err(CheckpointError::Header("header must be a JSON object".into()));
        };
        let table: Vec<BlockInfo> = self
            .blocks
            .iter()
            .map(|(name, v)| BlockInfo {
                name: name.clone(),
                len: v.len(),
            })
            .collect();
        map.insert(
            "blocks".into(),
            serde_json::to_value(table).map_err(|e| CheckpointError::Header(e.to_string()))?,
        );
        let json = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let header_len = u32::try_from(json.len())
            .map_err(|_| CheckpointError::Header("header longer than 4 GiB".into()))?;
        let floats: usize = self.blocks.iter().map(|(_, v)| v.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, values) in &self.blocks {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 12 {
            return Err(CheckpointError::Truncated("preamble".into()));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < header_len {
            return Err(CheckpointError::Truncated("header".into()));
        }
        let mut header: Value = serde_json::from_slice(&body[..header_len])
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let Value::Object(map) = &mut header else {
            return Err(CheckpointError::Header("header must be a JSON object".into()));
        };
        let table: Vec<BlockInfo> = map
            .remove("blocks")
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| CheckpointError::Header(e.to_string()))?
            .unwrap_or_default();

        let mut raw = &body[header_len..];
        let mut blocks = Vec::with_capacity(table.len());
        for info in table {
            let nbytes = info
                .len
                .checked_mul(8)
                .ok_or_else(|| CheckpointError::Header("block length overflow".into()))?;
            if raw.len() < nbytes {
                return Err(CheckpointError::Truncated(format!("block {:?}", info.name)));
            }
            let values = raw[..nbytes]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            raw = &raw[nbytes..];
            blocks.push((info.name, values));
        }
        if !raw.is_empty() {
            return Err(CheckpointError::Truncated(format!(
                "{} trailing bytes after the last block",
                raw.len()
            )));
        }
        Ok(Self { header, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
