//! Binary checkpoint format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "NASHDQN\0"
//! 8       4     format version, u32 little-endian
//! 12      8     header length H in bytes, u64 little-endian
//! 20      H     UTF-8 JSON header
//! 20+H    8*P   parameter values, f64 little-endian, flat order
//! ```
//!
//! The header carries the resolved model spec (network shapes,
//! normalization, positivity epsilon, scales), the tensor table and the run
//! configuration as TOML text. Values are stored as raw bits, so a
//! save/load cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::approximator::{ParameterSet, TensorInfo};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nash_model::{ModelSpec, NashQModel};

pub const MAGIC: &[u8; 8] = b"NASHDQN\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelSpec,
    tensors: Vec<TensorInfo>,
    /// Episodes trained so far.
    episode: usize,
    run_config: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: NashQModel,
    pub config: RunConfig,
    pub episode: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.spec().clone(),
            tensors: self.model.params().tensors().to_vec(),
            episode: self.episode,
            run_config: self.config.to_toml()?,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let values = self.model.params().values();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let h_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(h_len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let raw = &bytes[20 + h_len..];
        if raw.len() % 8 != 0 {
            return Err(bad("parameter block is not a whole number of f64 values"));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let params = ParameterSet::from_parts(header.tensors, values)?;
        let model = NashQModel::from_parts(header.model, params)?;
        let config = RunConfig::from_toml(&header.run_config)?;
        Ok(Self {
            model,
            config,
            episode: header.episode,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
