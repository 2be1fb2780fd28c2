//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes   b"CBDMCKPT"
//! version  u32 LE
//! digest   32 bytes  SHA-256 of DenoiserConfig::canonical_string
//! count    u64 LE    number of parameters
//! values   count x f64 LE, in layout order
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CBDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 32 + 8;

pub(crate) fn config_digest(config: &DenoiserConfig) -> [u8; 32] {
    Sha256::digest(config.canonical_string().as_bytes()).into()
}

impl DenoiserParams {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&config_digest(&self.config));
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a checkpoint written for `config`; the digest must match.
    pub fn from_checkpoint_bytes(config: &DenoiserConfig, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Checkpoint(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        if bytes[12..44] != config_digest(config) {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let count = u64::from_le_bytes(bytes[44..52].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != count * 8 {
            return Err(Error::Checkpoint(format!(
                "expected {} value bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DenoiserParams::from_values(config.clone(), values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(config: &DenoiserConfig, path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_checkpoint_bytes(config, &bytes)
    }
}
