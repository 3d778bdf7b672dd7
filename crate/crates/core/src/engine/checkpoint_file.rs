//! Binary checkpoint format.
//!
//! ```text
//! "DSHCKPT1"            8 bytes
//! header length         u32, little-endian
//! header                JSON (config, lineage, losses)
//! weights               f32 little-endian, declaration order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, ConvNetConfig, EpochLoss, Network, TrainConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSHCKPT1";

#[derive(Serialize, Deserialize)]
struct Header {
    id: String,
    parent_id: Option<String>,
    config: ConvNetConfig,
    train_config: Option<TrainConfig>,
    epoch_losses: Vec<EpochLoss>,
    dataset_version: Option<String>,
    created_at: String,
    num_weights: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let weights = self.network.flat_weights();
        let header = Header {
            id: self.id.clone(),
            parent_id: self.parent_id.clone(),
            config: self.network.config().clone(),
            train_config: self.train_config.clone(),
            epoch_losses: self.epoch_losses.clone(),
            dataset_version: self.dataset_version.clone(),
            created_at: self.created_at.clone(),
            num_weights: weights.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * weights.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for w in weights {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_owned());
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < len {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])
            .map_err(|e| Error::CorruptCheckpoint(format!("header: {e}")))?;
        let blob = &body[len..];
        if blob.len() != 4 * header.num_weights {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} weight bytes, found {}",
                4 * header.num_weights,
                blob.len()
            )));
        }
        let weights: Vec<f64> = blob
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        let network = Network::from_weights(&header.config, &weights)?;
        Ok(Checkpoint {
            id: header.id,
            parent_id: header.parent_id,
            train_config: header.train_config,
            epoch_losses: header.epoch_losses,
            dataset_version: header.dataset_version,
            created_at: header.created_at,
            network,
        })
    }
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    crate::dataset::write_atomic(path, &checkpoint.to_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
