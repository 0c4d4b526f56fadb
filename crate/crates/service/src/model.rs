use std::path::Path;
use std::sync::Arc;

use dlvm::{Checkpoint, DecoderWeights};
use sha2::{Digest, Sha256};

/// A loaded decoder checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub weights: Arc<DecoderWeights>,
    pub checkpoint: Checkpoint,
    /// Hex SHA-256 of the checkpoint file bytes.
    pub sha256: String,
}

impl Model {
    pub fn from_json_bytes(bytes: &[u8]) -> dlvm::Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| dlvm::Error::Parse(e.to_string()))?;
        let checkpoint = Checkpoint::from_json(text)?;
        let weights = Arc::new(checkpoint.to_weights()?);
        let sha256 = Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self { weights, checkpoint, sha256 })
    }

    pub fn load(path: &Path) -> dlvm::Result<Self> {
        Self::from_json_bytes(&std::fs::read(path)?)
    }

    pub fn from_weights(weights: &DecoderWeights) -> dlvm::Result<Self> {
        let json = Checkpoint::from_weights(weights, 0, serde_json::Value::Null).to_json()?;
        Self::from_json_bytes(json.as_bytes())
    }
}
