use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DynplError, Result};
use crate::model::baselines::{CnnMaxParams, ConvAttnParams};
use crate::model::logreg::LogRegModel;
use crate::model::params::DynplParams;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params")]
pub enum ModelKind {
    Dynpl(DynplParams),
    CnnMax(CnnMaxParams),
    ConvAttn(ConvAttnParams),
    LogReg(LogRegModel),
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Dynpl(_) => "dynpl",
            ModelKind::CnnMax(_) => "cnn_max",
            ModelKind::ConvAttn(_) => "conv_attn",
            ModelKind::LogReg(_) => "lr_oracle",
        }
    }
}

/// Versioned training artifact. The hashes tie the parameters to the exact
/// label space and vocabulary they index into; loading against anything else
/// is refused.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub label_space_hash: String,
    pub vocab_hash: String,
    /// echo of the training configuration for provenance
    pub config: serde_json::Value,
    pub model: ModelKind,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let ckpt: Checkpoint = serde_json::from_reader(file)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(DynplError::Data(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Load and verify that the checkpoint was produced against the given
    /// label-space and vocabulary hashes.
    pub fn load_verified(
        path: &Path,
        label_space_hash: &str,
        vocab_hash: &str,
    ) -> Result<Checkpoint> {
        let ckpt = Self::load(path)?;
        ckpt.verify(label_space_hash, vocab_hash)?;
        Ok(ckpt)
    }

    pub fn verify(&self, label_space_hash: &str, vocab_hash: &str) -> Result<()> {
        if self.label_space_hash != label_space_hash {
            return Err(DynplError::Data(format!(
                "label space hash mismatch: checkpoint {} vs current {}",
                self.label_space_hash, label_space_hash
            )));
        }
        if self.vocab_hash != vocab_hash {
            return Err(DynplError::Data(format!(
                "vocabulary hash mismatch: checkpoint {} vs current {}",
                self.vocab_hash, vocab_hash
            )));
        }
        Ok(())
    }

    pub fn dynpl(&self) -> Result<&DynplParams> {
        match &self.model {
            ModelKind::Dynpl(p) => Ok(p),
            other => Err(DynplError::Data(format!(
                "expected a dynpl checkpoint, found {}",
                other.name()
            ))),
        }
    }
}
