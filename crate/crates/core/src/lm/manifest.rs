//! Model checkpoints: θ tensors plus the manifest needed to rebuild the
//! frozen side and check it has not drifted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::NamedTensors;
use crate::error::{Error, Result};
use crate::prompt::{Mode, PromptConfig};
use crate::tokenizer::Tokenizer;

use super::backbone::{Backbone, BackboneConfig, BackboneInit};
use super::model::{AdapterConfig, IiaConfig, Model, Theta, THETA_FORMAT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub backbone: BackboneConfig,
    pub backbone_init: BackboneInit,
    pub backbone_seed: u64,
    pub backbone_fingerprint: String,
    pub mode: Mode,
    pub train_seed: u64,
    pub dataset_fingerprint: Option<String>,
    pub adapter: AdapterConfig,
    pub iia: IiaConfig,
    pub embedder_hidden: usize,
    pub prompt: PromptConfig,
    pub tokens: Vec<String>,
    pub best_val_hr1: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl Manifest {
    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_tokens(self.tokens.clone())
    }

    /// Rebuilds the backbone and checks its fingerprint.
    pub fn backbone(&self) -> Result<Backbone> {
        let b = Backbone::new(self.backbone.clone(), self.backbone_init, &self.tokenizer()?, self.backbone_seed)?;
        if b.fingerprint() != self.backbone_fingerprint {
            return Err(Error::Checkpoint("rebuilt backbone does not match the recorded fingerprint".into()));
        }
        Ok(b)
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(self.backbone()?, self.tokenizer()?, self.mode)
    }

    pub fn empty_theta(&self) -> Theta {
        Theta::zeros(self.backbone.layers, self.backbone.d_model, self.adapter, self.iia, self.embedder_hidden)
    }
}

pub fn checkpoint_tensors(theta: &Theta, manifest: &Manifest) -> Result<NamedTensors> {
    let mut t = theta.to_tensors();
    t.metadata = serde_json::to_value(manifest)?;
    Ok(t)
}

pub fn save_checkpoint(path: &Path, theta: &Theta, manifest: &Manifest) -> Result<()> {
    checkpoint_tensors(theta, manifest)?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Theta, Manifest)> {
    let t = NamedTensors::load(path)?;
    t.require_format(THETA_FORMAT)?;
    let manifest: Manifest = serde_json::from_value(t.metadata.clone())?;
    let mut theta = manifest.empty_theta();
    theta.load_tensors(&t)?;
    Ok((theta, manifest))
}
