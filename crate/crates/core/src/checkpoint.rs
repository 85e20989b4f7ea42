//! On-disk model checkpoints.

use std::path::Path;

use activedt_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::dt::{DTConfig, DecisionTransformer};
use crate::error::{CoreError, Result};
use crate::reinforce::MlpPolicy;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Checkpoint {
    Dt {
        version: u32,
        config: DTConfig,
        params: ParamStore,
    },
    Mlp {
        version: u32,
        obs_dim: usize,
        hidden: usize,
        params: ParamStore,
    },
}

impl Checkpoint {
    pub fn from_dt(model: &DecisionTransformer) -> Self {
        Checkpoint::Dt {
            version: CHECKPOINT_VERSION,
            config: model.config,
            params: model.params.clone(),
        }
    }

    pub fn from_mlp(model: &MlpPolicy) -> Self {
        Checkpoint::Mlp {
            version: CHECKPOINT_VERSION,
            obs_dim: model.obs_dim,
            hidden: model.hidden,
            params: model.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Self = serde_json::from_str(&text)
            .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
        let version = match &ck {
            Checkpoint::Dt { version, .. } | Checkpoint::Mlp { version, .. } => *version,
        };
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Format(format!(
                "{}: checkpoint version {version}, expected {CHECKPOINT_VERSION}",
                path.display()
            )));
        }
        Ok(ck)
    }

    pub fn into_dt(self) -> Result<DecisionTransformer> {
        match self {
            Checkpoint::Dt { config, params, .. } => DecisionTransformer::from_params(config, params),
            Checkpoint::Mlp { .. } => Err(CoreError::Usage("expected a Decision Transformer checkpoint".into())),
        }
    }

    pub fn into_mlp(self) -> Result<MlpPolicy> {
        match self {
            Checkpoint::Mlp { obs_dim, hidden, params, .. } => Ok(MlpPolicy { obs_dim, hidden, params }),
            Checkpoint::Dt { .. } => Err(CoreError::Usage("expected an MLP checkpoint".into())),
        }
    }
}
