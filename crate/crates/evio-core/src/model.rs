//! The persisted price-response model: everything needed to forecast and to
//! derive bid/offer curves from new price data, in one self-contained file.

use crate::dataset::{FeatureConfig, FeatureStats};
use crate::feasibility::BoundsModel;
use crate::optimality::{BlockConfig, UtilityModel};
use serde::{Deserialize, Serialize};

/// How the model was produced. `created_at` is the only non-reproducible
/// field; byte-level comparisons neutralize exactly this one field.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub data_hash: String,
    pub h_grid: Vec<f64>,
    pub m_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
    pub chosen_h: f64,
    pub chosen_m: f64,
    pub chosen_gamma: f64,
    pub software_version: String,
    pub created_at: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriceResponseModel {
    pub bounds: BoundsModel,
    pub utilities: UtilityModel,
    pub blocks: BlockConfig,
    pub feature_config: FeatureConfig,
    pub feature_stats: FeatureStats,
    pub provenance: Provenance,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("model expects {expected} features, data provides {got}")]
    FeatureMismatch { expected: usize, got: usize },
}

impl PriceResponseModel {
    pub fn feature_dim(&self) -> usize {
        self.feature_config.dim()
    }

    pub fn check_features(&self, dim: usize) -> Result<(), ModelError> {
        if dim != self.feature_dim() {
            return Err(ModelError::FeatureMismatch {
                expected: self.feature_dim(),
                got: dim,
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
