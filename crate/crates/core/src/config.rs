//! Run configuration: one TOML document with `market`, `init`, `train` and
//! `model` sections. Every field is optional and defaults to the reference
//! experiment; unknown keys are rejected.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::approximator::InitScheme;
use crate::error::{Error, Result};
use crate::market::{InitConfig, MarketGame, MarketParams};
use crate::nash_model::{FeatureNormalization, ModelSpec, NashQModel};
use crate::trainer::TrainConfig;

/// User-facing network and normalization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub value_hidden: Vec<usize>,
    pub phi_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub main_hidden: Vec<usize>,
    pub positivity_eps: f64,
    /// Trades are divided by this before entering the advantage head.
    pub action_scale: f64,
    /// Rewards and values are divided by this inside the loss.
    pub value_scale: f64,
    /// Price feature center; the mean-reversion level when absent.
    pub price_center: Option<f64>,
    pub price_scale: f64,
    /// Inventory feature scale; the inventory bound when absent.
    pub inventory_scale: Option<f64>,
    pub init: InitScheme,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            value_hidden: vec![20, 60, 60, 20],
            phi_hidden: vec![20, 20, 20],
            embed_dim: 8,
            main_hidden: vec![20, 40, 20],
            positivity_eps: 1e-3,
            action_scale: 10.0,
            value_scale: 100.0,
            price_center: None,
            price_scale: 2.0,
            inventory_scale: None,
            init: InitScheme::HeNormal,
        }
    }
}

impl ModelConfig {
    /// Price centered and scaled, time by the horizon, inventories by the
    /// inventory scale.
    pub fn market_normalization(&self, market: &MarketParams) -> FeatureNormalization {
        let q_scale = self.inventory_scale.unwrap_or(market.q_bound);
        FeatureNormalization {
            own_center: vec![self.price_center.unwrap_or(market.theta_mr), 0.0, 0.0],
            own_scale: vec![self.price_scale, market.horizon as f64, q_scale],
            other_center: 0.0,
            other_scale: q_scale,
        }
    }

    pub fn spec(&self, normalization: FeatureNormalization) -> ModelSpec {
        let mut spec = ModelSpec::new(
            normalization,
            &self.value_hidden,
            &self.phi_hidden,
            self.embed_dim,
            &self.main_hidden,
        );
        spec.positivity_eps = self.positivity_eps;
        spec.action_scale = self.action_scale;
        spec.value_scale = self.value_scale;
        spec.init = self.init;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub market: MarketParams,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            market: MarketParams::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.init.validate()?;
        self.train.validate()?;
        self.model_spec().validate()
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.model
            .spec(self.model.market_normalization(&self.market))
    }

    pub fn game(&self) -> Result<MarketGame> {
        MarketGame::new(self.market.clone(), self.init.clone())
    }

    pub fn build_model<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<NashQModel> {
        NashQModel::new(self.model_spec(), rng)
    }
}
