//! Environment selection: which experience model to train against and the
//! matching policy features and task generator.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::chat::ChatClient;
use crate::curriculum::{RemoteTaskGenerator, ShopTaskGenerator, TaskGenerator};
use crate::error::Result;
use crate::experience::{ExperienceModel, RemoteModel, RemoteModelConfig, ShopConfig, ShopFeatures, ShopModel, TabularPerturbedModel};
use crate::mdp::TabularMdp;
use crate::policy::{FeatureMap, HashedTextFeatures, TabularFeatures};
use crate::rng::{rng_for, rng_from_seed, Stream};

/// Default shop training tasks: plain purchases plus price-capped and
/// reviews-gated ones.
pub const SHOP_DEFAULT_TASKS: [&str; 8] = [
    "buy a red mug",
    "buy any blue shoes",
    "buy a green shirt under $30",
    "buy a black lamp",
    "buy a white backpack after reading reviews",
    "buy a red lamp under $30",
    "buy a blue mug after reading reviews",
    "buy a green backpack",
];

pub const TABULAR_TASK: &str = "control";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TabularEnvConfig {
    /// Explicit MDP document; a random MDP is generated when absent.
    pub mdp_path: Option<PathBuf>,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub r_max: f64,
    pub mdp_seed: u64,
    /// Perturbation of the experience model relative to the MDP.
    pub eps_p: f64,
    pub eps_r: f64,
}

impl Default for TabularEnvConfig {
    fn default() -> Self {
        Self {
            mdp_path: None,
            n_states: 6,
            n_actions: 3,
            gamma: 0.9,
            r_max: 1.0,
            mdp_seed: 0,
            eps_p: 0.0,
            eps_r: 0.0,
        }
    }
}

impl TabularEnvConfig {
    /// The unperturbed MDP.
    pub fn real_mdp(&self) -> Result<TabularMdp> {
        match &self.mdp_path {
            Some(p) => TabularMdp::load(p),
            None => TabularMdp::random(
                self.n_states,
                self.n_actions,
                self.gamma,
                self.r_max,
                &mut rng_from_seed(self.mdp_seed),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteEnvConfig {
    pub model: RemoteModelConfig,
    /// Hashed policy feature dimension.
    pub feature_dim: usize,
}

impl Default for RemoteEnvConfig {
    fn default() -> Self {
        Self {
            model: RemoteModelConfig::default(),
            feature_dim: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum EnvConfig {
    Shop(ShopConfig),
    Tabular(TabularEnvConfig),
    Remote(RemoteEnvConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Shop(ShopConfig::default())
    }
}

pub struct Environment {
    pub model: Box<dyn ExperienceModel>,
    pub features: Box<dyn FeatureMap>,
    /// Identifies the feature map in checkpoints.
    pub feature_id: String,
    pub generator: Option<Box<dyn TaskGenerator>>,
    pub default_tasks: Vec<String>,
}

impl EnvConfig {
    pub fn build(&self) -> Result<Environment> {
        match self {
            EnvConfig::Shop(cfg) => {
                let model = ShopModel::new(cfg)?;
                let catalog = model.catalog().clone();
                Ok(Environment {
                    model: Box::new(model),
                    features: Box::new(ShopFeatures),
                    feature_id: "shop".into(),
                    generator: Some(Box::new(ShopTaskGenerator { catalog })),
                    default_tasks: SHOP_DEFAULT_TASKS.iter().map(|s| s.to_string()).collect(),
                })
            }
            EnvConfig::Tabular(cfg) => {
                let real = cfg.real_mdp()?;
                let (n_states, n_actions) = (real.n_states(), real.n_actions());
                let mut rng = rng_for(cfg.mdp_seed, Stream::Model, &[]);
                let model = TabularPerturbedModel::new(real, cfg.eps_p, cfg.eps_r, &mut rng)?;
                Ok(Environment {
                    model: Box::new(model),
                    features: Box::new(TabularFeatures { n_states, n_actions }),
                    feature_id: format!("tabular:{n_states}x{n_actions}"),
                    generator: None,
                    default_tasks: vec![TABULAR_TASK.to_string()],
                })
            }
            EnvConfig::Remote(cfg) => {
                let endpoint = cfg.model.endpoint.clone().with_env();
                let generator = RemoteTaskGenerator::new(ChatClient::from_config(&endpoint)?);
                Ok(Environment {
                    model: Box::new(RemoteModel::from_config(cfg.model.clone())?),
                    features: Box::new(HashedTextFeatures { dim: cfg.feature_dim }),
                    feature_id: format!("hashed-text:{}", cfg.feature_dim),
                    generator: Some(Box::new(generator)),
                    default_tasks: Vec::new(),
                })
            }
        }
    }
}
