//! Flat key-value run configuration.

use crate::dataset_io::{ReadingsOptions, SplitRatios};
use crate::error::{Error, Result};
use crate::tape::Activation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::str::FromStr;

/// Model components that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Prior,
    Posterior,
    MultiRank,
    MultiScale,
}

impl Component {
    pub const ALL: [Component; 4] =
        [Component::Prior, Component::Posterior, Component::MultiRank, Component::MultiScale];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Prior => "prior",
            Component::Posterior => "posterior",
            Component::MultiRank => "multi_rank",
            Component::MultiScale => "multi_scale",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL.into_iter().find(|c| c.as_str() == s).ok_or_else(|| {
            Error::Config(format!("unknown component `{s}` (expected prior, posterior, multi_rank or multi_scale)"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Embedding dimension.
    pub d: usize,
    pub prior_layers: usize,
    pub ranks: Vec<usize>,
    pub windows: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight of the self term in the correlation objective (diagnostic only).
    pub beta: f64,
    pub input_steps: usize,
    pub output_steps: usize,
    pub seed: u64,
    pub ablate: Vec<Component>,
    pub activation: Activation,
    pub temporal_bidirectional: bool,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    pub head_hidden: usize,
    /// Keep only the k strongest scores per row of the affinity/penalty
    /// graphs; 0 keeps all.
    pub posterior_top_k: usize,
    pub left_init_noise: f64,
    pub train_stride: usize,
    pub eval_stride: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub mask_sentinel: bool,
    pub sentinel: f64,
    pub mask_metrics: bool,
    pub mape_floor: f64,
    pub horizons: Vec<usize>,
    pub dataset: String,
    pub readings: Option<String>,
    pub adjacency: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 64,
            prior_layers: 6,
            ranks: vec![3, 4, 6],
            windows: vec![3, 4, 6],
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 100,
            beta: 1.0,
            input_steps: 12,
            output_steps: 12,
            seed: 0,
            ablate: Vec::new(),
            activation: Activation::Relu,
            temporal_bidirectional: false,
            grad_clip: 5.0,
            head_hidden: 128,
            posterior_top_k: 0,
            left_init_noise: 0.01,
            train_stride: 1,
            eval_stride: 1,
            split_train: 0.7,
            split_val: 0.1,
            split_test: 0.2,
            early_stop_patience: 0,
            mask_sentinel: true,
            sentinel: 0.0,
            mask_metrics: true,
            mape_floor: 1e-3,
            horizons: vec![3, 6, 12],
            dataset: "unnamed".to_string(),
            readings: None,
            adjacency: None,
        }
    }
}

impl TrainConfig {
    /// Small desk-scale profile.
    pub fn tiny() -> Self {
        Self { d: 16, prior_layers: 2, epochs: 5, head_hidden: 32, ..Self::default() }
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "default" | "full" => Ok(Self::default()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown profile `{other}` (expected default or tiny)"))),
        }
    }

    pub fn enabled(&self, c: Component) -> bool {
        !self.ablate.contains(&c)
    }

    pub fn split(&self) -> SplitRatios {
        SplitRatios::new(self.split_train, self.split_val, self.split_test)
    }

    pub fn readings_options(&self) -> ReadingsOptions {
        ReadingsOptions { sentinel: self.mask_sentinel.then_some(self.sentinel) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.head_hidden == 0 {
            return bad("d and head_hidden must be positive".into());
        }
        if self.input_steps == 0 || self.output_steps == 0 {
            return bad("input_steps and output_steps must be positive".into());
        }
        for (kind, list) in [("rank", &self.ranks), ("window", &self.windows)] {
            if list.is_empty() {
                return bad(format!("at least one {kind} is required"));
            }
            for &v in list {
                if v == 0 || self.input_steps % v != 0 {
                    return bad(format!(
                        "input_steps ({}) must be divisible by every {kind}; {v} does not divide it",
                        self.input_steps
                    ));
                }
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be nonnegative".into());
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return bad("window strides must be at least 1".into());
        }
        if !self.enabled(Component::MultiRank) && !self.enabled(Component::MultiScale) {
            return bad("ablating both multi_rank and multi_scale leaves no embedding for fusion".into());
        }
        if let Some(h) = self.horizons.iter().find(|h| **h == 0 || **h > self.output_steps) {
            return bad(format!("horizon {h} outside 1..={}", self.output_steps));
        }
        if !(self.mape_floor >= 0.0) {
            return bad("mape_floor must be nonnegative".into());
        }
        self.split().validate()
    }

    /// Number of fused embeddings (active ranks plus active windows).
    pub fn n_active_branches(&self) -> usize {
        let r = if self.enabled(Component::MultiRank) { self.ranks.len() } else { 0 };
        let s = if self.enabled(Component::MultiScale) { self.windows.len() } else { 0 };
        r + s
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::tiny().validate().unwrap();
        let c = TrainConfig::default();
        assert_eq!((c.d, c.prior_layers, c.batch_size, c.epochs), (64, 6, 32, 100));
        assert_eq!(c.learning_rate, 0.001);
    }

    #[test]
    fn divisibility_is_enforced() {
        let c = TrainConfig { input_steps: 10, ..TrainConfig::default() };
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
    }

    #[test]
    fn both_branches_ablated_is_rejected() {
        let c = TrainConfig { ablate: Component::ALL.to_vec(), ..TrainConfig::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { ablate: vec![Component::MultiRank], ..TrainConfig::default() };
        c.validate().unwrap();
        assert_eq!(c.n_active_branches(), 3);
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c =
            TrainConfig { ablate: vec![Component::Posterior], readings: Some("r.csv".into()), ..TrainConfig::tiny() };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert_eq!(TrainConfig::from_toml("d = 8").unwrap().d, 8);
        assert_ne!(c.hash(), TrainConfig::tiny().hash());
    }
}
