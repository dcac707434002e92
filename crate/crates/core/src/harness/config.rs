use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::OptimizerConfig;
use crate::error::{ensure, CcnError, Result};
use crate::model::{doubling_widths, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    /// Distance-histogram vectors of the node labels.
    Histogram,
    /// One-hot node labels.
    Onehot,
}

/// Everything a training run depends on. Every key is optional in the file
/// except `dataset`; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub task: TaskKind,
    pub order: usize,
    pub levels: usize,
    pub use_adjacency: bool,
    /// Width of the first level; later levels double it.
    pub base_width: usize,
    /// Explicit per-level widths; overrides `base_width` when non-empty.
    pub widths: Vec<usize>,
    pub contraction_count: usize,
    pub features: FeatureKind,
    pub histogram_depth: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_min: f64,
    /// Per-step learning-rate decrement; negative means "reach `lr_min` at
    /// the last step".
    pub lr_decay: f64,
    /// Global gradient-norm bound per step; 0 disables clipping.
    pub grad_clip: f64,
    pub epochs: usize,
    pub seed: u64,
    pub split_seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            task: TaskKind::Classification,
            order: 2,
            levels: 2,
            use_adjacency: true,
            base_width: 8,
            widths: Vec::new(),
            contraction_count: 10,
            features: FeatureKind::Histogram,
            histogram_depth: 10,
            lr: 1e-3,
            momentum: 0.9,
            lr_min: 1e-6,
            lr_decay: -1.0,
            grad_clip: 1.0,
            epochs: 200,
            seed: 0,
            split_seeds: vec![0],
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CcnError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CcnError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.dataset.is_relative() {
            cfg.dataset = base.join(&cfg.dataset);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.dataset.as_os_str().is_empty(), Config, "`dataset` is required");
        ensure!(self.levels >= 1, Config, "`levels` must be at least 1");
        ensure!(
            self.widths.is_empty() || self.widths.len() == self.levels,
            Config,
            "`widths` lists {} levels but `levels` is {}",
            self.widths.len(),
            self.levels
        );
        ensure!(self.base_width > 0, Config, "`base_width` must be positive");
        ensure!(self.contraction_count > 0, Config, "`contraction_count` must be positive");
        ensure!(self.histogram_depth > 0, Config, "`histogram_depth` must be positive");
        ensure!(
            self.lr >= self.lr_min && self.lr_min >= 0.0,
            Config,
            "need lr ≥ lr_min ≥ 0"
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Config,
            "`momentum` must lie in [0, 1)"
        );
        ensure!(self.grad_clip >= 0.0, Config, "`grad_clip` must be non-negative");
        ensure!(!self.split_seeds.is_empty(), Config, "`split_seeds` is empty");
        Ok(())
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        if self.widths.is_empty() {
            doubling_widths(self.base_width, self.levels)
        } else {
            self.widths.clone()
        }
    }

    pub fn model_config(&self, input_dim: usize, output_dim: usize) -> ModelConfig {
        ModelConfig {
            order: self.order,
            widths: self.layer_widths(),
            use_adjacency: self.use_adjacency,
            contraction_count: self.contraction_count,
            input_dim,
            output_dim,
        }
    }

    pub fn optimizer(&self, total_steps: usize) -> OptimizerConfig {
        let base = OptimizerConfig {
            lr: self.lr,
            momentum: self.momentum,
            lr_min: self.lr_min,
            decay: self.lr_decay.max(0.0),
            clip_norm: self.grad_clip,
        };
        if self.lr_decay < 0.0 {
            base.with_linear_schedule(total_steps)
        } else {
            base
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_keys() {
        let cfg = RunConfig::from_toml("dataset = \"data/MUTAG\"\n").unwrap();
        assert_eq!(cfg.levels, 2);
        assert_eq!(cfg.layer_widths(), vec![8, 16]);
        assert_eq!(cfg.contraction_count, 10);
        assert_eq!((cfg.lr, cfg.momentum, cfg.lr_min), (1e-3, 0.9, 1e-6));
        assert_eq!(cfg.histogram_depth, 10);
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = RunConfig::from_toml("dataset = \"x\"\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn dataset_is_required() {
        assert!(RunConfig::from_toml("epochs = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_text() {
        let cfg = RunConfig {
            dataset: "d".into(),
            widths: vec![4, 6],
            task: TaskKind::Regression,
            features: FeatureKind::Onehot,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn schedule_defaults_to_reaching_the_floor() {
        let cfg = RunConfig::from_toml("dataset = \"x\"\n").unwrap();
        let opt = cfg.optimizer(999);
        assert!((opt.decay * 999.0 - (1e-3 - 1e-6)).abs() < 1e-15);
    }
}
