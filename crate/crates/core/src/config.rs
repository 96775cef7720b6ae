//! Validated run configuration and its TOML form.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::Strategy;
use crate::error::{ReefError, Result};
use crate::spatial::{build_anchor_grid, exact_sqrt};

/// Structural and selection hyperparameters of the adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    pub dim: usize,
    pub tokens: usize,
    pub queries: usize,
    pub bank_capacity: usize,
    pub k_spat: usize,
    pub gamma: usize,
    pub alpha: f32,
    pub sigma: f32,
    pub n_samples: usize,
    pub heads: usize,
    pub blocks: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub strategy: Strategy,
    /// One merge index for all spatial locations instead of one each.
    pub global_k: bool,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            tokens: 64,
            queries: 8,
            bank_capacity: 10,
            k_spat: 25,
            gamma: 1,
            alpha: 0.7,
            sigma: 0.05,
            n_samples: 500,
            heads: 2,
            blocks: 2,
            vocab: 16,
            seq_len: 4,
            strategy: Strategy::Rtc,
            global_k: false,
        }
    }
}

fn require(ok: bool, field: &str, reason: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ReefError::config(field, reason))
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.dim >= 2 && self.dim % 2 == 0, "dim", "must be even and at least 2")?;
        require(self.heads >= 1, "heads", "must be positive")?;
        require(self.dim % self.heads == 0, "heads", format!("must divide dim {}", self.dim))?;
        require(exact_sqrt(self.tokens).is_some_and(|s| s > 0), "tokens", "must be a positive perfect square")?;
        require(exact_sqrt(self.k_spat).is_some_and(|s| s > 0), "k_spat", "must be a positive perfect square")?;
        require(self.k_spat <= self.tokens, "k_spat", "must not exceed tokens")?;
        require(self.gamma >= 1, "gamma", "must be positive")?;
        build_anchor_grid(self.tokens, self.k_spat, self.gamma)
            .map_err(|e| ReefError::config("gamma", e.to_string()))?;
        require((0.0..=1.0).contains(&self.alpha), "alpha", "must lie in [0, 1]")?;
        require(self.sigma.is_finite() && self.sigma > 0.0, "sigma", "must be positive")?;
        require(self.n_samples >= 1, "n_samples", "must be positive")?;
        require(self.bank_capacity >= 1, "bank_capacity", "must be positive")?;
        require(self.queries >= 1, "queries", "must be positive")?;
        require(self.vocab >= 2, "vocab", "needs at least two tokens")?;
        require(self.seq_len >= 1, "seq_len", "must be positive")?;
        Ok(())
    }

    /// Spatial filtering is active whenever it keeps fewer than all tokens.
    pub fn stf_enabled(&self) -> bool {
        self.k_spat < self.tokens
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Optimisation schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_epochs: usize,
    pub main_epochs: usize,
    pub lr: f32,
    pub optimizer: Optimizer,
    /// Streams whose gradients are summed before one update.
    pub batch: usize,
    pub grad_clip: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_epochs: 2,
            main_epochs: 8,
            lr: 0.05,
            optimizer: Optimizer::Sgd,
            batch: 4,
            grad_clip: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.lr.is_finite() && self.lr >= 0.0, "lr", "must be finite and non-negative")?;
        require(self.batch >= 1, "batch", "must be positive")?;
        require(self.grad_clip.is_finite() && self.grad_clip > 0.0, "grad_clip", "must be positive")?;
        Ok(())
    }
}

/// Synthetic corpus parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub streams: usize,
    pub frames: usize,
    pub classes: usize,
    pub signal_fraction: f32,
    pub noise_scale: f32,
    pub signal_strength: f32,
    /// Leading share of each stream where planted frames may appear.
    pub signal_span: f32,
    /// Fraction of streams held out for evaluation.
    pub holdout: f32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            streams: 200,
            frames: 30,
            classes: 4,
            signal_fraction: 0.2,
            noise_scale: 1.0,
            signal_strength: 1.0,
            signal_span: 1.0,
            holdout: 0.2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        require(self.streams >= 2, "streams", "need at least two streams")?;
        require(self.frames >= 1, "frames", "must be positive")?;
        require(self.classes >= 1, "classes", "must be positive")?;
        require(
            self.signal_fraction > 0.0 && self.signal_fraction <= 1.0,
            "signal_fraction",
            "must lie in (0, 1]",
        )?;
        require(
            self.signal_fraction * self.frames as f32 >= 1.0,
            "signal_fraction",
            "must plant at least one frame",
        )?;
        require(self.noise_scale >= 0.0, "noise_scale", "must be non-negative")?;
        require(self.signal_strength >= 0.0, "signal_strength", "must be non-negative")?;
        require(
            self.signal_span > 0.0 && self.signal_span <= 1.0,
            "signal_span",
            "must lie in (0, 1]",
        )?;
        require((0.0..1.0).contains(&self.holdout), "holdout", "must lie in [0, 1)")?;
        let held = (self.streams as f32 * self.holdout).round() as usize;
        require(held < self.streams, "holdout", "leaves no training streams")?;
        Ok(())
    }

    pub fn holdout_count(&self) -> usize {
        (self.streams as f32 * self.holdout).round() as usize
    }
}

/// Everything a command needs, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(alias = "seeds")]
    pub seed: u64,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.adapter.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        require(
            self.data.classes * self.adapter.seq_len <= self.adapter.vocab,
            "vocab",
            "too small to give every class distinct label tokens",
        )
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            ReefError::config(field, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Configuration used by the desk-scale training run.
    pub fn desk() -> Self {
        Self {
            seed: 7,
            adapter: AdapterConfig {
                bank_capacity: 6,
                ..AdapterConfig::default()
            },
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(err: ReefError) -> String {
        match err {
            ReefError::Config { field, .. } => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        assert_eq!(AdapterConfig::default().alpha, 0.7);
        assert_eq!(AdapterConfig::default().bank_capacity, 10);
        assert_eq!(AdapterConfig::default().n_samples, 500);
    }

    #[test]
    fn invalid_fields_are_named() {
        let bad = |f: fn(&mut AdapterConfig)| {
            let mut c = AdapterConfig::default();
            f(&mut c);
            field_of(c.validate().unwrap_err())
        };
        assert_eq!(bad(|c| c.alpha = 1.5), "alpha");
        assert_eq!(bad(|c| c.tokens = 50), "tokens");
        assert_eq!(bad(|c| c.k_spat = 81), "k_spat");
        assert_eq!(bad(|c| c.heads = 3), "heads");
        assert_eq!(bad(|c| c.gamma = 2), "gamma");
        assert_eq!(bad(|c| c.sigma = 0.0), "sigma");
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::desk();
        let text = cfg.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn toml_partial_and_errors() {
        let cfg = RunConfig::from_toml_str("seeds = 3\n[adapter]\nalpha = 0.9\nstrategy = \"fifo\"\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.adapter.alpha, 0.9);
        assert_eq!(cfg.adapter.strategy, Strategy::Fifo);
        assert_eq!(field_of(RunConfig::from_toml_str("[adapter]\nalpha = 2.0\n").unwrap_err()), "alpha");
        assert!(matches!(
            RunConfig::from_toml_str("[adapter]\nstrategy = \"lifo\"\n"),
            Err(ReefError::Config { .. })
        ));
        assert_eq!(field_of(RunConfig::from_toml_str("bogus = 1\n").unwrap_err()), "bogus");
    }
}
