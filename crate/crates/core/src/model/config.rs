use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};
use crate::graph::NODE_FEATURES;
use crate::nn::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub gat_layers: usize,
    pub heads: usize,
    pub hidden_channels: usize,
    pub linear_layers: usize,
    pub dropout: f64,
    #[serde(default = "default_in_dim")]
    pub in_dim: usize,
    #[serde(default = "default_out_dim")]
    pub out_dim: usize,
    /// Feed `log(1 + w)` of each edge into the attention score.
    #[serde(default = "default_true")]
    pub edge_weights: bool,
}

fn default_in_dim() -> usize {
    NODE_FEATURES
}

fn default_out_dim() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl ArchConfig {
    pub fn teacher() -> Self {
        ArchConfig::new(5, 8, 32, 3, 0.2)
    }

    pub fn student() -> Self {
        ArchConfig::new(2, 4, 32, 3, 0.2)
    }

    pub fn new(gat_layers: usize, heads: usize, hidden_channels: usize, linear_layers: usize, dropout: f64) -> Self {
        ArchConfig {
            gat_layers,
            heads,
            hidden_channels,
            linear_layers,
            dropout,
            in_dim: NODE_FEATURES,
            out_dim: 2,
            edge_weights: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        if self.gat_layers == 0 || self.heads == 0 || self.linear_layers == 0 || self.in_dim == 0 {
            return bad(format!("layer, head and input counts must be positive: {self:?}"));
        }
        if self.hidden_channels < 2 {
            return bad(format!("hidden_channels must be at least 2, got {}", self.hidden_channels));
        }
        if self.out_dim != 2 {
            return bad(format!("out_dim must be 2 for binary detection, got {}", self.out_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Hidden size of each jumping-knowledge LSTM direction.
    pub fn jk_hidden(&self) -> usize {
        self.hidden_channels / 2
    }

    /// Output width of every GAT layer.
    pub fn gat_widths(&self) -> Vec<usize> {
        (0..self.gat_layers)
            .map(|l| if l + 1 < self.gat_layers { self.heads * self.hidden_channels } else { self.hidden_channels })
            .collect()
    }

    /// Widths through the linear head, input first: halving from the
    /// jumping-knowledge output down to `out_dim`.
    pub fn head_widths(&self) -> Vec<usize> {
        let jk_out = 2 * self.jk_hidden();
        let mut widths = vec![jk_out];
        for k in 1..self.linear_layers {
            widths.push((jk_out >> k).max(self.out_dim));
        }
        widths.push(self.out_dim);
        widths
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    Stratified,
    /// Last `val_fraction` of the windows, in trace order.
    Chronological,
}

/// Validation metric used to keep the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Accuracy,
    F1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub alpha: f64,
    pub tau: f64,
    pub gamma_focal: f64,
    pub use_focal: bool,
    pub window: usize,
    pub stride: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub split: SplitMode,
    pub select_by: Selection,
    /// Global gradient-norm cap; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            batch_size: 128,
            epochs: 100,
            warmup_epochs: 5,
            alpha: 0.5,
            tau: 2.0,
            gamma_focal: 1.0,
            use_focal: false,
            window: 50,
            stride: 50,
            val_fraction: 0.2,
            seed: 0,
            split: SplitMode::Stratified,
            select_by: Selection::Accuracy,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} outside (0, 1)", self.val_fraction));
        }
        if self.window < 2 || self.stride == 0 {
            return bad(format!("window {} / stride {} invalid", self.window, self.stride));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.loss().validate()?;
        Ok(())
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { alpha: self.alpha, tau: self.tau, gamma: self.gamma_focal, use_focal: self.use_focal }
    }

    pub(crate) fn focal_gamma(&self) -> Option<f64> {
        self.use_focal.then_some(self.gamma_focal)
    }
}

/// First 16 hex digits of SHA-256 over the compact JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json).iter().take(8).map(|b| format!("{b:02x}")).collect()
}
