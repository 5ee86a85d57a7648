use serde::{Deserialize, Serialize};

use crate::autodiff::{DEFAULT_BETAS, DEFAULT_LR};
use crate::error::{Error, Result};

/// Shape of the toy encoders and heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input images are `input_size x input_size`.
    pub input_size: usize,
    /// Total downsampling; one stride-2 3x3 conv block per factor of two.
    pub stride: usize,
    /// Output feature channels `c`.
    pub channels: usize,
    /// Channels after the 1x1 attention projections `c'`.
    pub proj_channels: usize,
    /// Channels of the intermediate blocks (one fewer than the block count).
    pub trunk_channels: Vec<usize>,
    /// Hidden channels of the filtering-mask head.
    pub mask_channels: usize,
    /// Share every block except the first between the two encoders.
    pub shared_trunk: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 64,
            stride: 8,
            channels: 32,
            proj_channels: 16,
            trunk_channels: vec![16, 32],
            mask_channels: 16,
            shared_trunk: true,
        }
    }
}

impl EncoderConfig {
    /// The smallest configuration used for finite-difference checks: a 4x4
    /// grid with `c = 8`.
    pub fn tiny() -> Self {
        EncoderConfig {
            input_size: 32,
            stride: 8,
            channels: 8,
            proj_channels: 4,
            trunk_channels: vec![4, 8],
            mask_channels: 4,
            shared_trunk: true,
        }
    }

    pub fn blocks(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    /// Feature grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        let side = self.input_size / self.stride;
        (side, side)
    }

    pub fn cells(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(Error::Invalid(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(self.stride) {
            return Err(Error::Invalid(format!(
                "input size {} is not divisible by stride {}",
                self.input_size, self.stride
            )));
        }
        if self.trunk_channels.len() + 1 != self.blocks() {
            return Err(Error::Invalid(format!(
                "stride {} needs {} intermediate channel counts, got {}",
                self.stride,
                self.blocks() - 1,
                self.trunk_channels.len()
            )));
        }
        if self.proj_channels == 0 || self.proj_channels > self.channels {
            return Err(Error::Invalid(format!(
                "projection channels {} must be in 1..={}",
                self.proj_channels, self.channels
            )));
        }
        if self.channels == 0 || self.mask_channels == 0 || self.trunk_channels.contains(&0) {
            return Err(Error::Invalid("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// How the attention loss is normalized over its `n x n` terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// Divide by `n`.
    #[default]
    PerRow,
    /// Divide by `n^2`.
    PerEntry,
}

/// Loss weights and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_att: f64,
    pub lambda_par: f64,
    pub lambda_msk: f64,
    /// Solve on mask-selected pairs; when false every pair is used.
    pub filtering: bool,
    pub attention_norm: AttentionNorm,
    pub lr: f64,
    pub betas: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_att: 1.0,
            lambda_par: 0.01,
            lambda_msk: 0.1,
            filtering: true,
            attention_norm: AttentionNorm::PerRow,
            lr: DEFAULT_LR,
            betas: DEFAULT_BETAS,
            epochs: 20,
            batch_size: 1,
            seed: 0,
        }
    }
}

/// Component that an ablation switches off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Zero the attention-loss weight.
    Att,
    /// Zero the parameter-loss weight.
    Par,
    /// Zero the mask-loss weight (the mask still selects pairs).
    Msk,
    /// Solve on all pairs and drop the mask loss.
    Filter,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "att" => Ok(Ablation::Att),
            "par" => Ok(Ablation::Par),
            "msk" => Ok(Ablation::Msk),
            "filter" => Ok(Ablation::Filter),
            other => Err(Error::Invalid(format!(
                "unknown ablation '{other}' (expected att, par, msk or filter)"
            ))),
        }
    }
}

impl TrainConfig {
    pub fn ablate(&mut self, what: Ablation) {
        match what {
            Ablation::Att => self.lambda_att = 0.0,
            Ablation::Par => self.lambda_par = 0.0,
            Ablation::Msk => self.lambda_msk = 0.0,
            Ablation::Filter => {
                self.filtering = false;
                self.lambda_msk = 0.0;
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_att", self.lambda_att),
            ("lambda_par", self.lambda_par),
            ("lambda_msk", self.lambda_msk),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Invalid(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        Ok(())
    }
}
