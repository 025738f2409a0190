//! Serializable network and training configuration.

use serde::{Deserialize, Serialize};

use crate::NetError;

/// Structural and loss configuration, written next to every checkpoint so
/// inference can rebuild the exact model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NetConfig {
    /// Encoder stage widths; each stage doubles the previous.
    pub widths: [usize; 4],
    /// Encoder stages (0..=3) that concatenate IR features before
    /// downsampling. Empty for a plain U-Net.
    pub fusion_points: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Perceptual loss weight.
    pub alpha: f64,
    /// Adversarial loss weight.
    pub beta: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            widths: [8, 16, 32, 64],
            fusion_points: vec![0, 1, 2, 3],
            in_channels: 3,
            out_channels: 3,
            alpha: 1.0,
            beta: 1e-5,
        }
    }
}

impl NetConfig {
    /// Full-scale preset mirroring the reference training setup.
    pub fn paper_scale() -> Self {
        NetConfig {
            widths: [64, 128, 256, 512],
            ..NetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.widths.iter().any(|w| *w == 0) {
            return Err(NetError::BadSpec("zero width".into()));
        }
        for k in 0..3 {
            if self.widths[k + 1] != 2 * self.widths[k] {
                return Err(NetError::BadSpec(format!(
                    "widths must double per stage, got {:?}",
                    self.widths
                )));
            }
        }
        if self.fusion_points.iter().any(|p| *p > 3) {
            return Err(NetError::BadSpec(format!(
                "fusion points must lie in 0..=3, got {:?}",
                self.fusion_points
            )));
        }
        Ok(())
    }
}

/// Training loop configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate halves every this many optimizer steps.
    pub halve_every: usize,
    pub seed: u64,
    /// Crop side fed to the network; must be divisible by 16.
    pub crop: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: small widths, small crops, minutes not days.
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            halve_every: 20_000,
            seed: 0,
            crop: 64,
        }
    }
}

impl TrainConfig {
    /// Full-scale preset (learning rate and schedule of the reference
    /// setup); provided for configuration completeness.
    pub fn paper_scale() -> Self {
        TrainConfig {
            steps: 200 * 1000,
            batch_size: 8,
            lr: 4e-5,
            halve_every: 20_000,
            seed: 0,
            crop: 64,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.crop % 16 != 0 || self.crop == 0 {
            return Err(NetError::BadSpec(format!(
                "crop {} must be a positive multiple of 16",
                self.crop
            )));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(NetError::BadSpec("zero batch size or steps".into()));
        }
        Ok(())
    }
}
