//! Architecture hyperparameters and the degradation task vocabulary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_bail, Error, Result};

/// Number of resolution levels in the U-shaped backbone.
pub const LEVELS: usize = 4;

/// Restoration task, one per degradation family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Derain,
    Dehaze,
    Deblur,
    Lowlight,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Denoise,
        Task::Derain,
        Task::Dehaze,
        Task::Deblur,
        Task::Lowlight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Denoise => "denoise",
            Task::Derain => "derain",
            Task::Dehaze => "dehaze",
            Task::Deblur => "deblur",
            Task::Lowlight => "lowlight",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

/// Which side of the U a level sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Hyperparameters of the restoration network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Channel width `C` of level 1; level `l` uses `C * 2^(l-1)`.
    pub base_channels: usize,
    /// Blocks per encoder level 1..=4 (level 4 is the bottleneck).
    pub enc_blocks: [usize; LEVELS],
    /// Blocks per decoder level, ordered 3, 2, 1.
    pub dec_blocks: [usize; LEVELS - 1],
    /// Spatial attention window `q`.
    pub window: usize,
    /// Overlap ratio of key/value windows; `tau * window` must be integral.
    pub tau: f64,
    /// Target hard-patch ratio.
    pub gamma0: f64,
    /// Attention heads per level (only the transposed attention level uses them).
    pub heads: [usize; LEVELS],
    /// Number of task prompt components per bank.
    pub task_count: usize,
    /// Spatial size of each prompt component.
    pub prompt_size: usize,
    /// Kernel size of the convolution branch.
    pub conv_kernel: usize,
    /// Channels of the router's global feature.
    pub router_global_channels: usize,
    /// Hidden channels of the router's mask head.
    pub router_hidden: usize,
    /// Gumbel-softmax temperature used in training mode.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            enc_blocks: [2, 4, 4, 4],
            dec_blocks: [4, 4, 2],
            window: 8,
            tau: 1.5,
            gamma0: 0.5,
            heads: [1, 1, 1, 1],
            task_count: 3,
            prompt_size: 16,
            conv_kernel: 3,
            router_global_channels: 8,
            router_hidden: 16,
            temperature: 1.0,
        }
    }
}

impl ModelConfig {
    /// Paper-scale widths (`C = 48`).
    pub fn paper_scale() -> Self {
        Self {
            base_channels: 48,
            ..Self::default()
        }
    }

    /// Channels at level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Side length of the overlapping key/value window, `tau * q`.
    pub fn kv_window(&self) -> usize {
        (self.tau * self.window as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c < 2 || c % 2 != 0 {
            config_bail!("base_channels must be even and >= 2, got {c}");
        }
        if self.window == 0 {
            config_bail!("window must be positive");
        }
        if !(self.tau >= 1.0) {
            config_bail!("tau must be >= 1, got {}", self.tau);
        }
        let kv = self.tau * self.window as f64;
        if (kv - kv.round()).abs() > 1e-9 {
            config_bail!(
                "tau * window must be an integer, got {} * {} = {kv}",
                self.tau,
                self.window
            );
        }
        if !(0.0..=1.0).contains(&self.gamma0) {
            config_bail!("gamma0 must lie in [0, 1], got {}", self.gamma0);
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let ch = self.channels(i + 1);
            if h == 0 || ch % h != 0 {
                config_bail!("heads[{i}] = {h} does not divide level {} channels {ch}", i + 1);
            }
        }
        if self.task_count == 0 {
            config_bail!("task_count must be at least 1");
        }
        if self.prompt_size == 0 {
            config_bail!("prompt_size must be positive");
        }
        if self.conv_kernel % 2 == 0 {
            config_bail!("conv_kernel must be odd, got {}", self.conv_kernel);
        }
        if !(self.temperature > 0.0) {
            config_bail!("temperature must be positive, got {}", self.temperature);
        }
        if self.router_global_channels == 0 || self.router_hidden == 0 {
            config_bail!("router channel counts must be positive");
        }
        Ok(())
    }

    /// Checks that an `h x w` input is divisible by 8 and by the window at every level.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by 8"
            )));
        }
        for level in 1..=LEVELS {
            let (lh, lw) = (h >> (level - 1), w >> (level - 1));
            if lh % self.window != 0 || lw % self.window != 0 {
                return Err(Error::Shape(format!(
                    "level {level} resolution {lh}x{lw} is not divisible by window {}",
                    self.window
                )));
            }
        }
        Ok(())
    }

    /// Total number of spatial-attention sublayers (one per block).
    pub fn spatial_sublayers(&self) -> usize {
        self.enc_blocks.iter().sum::<usize>() + self.dec_blocks.iter().sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::paper_scale().validate().unwrap();
        assert_eq!(ModelConfig::default().spatial_sublayers(), 24);
        assert_eq!(ModelConfig::default().kv_window(), 12);
    }

    #[test]
    fn rejects_fractional_kv_window() {
        let cfg = ModelConfig {
            window: 3,
            tau: 1.5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            heads: [1, 1, 1, 3],
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn input_check_names_level() {
        let cfg = ModelConfig::default();
        cfg.check_input(64, 64).unwrap();
        let err = cfg.check_input(32, 32).unwrap_err().to_string();
        assert!(err.contains("level 4"), "{err}");
        assert!(cfg.check_input(60, 64).is_err());
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!("sharpen".parse::<Task>().is_err());
    }
}
