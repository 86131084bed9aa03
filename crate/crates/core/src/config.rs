//! Run configuration and its `key = value` text form.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Everything that determines a model architecture and a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// FEN feature width `C`.
    pub channels: usize,
    pub fen_blocks: usize,
    /// Channel segments `n` of the prior-gated attention.
    pub attention_segments: usize,
    pub enable_water_prior: bool,
    pub enable_degrad_prior: bool,
    pub enable_sample_prior: bool,
    pub enable_full_scale: bool,
    /// Spatial factor (1, 2 or 4) used as the single alignment anchor when
    /// full-scale alignment is off.
    pub anchor_scale: usize,
    /// Side of the learned spatial grid behind each water-type embedding.
    pub water_grid: usize,
    /// Whether the enhancement plugin sits in front of the task network.
    pub use_plugin: bool,
    pub min_lr: f64,
    pub max_lr: f64,
    pub warmup_steps: usize,
    /// Zero means "epochs × steps per epoch".
    pub total_steps: usize,
    pub lambda_l1: f64,
    pub lambda_ssim: f64,
    /// `(epoch, image side)` pairs, sorted by epoch. Empty keeps the corpus size.
    pub progressive_sizes: Vec<(usize, usize)>,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub momentum: f64,
    /// Multiplier on the plugin's gradients; for SGD a learning-rate scale.
    pub plugin_grad_scale: f64,
}

impl Default for RunConfig {
    /// Enhancement-task defaults.
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 32,
            fen_blocks: 3,
            attention_segments: 4,
            enable_water_prior: true,
            enable_degrad_prior: true,
            enable_sample_prior: true,
            enable_full_scale: true,
            anchor_scale: 2,
            water_grid: 4,
            use_plugin: true,
            min_lr: 1e-6,
            max_lr: 2e-4,
            warmup_steps: 50,
            total_steps: 0,
            lambda_l1: 1.0,
            lambda_ssim: 0.1,
            progressive_sizes: Vec::new(),
            epochs: 15,
            batch_size: 4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.95,
            momentum: 0.9,
            plugin_grad_scale: 1.0,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "channels",
    "fen_blocks",
    "attention_segments",
    "enable_water_prior",
    "enable_degrad_prior",
    "enable_sample_prior",
    "enable_full_scale",
    "anchor_scale",
    "water_grid",
    "use_plugin",
    "min_lr",
    "max_lr",
    "warmup_steps",
    "total_steps",
    "lambda_l1",
    "lambda_ssim",
    "progressive_sizes",
    "epochs",
    "batch_size",
    "weight_decay",
    "beta1",
    "beta2",
    "momentum",
    "plugin_grad_scale",
];

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{}` for `{}`", value.trim(), key)))
}

fn parse_sizes(value: &str) -> Result<Vec<(usize, usize)>> {
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|pair| {
            let (e, s) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("progressive size `{}` is not epoch:size", pair)))?;
            Ok((parse("progressive_sizes", e)?, parse("progressive_sizes", s)?))
        })
        .collect()
}

impl RunConfig {
    /// Water-type classifier pretraining defaults.
    pub fn classifier() -> Self {
        Self {
            min_lr: 1e-9,
            max_lr: 2.4e-3,
            warmup_steps: 100,
            epochs: 20,
            batch_size: 16,
            ..Self::default()
        }
    }

    /// Detection-task defaults (momentum SGD with linear warmup). The plugin
    /// steps at a tenth of the detector rate; at the full rate it stalls
    /// the detector.
    pub fn detection() -> Self {
        Self {
            min_lr: 1e-3,
            max_lr: 2e-2,
            warmup_steps: 100,
            weight_decay: 1e-4,
            plugin_grad_scale: 0.1,
            ..Self::default()
        }
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    /// Set one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "fen_blocks" => self.fen_blocks = parse(key, value)?,
            "attention_segments" => self.attention_segments = parse(key, value)?,
            "enable_water_prior" => self.enable_water_prior = parse(key, value)?,
            "enable_degrad_prior" => self.enable_degrad_prior = parse(key, value)?,
            "enable_sample_prior" => self.enable_sample_prior = parse(key, value)?,
            "enable_full_scale" => self.enable_full_scale = parse(key, value)?,
            "anchor_scale" => self.anchor_scale = parse(key, value)?,
            "water_grid" => self.water_grid = parse(key, value)?,
            "use_plugin" => self.use_plugin = parse(key, value)?,
            "min_lr" => self.min_lr = parse(key, value)?,
            "max_lr" => self.max_lr = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "total_steps" => self.total_steps = parse(key, value)?,
            "lambda_l1" => self.lambda_l1 = parse(key, value)?,
            "lambda_ssim" => self.lambda_ssim = parse(key, value)?,
            "progressive_sizes" => self.progressive_sizes = parse_sizes(value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "plugin_grad_scale" => self.plugin_grad_scale = parse(key, value)?,
            other => return Err(Error::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "channels" => self.channels.to_string(),
            "fen_blocks" => self.fen_blocks.to_string(),
            "attention_segments" => self.attention_segments.to_string(),
            "enable_water_prior" => self.enable_water_prior.to_string(),
            "enable_degrad_prior" => self.enable_degrad_prior.to_string(),
            "enable_sample_prior" => self.enable_sample_prior.to_string(),
            "enable_full_scale" => self.enable_full_scale.to_string(),
            "anchor_scale" => self.anchor_scale.to_string(),
            "water_grid" => self.water_grid.to_string(),
            "use_plugin" => self.use_plugin.to_string(),
            "min_lr" => format!("{:?}", self.min_lr),
            "max_lr" => format!("{:?}", self.max_lr),
            "warmup_steps" => self.warmup_steps.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "lambda_l1" => format!("{:?}", self.lambda_l1),
            "lambda_ssim" => format!("{:?}", self.lambda_ssim),
            "progressive_sizes" => self
                .progressive_sizes
                .iter()
                .map(|(e, s)| format!("{e}:{s}"))
                .collect::<Vec<_>>()
                .join(","),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "beta1" => format!("{:?}", self.beta1),
            "beta2" => format!("{:?}", self.beta2),
            "momentum" => format!("{:?}", self.momentum),
            "plugin_grad_scale" => format!("{:?}", self.plugin_grad_scale),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// One `key = value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{} = {}", key, self.get(key));
        }
        s
    }

    /// Apply `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are rejected.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line `{}` is not key = value", line)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.fen_blocks == 0 || self.attention_segments == 0 {
            return fail("channels, fen_blocks and attention_segments must be positive".into());
        }
        if self.channels % self.attention_segments != 0 {
            return fail(format!(
                "attention_segments {} does not divide channels {}",
                self.attention_segments, self.channels
            ));
        }
        if ![1, 2, 4].contains(&self.anchor_scale) {
            return fail(format!("anchor_scale must be 1, 2 or 4, got {}", self.anchor_scale));
        }
        if self.water_grid == 0 {
            return fail("water_grid must be positive".into());
        }
        if self.use_plugin && !self.any_prior_enabled() {
            return Err(Error::NoPriorSignal);
        }
        if !(self.min_lr >= 0.0 && self.max_lr >= self.min_lr) {
            return fail(format!("need 0 <= min_lr <= max_lr, got {} / {}", self.min_lr, self.max_lr));
        }
        if self.total_steps != 0 && self.warmup_steps > self.total_steps {
            return fail("warmup_steps exceeds total_steps".into());
        }
        if !(self.plugin_grad_scale >= 0.0 && self.plugin_grad_scale.is_finite()) {
            return fail(format!("plugin_grad_scale must be a finite value >= 0, got {}", self.plugin_grad_scale));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.progressive_sizes.windows(2).any(|w| w[0].0 >= w[1].0) {
            return fail("progressive_sizes epochs must increase".into());
        }
        if self.progressive_sizes.iter().any(|&(_, s)| s < 32 || s % 32 != 0) {
            return fail("progressive sizes must be positive multiples of 32".into());
        }
        Ok(())
    }

    pub fn any_prior_enabled(&self) -> bool {
        self.enable_water_prior || self.enable_degrad_prior || self.enable_sample_prior
    }

    /// Image side scheduled for `epoch`, or `None` to keep the native size.
    pub fn image_size_at(&self, epoch: usize) -> Option<usize> {
        self.progressive_sizes
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .map(|&(_, s)| s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weights_default_to_one_and_a_tenth() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lambda_l1, 1.0);
        assert_eq!(cfg.lambda_ssim, 0.1);
        assert_eq!(cfg.seed, 0);
        cfg.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::classifier();
        cfg.progressive_sizes = alloc::vec![(0, 32), (10, 64)];
        cfg.max_lr = 0.1 + 0.2;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("channels = 8\nwidth = 3\n").unwrap_err();
        assert_eq!(err, Error::UnknownKey("width".into()));
    }

    #[test]
    fn segments_must_divide_channels() {
        let cfg = RunConfig {
            channels: 30,
            attention_segments: 4,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn all_priors_disabled_is_rejected() {
        let cfg = RunConfig {
            enable_water_prior: false,
            enable_degrad_prior: false,
            enable_sample_prior: false,
            ..RunConfig::default()
        };
        assert_eq!(cfg.validate(), Err(Error::NoPriorSignal));
    }

    #[test]
    fn progressive_schedule_lookup() {
        let cfg = RunConfig {
            progressive_sizes: alloc::vec![(0, 32), (3, 64)],
            ..RunConfig::default()
        };
        assert_eq!(cfg.image_size_at(0), Some(32));
        assert_eq!(cfg.image_size_at(2), Some(32));
        assert_eq!(cfg.image_size_at(3), Some(64));
        assert_eq!(RunConfig::default().image_size_at(5), None);
    }
}
