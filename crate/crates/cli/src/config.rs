//! Run configuration: built-in defaults, overlaid by a TOML file, overlaid by flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tempalign_core::retrieval::{EvalConfig, DEFAULT_KS};
use tempalign_core::toy::{SynthConfig, TrainConfig};
use tempalign_core::FusionConfig;

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub text: Option<PathBuf>,
    pub audio: Option<PathBuf>,
    pub speech: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

/// Top-level keys drive scoring and evaluation; `[train]` and `[synth]`
/// configure `train-toy` and `synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub eta_kernel: f64,
    pub eta_stride: f64,
    pub ref_window: f64,
    pub gamma_kernel: f64,
    pub gamma_temporal: f64,
    pub temperature: f64,
    pub normalize: bool,
    pub symmetric_loss: bool,
    pub ks: Vec<usize>,
    pub seed: u64,
    pub workers: usize,
    pub paths: Paths,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let eval = EvalConfig::default();
        Self {
            eta_kernel: eval.eta_kernel,
            eta_stride: eval.eta_stride,
            ref_window: eval.ref_window,
            gamma_kernel: eval.fusion.gamma_kernel,
            gamma_temporal: eval.fusion.gamma_temporal,
            temperature: eval.fusion.temperature,
            normalize: eval.fusion.normalize,
            symmetric_loss: false,
            ks: DEFAULT_KS.to_vec(),
            seed: 0,
            workers: 1,
            paths: Paths::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::Data(format!("config {}: {e}", path.display())))
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            gamma_kernel: self.gamma_kernel,
            gamma_temporal: self.gamma_temporal,
            normalize: self.normalize,
            temperature: self.temperature,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fusion: self.fusion(),
            eta_kernel: self.eta_kernel,
            eta_stride: self.eta_stride,
            ref_window: self.ref_window,
            ks: self.ks.clone(),
            workers: self.workers,
            ..EvalConfig::default()
        }
    }
}

/// Flags shared by every command that frames and scores.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct FusionFlags {
    /// Seconds of audio per frame.
    #[arg(long = "eta-k")]
    pub eta_kernel: Option<f64>,
    /// Seconds of audio between frame starts.
    #[arg(long = "eta-s")]
    pub eta_stride: Option<f64>,
    /// Divisor turning T * eta into a size [default: 30].
    #[arg(long)]
    pub ref_window: Option<f64>,
    /// Weight of the kernel-pooled score.
    #[arg(long = "gamma-k")]
    pub gamma_kernel: Option<f64>,
    /// Weight of the temporally pooled score.
    #[arg(long = "gamma-t")]
    pub gamma_temporal: Option<f64>,
    /// Fused scores are divided by this.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Cosine similarity (true) or raw dot product (false).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub normalize: Option<bool>,
    /// Average the audio-to-text and text-to-audio losses.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub symmetric_loss: Option<bool>,
}

impl FusionFlags {
    pub fn apply(&self, cfg: &mut RunConfig) {
        set(&mut cfg.eta_kernel, self.eta_kernel);
        set(&mut cfg.eta_stride, self.eta_stride);
        set(&mut cfg.ref_window, self.ref_window);
        set(&mut cfg.gamma_kernel, self.gamma_kernel);
        set(&mut cfg.gamma_temporal, self.gamma_temporal);
        set(&mut cfg.temperature, self.temperature);
        set(&mut cfg.normalize, self.normalize);
        set(&mut cfg.symmetric_loss, self.symmetric_loss);
    }

    pub fn apply_train(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.eta_kernel, self.eta_kernel);
        set(&mut cfg.eta_stride, self.eta_stride);
        set(&mut cfg.ref_window, self.ref_window);
        set(&mut cfg.fusion.gamma_kernel, self.gamma_kernel);
        set(&mut cfg.fusion.gamma_temporal, self.gamma_temporal);
        set(&mut cfg.fusion.temperature, self.temperature);
        set(&mut cfg.fusion.normalize, self.normalize);
        set(&mut cfg.symmetric_loss, self.symmetric_loss);
    }
}

pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// A flag value, falling back to the config file, or a usage error naming the flag.
pub fn require_path(
    flag: &Option<PathBuf>,
    file: &Option<PathBuf>,
    name: &str,
) -> Result<PathBuf, Failure> {
    flag.clone().or_else(|| file.clone()).ok_or_else(|| {
        Failure::Usage(format!(
            "--{name} is required (flag or [paths] {name} in the config file)"
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_defaults_and_flags_override_file() {
        let text = "eta_kernel = 6.0\ntemperature = 0.5\nks = [1, 2]\n[train]\nlr = 0.01\n[paths]\ntext = \"t.cesf\"\n";
        let mut cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.eta_kernel, 6.0);
        assert_eq!(cfg.eta_stride, 3.0);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.train.batch_size, 50);
        assert_eq!(cfg.paths.text.as_deref(), Some(Path::new("t.cesf")));
        let flags = FusionFlags {
            temperature: Some(2.0),
            ..FusionFlags::default()
        };
        flags.apply(&mut cfg);
        assert_eq!(cfg.temperature, 2.0);
        assert_eq!(cfg.eta_kernel, 6.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("eta_kernal = 3.0").is_err());
    }
}
