//! Run configuration: everything a pipeline execution depends on, with
//! validated defaults. Serialized as `config.json` inside scene and run
//! directories so a run is reproducible from its artifacts alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sparsesplat_core::alignment::AlignConfig;
use sparsesplat_core::eval::LocalizeConfig;
use sparsesplat_core::loss::LossWeights;
use sparsesplat_core::splat::RenderOptions;
use sparsesplat_core::train::Schedule;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// How holes in warped images get filled.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InpainterChoice {
    /// Push-pull seeded harmonic diffusion.
    #[default]
    Builtin,
    /// External command invoked as `<command> <image.png> <mask.png> <out.png>`.
    External { command: String },
}

/// Pose noise injected after the coarse construction, used to exercise the
/// joint optimization against a known perturbation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PoseNoise {
    pub rotation_deg: f64,
    /// Translation magnitude as a fraction of the scene diameter.
    pub translation_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_views: usize,
    pub seed: u64,
    /// Novel poses sampled per consecutive training pair; when absent the
    /// count follows the view count (18 for up to 4 views, 6 up to 8, else 4).
    pub k_p: Option<usize>,
    /// Fraction of pixels kept by the confidence mask of the depth alignment.
    pub top_p: f64,
    /// Window of the warp-mask cleanup; odd, at least 3.
    pub mask_clean_window: usize,
    /// Cap on the Gaussian count at initialization.
    pub max_gaussians: usize,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub align: AlignConfig,
    pub render: RenderOptions,
    pub localize: LocalizeConfig,
    pub inpainter: InpainterChoice,
    pub init_pose_noise: Option<PoseNoise>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_views: 3,
            seed: 0,
            k_p: None,
            top_p: 0.3,
            mask_clean_window: 5,
            max_gaussians: 4000,
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            align: AlignConfig::default(),
            render: RenderOptions::default(),
            localize: LocalizeConfig::default(),
            inpainter: InpainterChoice::default(),
            init_pose_noise: None,
        }
    }
}

impl PipelineConfig {
    /// Effective novel-pose count per consecutive pair.
    pub fn samples_per_segment(&self) -> usize {
        self.k_p.unwrap_or(match self.n_views {
            0..=4 => 18,
            5..=8 => 6,
            _ => 4,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_views < 2 {
            return Err(ConfigError::Invalid(format!(
                "n_views must be at least 2, got {}",
                self.n_views
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "top_p must be in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.mask_clean_window < 3 || self.mask_clean_window % 2 == 0 {
            return Err(ConfigError::Invalid(format!(
                "mask_clean_window must be odd and at least 3, got {}",
                self.mask_clean_window
            )));
        }
        if self.max_gaussians == 0 {
            return Err(ConfigError::Invalid("max_gaussians must be positive".into()));
        }
        for (name, v) in [
            ("lambda", self.weights.lambda),
            ("lambda_d", self.weights.lambda_d),
            ("lambda_pseudo", self.weights.lambda_pseudo),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.schedule.coarse_steps == 0 || self.schedule.fine_steps == 0 {
            return Err(ConfigError::Invalid("stage step counts must be positive".into()));
        }
        if self.samples_per_segment() == 0 {
            return Err(ConfigError::Invalid("k_p must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let bytes = fs::read(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: PipelineConfig =
            serde_json::from_slice(&bytes).map_err(|e| ConfigError::Malformed {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    /// Serializes with every default materialized.
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let json = serde_json::to_vec_pretty(self).expect("config serialization");
        crate::formats::atomic_write(path, &json).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}
