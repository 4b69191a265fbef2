//! Declarative configuration for every pipeline stage, stored as TOML.

use crate::colorspace::Srgb8;
use crate::pairgen::{representative_colors, Constraints};
use crate::psychofit::{FitMethod, STUDY_LATENCIES_MS};
use crate::simharness::{CrossingExperiment, HarnessConfig, SleepPolicy};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SEED_ENV: &str = "CHROMAPULSE_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Serialize(#[from] toml::ser::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub palette: Option<PathBuf>,
    pub region_map: Option<PathBuf>,
    pub stream: Option<PathBuf>,
    pub trajectory: Option<PathBuf>,
    pub waveform_bank: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PaletteConfig {
    pub colors: Vec<Srgb8>,
    pub constraints: Constraints,
}

impl Default for PaletteConfig {
    fn default() -> Self {
        Self {
            colors: representative_colors(),
            constraints: Constraints::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub delays_ms: Vec<f64>,
    pub policy: SleepPolicy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            delays_ms: STUDY_LATENCIES_MS.to_vec(),
            policy: SleepPolicy::WorstCase,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodeConfig {
    pub duration_s: f64,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        Self { duration_s: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub paths: Paths,
    pub palette: PaletteConfig,
    pub encode: EncodeConfig,
    pub harness: HarnessConfig,
    pub crossing: CrossingExperiment,
    pub sweep: SweepConfig,
    pub fit: FitConfig,
}

impl Config {
    pub fn from_toml(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Apply the seed override from the environment, if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let c = &self.palette.constraints;
        if [c.eps_l, c.eps_ab, c.theta_on, c.delta_e_max, c.mean_tol].iter().any(|v| !(*v > 0.0)) || !(c.theta_off >= 0.0) || c.theta_off >= c.theta_on {
            return Err(ConfigError::Invalid(format!("palette constraints out of range: {c:?}")));
        }
        let h = &self.harness;
        h.detector.validate().map_err(|e| invalid(&e))?;
        h.actuator.validate().map_err(|e| invalid(&e))?;
        h.sensor.validate(h.chain.f_lpf_hz).map_err(|e| invalid(&e))?;
        if !(h.theta_on > 0.0 && h.aperture_radius_mm >= 0.0 && h.extra_delay_s >= 0.0 && h.resolve_window_s >= 0.0 && h.preroll_s >= 0.0) {
            return Err(ConfigError::Invalid("harness parameters out of range".into()));
        }
        if !(self.encode.duration_s > 0.0) {
            return Err(ConfigError::Invalid("encode.duration_s must be positive".into()));
        }
        let x = &self.crossing;
        if !(x.speed_mm_s > 0.0 && x.phase_span_s >= 0.0 && x.lead_s > 0.0 && x.tail_s > 0.0) {
            return Err(ConfigError::Invalid("crossing parameters out of range".into()));
        }
        Ok(())
    }
}
