//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assimilation::RadiusConfig;
use crate::denoiser::{ModelConfig, TrainConfig};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::grid::Field2D;
use crate::profile::PowerLawParams;
use crate::synth::{SynthConfig, STATION_HEIGHT_M};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sr_factor: usize,
    /// Training patch edge in HR cells; 0 uses whole fields.
    pub patch_size: usize,
    pub da_stations: usize,
    pub eval_stations: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            sr_factor: 4,
            patch_size: 32,
            da_stations: 6,
            eval_stations: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub alpha: f64,
    /// Height the wind fields represent; stations are lifted to it.
    pub hub_height_m: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            alpha: PowerLawParams::default().alpha,
            hub_height_m: STATION_HEIGHT_M,
        }
    }
}

impl ProfileConfig {
    pub fn params(&self) -> PowerLawParams {
        PowerLawParams { alpha: self.alpha }
    }
}

/// How the PSNR/SSIM dynamic range is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRange {
    /// `max − min` of the reference field.
    TruthRange,
    Fixed(f64),
}

impl DataRange {
    pub fn resolve(&self, truth: &Field2D) -> Result<f64> {
        let r = match *self {
            DataRange::TruthRange => truth.max() - truth.min(),
            DataRange::Fixed(v) => v,
        };
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::InvalidConfig(format!("data range {r} must be positive")));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probs: Vec<f64>,
    pub data_range: DataRange,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probs: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            data_range: DataRange::TruthRange,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    /// Seed of the reverse-diffusion noise.
    pub sample: u64,
    /// Seed of station placement in `gen`.
    pub stations: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub assimilation: RadiusConfig,
    pub profile: ProfileConfig,
    pub eval: EvalConfig,
    pub seeds: SeedConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.sr_factor < 2 {
            return Err(Error::InvalidFactor(d.sr_factor));
        }
        self.synth.validate(d.sr_factor)?;
        if d.patch_size != 0 && (d.patch_size % d.sr_factor != 0 || d.patch_size > self.synth.size) {
            return Err(Error::InvalidConfig(format!(
                "data.patch_size {} must divide by sr_factor {} and fit in synth.size {}",
                d.patch_size, d.sr_factor, self.synth.size
            )));
        }
        let cells = self.synth.size * self.synth.size;
        if d.da_stations + d.eval_stations > cells {
            return Err(Error::StationCount {
                k: d.da_stations + d.eval_stations,
                max: cells,
            });
        }
        self.schedule.build()?;
        self.model.validate()?;
        self.train.validate()?;
        self.assimilation.validate()?;
        let p = &self.profile;
        if !(p.alpha.is_finite() && p.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!("profile.alpha {} must be >= 0", p.alpha)));
        }
        if !(p.hub_height_m.is_finite() && p.hub_height_m > 0.0) {
            return Err(Error::NonPositiveHeight(p.hub_height_m));
        }
        if let Some(q) = self.eval.probs.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::InvalidConfig(format!("eval.probs entry {q} outside [0, 1]")));
        }
        if let DataRange::Fixed(v) = self.eval.data_range {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("eval.data_range {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
