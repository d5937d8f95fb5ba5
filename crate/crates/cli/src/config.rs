//! TOML run configuration. Every key is optional; the defaults reproduce the
//! desk-scale distillation experiment on 32×32 synthetic textures.

use std::path::{Path, PathBuf};

use cmsr_core::denoiser::UNetConfig;
use cmsr_core::distill::{AdamConfig, HyperParams, LossType};
use cmsr_core::schedule::{BoundaryScalings, NoiseSchedule, TimestepMap};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "CMSR_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed; every command derives its streams from it.
    pub seed: u64,
    /// Root of all outputs (default `cmsr-out`).
    pub output_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub model: UNetConfig,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub sampling: SamplingConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("cmsr-out"),
            schedule: ScheduleConfig::default(),
            model: UNetConfig { base_channels: 8, ..UNetConfig::default() },
            data: DataConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Diffusion length `T`.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { timesteps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Procedural textures generated in memory when no prepared split exists.
    #[default]
    Textures,
    /// Splits prepared by `cmsr etl` under `data.dir`.
    Prepared,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    #[default]
    Center,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Prepared splits live in `<dir>/train` and `<dir>/test`; relative to
    /// `output_dir` unless absolute (default `data`).
    pub dir: PathBuf,
    /// High-resolution side `S`; the condition is `S/4`.
    pub image_size: usize,
    pub crop: CropKind,
    pub texture_modes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Textures,
            dir: PathBuf::from("data"),
            image_size: 32,
            crop: CropKind::Center,
            texture_modes: 3,
            train_count: 512,
            test_count: 128,
            train_seed: 1,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { steps: 2000, lr: 1e-3, batch_size: 12, checkpoint_every: 500 }
    }
}

/// Consistency-distillation settings not already covered by `schedule` and `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: u64,
    pub lr: f64,
    pub loss_type: LossType,
    /// `N`, the number of boundaries in the distillation timestep map.
    pub boundaries: usize,
    pub batch_size: usize,
    pub timestep_scaling: f64,
    pub sigma_data: f64,
    pub huber_delta: f64,
    pub mu: f64,
    pub checkpoint_every: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            steps: 400,
            lr: hp.lr,
            loss_type: hp.loss_type,
            boundaries: hp.boundaries,
            batch_size: hp.batch_size,
            timestep_scaling: hp.timestep_scaling,
            sigma_data: BoundaryScalings::default().sigma_data,
            huber_delta: hp.huber_delta,
            mu: hp.mu,
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
    #[default]
    Cm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    pub sampler: SamplerKind,
    /// Denoiser evaluations: consistency steps (1 to 4) or DDIM steps; DDPM always takes `T`.
    pub steps: usize,
    pub eta: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { sampler: SamplerKind::Cm, steps: 4, eta: 0.0 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.model.check_image_size(self.data.image_size)?;
        self.hyper_params().validate()?;
        let teacher = HyperParams { lr: self.teacher.lr, batch_size: self.teacher.batch_size, ..self.hyper_params() };
        teacher.validate()?;
        if !(self.distill.sigma_data > 0.0) {
            return Err(CliError::Usage("distill.sigma_data must be positive".into()));
        }
        if !(1..=3).contains(&self.data.texture_modes) {
            return Err(CliError::Usage("data.texture_modes must be 1 to 3".into()));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule, CliError> {
        let s = &self.schedule;
        Ok(NoiseSchedule::linear(s.timesteps, s.beta_start, s.beta_end)?)
    }

    pub fn hyper_params(&self) -> HyperParams {
        let d = &self.distill;
        HyperParams {
            lr: d.lr,
            loss_type: d.loss_type,
            boundaries: d.boundaries,
            timesteps: self.schedule.timesteps,
            batch_size: d.batch_size,
            image_size: self.data.image_size,
            timestep_scaling: d.timestep_scaling,
            huber_delta: d.huber_delta,
            mu: d.mu,
            adam: AdamConfig::default(),
        }
    }

    pub fn teacher_hyper_params(&self) -> HyperParams {
        HyperParams { lr: self.teacher.lr, batch_size: self.teacher.batch_size, ..self.hyper_params() }
    }

    pub fn scalings(&self) -> BoundaryScalings {
        BoundaryScalings { sigma_data: self.distill.sigma_data, timestep_scaling: self.distill.timestep_scaling }
    }

    pub fn timestep_map(&self, schedule: &NoiseSchedule) -> Result<TimestepMap, CliError> {
        Ok(TimestepMap::even(schedule, self.distill.boundaries)?)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join(&self.data.dir)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let back: Config = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.hyper_params().boundaries, 50);
        assert_eq!(cfg.hyper_params().loss_type, LossType::Huber);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("sed = 1").is_err());
        assert!(toml::from_str::<Config>("[distill]\nlearning_rate = 1.0").is_err());
        let partial: Config = toml::from_str("seed = 4\n[distill]\nlr = 1e-6").unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.distill.lr, 1e-6);
        assert_eq!(partial.distill.boundaries, 50);
    }

    #[test]
    fn distillation_values_parse() {
        let text = "[distill]\nlr = 1e-6\nloss_type = \"huber\"\nboundaries = 50\nbatch_size = 12\ntimestep_scaling = 10.0\n[schedule]\ntimesteps = 1000\n[data]\nimage_size = 512";
        let cfg: Config = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
    }
}
