//! Experiment configuration, read from TOML.

use std::path::Path;

use anyhow::{bail, Context};
use cbdm_core::data::{make_longtail_counts, MixtureSpec};
use cbdm_core::denoiser::DenoiserConfig;
use cbdm_core::loss::LabelSetMode;
use cbdm_core::metrics::{ClassifierConfig, MetricSettings};
use cbdm_core::sampler::SampleMethod;
use cbdm_core::schedule::ScheduleConfig;
use cbdm_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable that overrides every seed in the config.
pub const SEED_ENV: &str = "CBDM_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub radius: f64,
    pub sigma: f64,
    /// When set, every class has two modes at `radius -/+ offset`.
    pub two_mode_offset: Option<f64>,
    pub n0: usize,
    pub imb: f64,
    pub seed: u64,
    /// Fresh balanced draws per class used as the metric reference.
    pub reference_per_class: usize,
    /// Balanced held-out draws per class for the downstream classifier.
    pub test_per_class: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            radius: 2.0,
            sigma: 0.15,
            two_mode_offset: None,
            n0: 2000,
            imb: 0.01,
            seed: 0,
            reference_per_class: 500,
            test_per_class: 200,
        }
    }
}

impl DataConfig {
    pub fn spec(&self) -> cbdm_core::Result<MixtureSpec> {
        match self.two_mode_offset {
            Some(off) => MixtureSpec::two_mode(self.num_classes, self.radius, off, self.sigma),
            None => MixtureSpec::circle(self.num_classes, self.radius, self.sigma),
        }
    }

    pub fn counts(&self) -> cbdm_core::Result<Vec<usize>> {
        make_longtail_counts(self.n0, self.num_classes, self.imb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub omega: f64,
    pub method: SampleMethod,
    pub ddim_steps: usize,
    pub per_class: usize,
    pub seed: u64,
    pub use_tcfg: bool,
    /// Sample from the EMA weights when training kept them.
    pub use_ema: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            omega: 0.0,
            method: SampleMethod::Ddpm,
            ddim_steps: 20,
            per_class: 500,
            seed: 0,
            use_tcfg: false,
            use_ema: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub omega: Vec<f64>,
    pub tau: Vec<f64>,
    pub phi: Vec<f64>,
    pub labelset: Vec<LabelSetMode>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            omega: (0..=10).map(|i| i as f64 * 0.2).collect(),
            tau: vec![0.0005, 0.005, 0.05],
            phi: vec![0.0, 0.1, 0.2],
            labelset: vec![LabelSetMode::Train, LabelSetMode::Sqrt, LabelSetMode::Balanced],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCaseConfig {
    pub id: String,
    pub means: Vec<f64>,
    pub s: f64,
    pub prior: Vec<f64>,
}

impl Default for OracleCaseConfig {
    fn default() -> Self {
        Self { id: "two_class_0.99".into(), means: vec![-1.0, 1.5], s: 0.3, prior: vec![0.99, 0.01] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub cases: Vec<OracleCaseConfig>,
    pub timesteps: Vec<usize>,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    /// Every this many grid points is used as `x_t` in the identity check.
    pub x_t_stride: usize,
    pub mc_samples: usize,
    pub tau: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            cases: vec![
                OracleCaseConfig::default(),
                OracleCaseConfig { id: "two_class_0.9".into(), prior: vec![0.9, 0.1], ..OracleCaseConfig::default() },
                OracleCaseConfig {
                    id: "three_class".into(),
                    means: vec![-2.0, 0.0, 2.0],
                    s: 0.5,
                    prior: vec![0.7, 0.2, 0.1],
                },
            ],
            timesteps: vec![2, 100, 200],
            grid_lo: -8.0,
            grid_hi: 8.0,
            grid_points: 4001,
            x_t_stride: 100,
            mc_samples: 10_000,
            tau: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub metrics: MetricSettings,
    pub classifier: ClassifierConfig,
    pub sweep: SweepConfig,
    pub oracle: OracleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "run".into(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            model: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            metrics: MetricSettings::default(),
            classifier: ClassifierConfig::default(),
            sweep: SweepConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| anyhow::anyhow!("{e}"))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> anyhow::Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Replaces every seed (training, initialization, sampling, metrics,
    /// classifier and oracle); the dataset seed is left alone.
    pub fn override_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.train.init_seed = seed;
        self.sample.seed = seed;
        self.metrics.seed = seed;
        self.classifier.seed = seed;
        self.oracle.seed = seed;
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            bail!("run_id: must be a nonempty name without path separators");
        }
        self.data.spec().context("data")?;
        self.data.counts().context("data")?;
        if self.data.reference_per_class <= self.metrics.knn_k {
            bail!("data.reference_per_class: must exceed metrics.knn_k");
        }
        let schedule = self.schedule.build().context("schedule")?;
        self.model.validate().context("model")?;
        if self.model.num_classes != self.data.num_classes {
            bail!("model.num_classes: {} differs from data.num_classes {}", self.model.num_classes, self.data.num_classes);
        }
        if self.model.num_timesteps != schedule.num_steps() {
            bail!("model.num_timesteps: {} differs from schedule.timesteps {}", self.model.num_timesteps, schedule.num_steps());
        }
        if self.model.data_dim != 2 {
            bail!("model.data_dim: the benchmark is 2-D");
        }
        self.train.validate().context("train")?;
        if self.train.tcfg.is_some() != self.model.tcfg_enabled {
            bail!("train.tcfg: must be set exactly when model.tcfg_enabled is true");
        }
        let s = &self.sample;
        if !(s.omega >= 0.0 && s.omega.is_finite()) {
            bail!("sample.omega: must be finite and >= 0");
        }
        if s.per_class <= self.metrics.knn_k {
            bail!("sample.per_class: must exceed metrics.knn_k");
        }
        if s.method == SampleMethod::Ddim {
            let t = schedule.num_steps();
            if s.ddim_steps == 0 || s.ddim_steps > t || t % s.ddim_steps != 0 {
                bail!("sample.ddim_steps: {} must divide schedule.timesteps {t}", s.ddim_steps);
            }
        }
        if s.use_tcfg && !self.model.tcfg_enabled {
            bail!("sample.use_tcfg: needs model.tcfg_enabled");
        }
        if s.use_ema && self.train.ema_decay.is_none() {
            bail!("sample.use_ema: needs train.ema_decay");
        }
        if self.metrics.knn_k == 0 || !(self.metrics.coverage_radius_mult > 0.0) || !(self.metrics.prd_beta > 0.0) {
            bail!("metrics: knn_k, coverage_radius_mult and prd_beta must be positive");
        }
        if self.sweep.omega.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            bail!("sweep.omega: values must be finite and >= 0");
        }
        if self.sweep.tau.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            bail!("sweep.tau: values must be finite and >= 0");
        }
        if self.sweep.phi.iter().any(|p| !(0.0..=1.0).contains(p)) {
            bail!("sweep.phi: values must lie in [0, 1]");
        }
        if self.oracle.mc_samples < 1000 {
            bail!("oracle.mc_samples: must be at least 1000");
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
