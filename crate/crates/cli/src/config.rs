//! Run configuration: a TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use pnrtomo::calibration::{DEFAULT_CALIBRATION_SIGMA, DEFAULT_QUADRATURE_NODES};
use pnrtomo::density::{Bandwidth, MIN_GRID_POINTS};
use pnrtomo::inference::PriorDistribution;
use pnrtomo::io::SampleFormat;
use pnrtomo::sim::{DetectorGroundTruth, SimConfig};
use pnrtomo::tomo::EmConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub simulate: SimulateSettings,
    pub pca: PcaSettings,
    pub grid: GridSettings,
    pub em: EmSettings,
    pub prior: PriorSettings,
    pub calibration: CalibrationSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            threads: None,
            paths: Paths::default(),
            simulate: SimulateSettings::default(),
            pca: PcaSettings::default(),
            grid: GridSettings::default(),
            em: EmSettings::default(),
            prior: PriorSettings::default(),
            calibration: CalibrationSettings::default(),
        }
    }
}

/// Relative paths resolve against the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub traces: PathBuf,
    pub archive: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { traces: "traces.pnr".into(), archive: "results".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Int16,
    Float64,
}

impl From<SampleKind> for SampleFormat {
    fn from(k: SampleKind) -> Self {
        match k {
            SampleKind::Int16 => SampleFormat::Int16,
            SampleKind::Float64 => SampleFormat::Float64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSettings {
    /// Mean photon number of each probe.
    pub alpha_sq: Vec<f64>,
    pub trials_per_probe: usize,
    pub samples_per_trace: usize,
    pub efficiency: f64,
    pub spacing: f64,
    pub width: f64,
    pub n_sim: usize,
    pub noise_sigma: Option<f64>,
    pub sample_format: SampleKind,
    /// ADC counts per unit amplitude for int16 output.
    pub adc_scale: f64,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            alpha_sq: (0..=16).map(|i| i as f64 * 0.5).collect(),
            trials_per_probe: 2000,
            samples_per_trace: 64,
            efficiency: 0.9,
            spacing: 1.0,
            width: 0.15,
            n_sim: 30,
            noise_sigma: None,
            sample_format: SampleKind::Float64,
            adc_scale: 1000.0,
        }
    }
}

impl SimulateSettings {
    pub fn truth(&self) -> CliResult<DetectorGroundTruth> {
        let mut truth =
            DetectorGroundTruth::linear(self.efficiency, self.spacing, self.width, self.samples_per_trace, self.n_sim)
                .map_err(|e| CliError::Config(format!("simulate: {e}")))?;
        if let Some(s) = self.noise_sigma {
            truth.noise_sigma = s;
        }
        truth.validate().map_err(|e| CliError::Config(format!("simulate: {e}")))?;
        Ok(truth)
    }

    pub fn sim_config(&self, seed: u64) -> SimConfig {
        SimConfig::from_mean_photon_numbers(&self.alpha_sq, self.trials_per_probe, self.samples_per_trace, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcaSettings {
    pub components: usize,
}

impl Default for PcaSettings {
    fn default() -> Self {
        Self { components: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSettings {
    pub points: usize,
    pub bandwidth: Bandwidth,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self { points: 1024, bandwidth: Bandwidth::Diffusion }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmSettings {
    pub n_max: usize,
    pub max_iterations: usize,
    pub rel_tol: f64,
}

impl Default for EmSettings {
    fn default() -> Self {
        let d = EmConfig::default();
        Self { n_max: 20, max_iterations: d.max_iterations, rel_tol: d.rel_tol }
    }
}

impl EmSettings {
    pub fn em_config(&self) -> EmConfig {
        EmConfig { n_max: self.n_max, max_iterations: self.max_iterations, rel_tol: self.rel_tol, ..EmConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSettings {
    /// `flat`, `thermal:<lambda^2>` or `poisson:<|alpha|^2>`.
    pub prior: String,
    /// Post-selection half-width around each peak, in units of the mean peak
    /// spacing.
    pub window_half_width: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self { prior: "thermal:0.1".into(), window_half_width: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSettings {
    /// Relative standard deviation of the probe-energy scale.
    pub sigma: f64,
    pub quadrature_nodes: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self { sigma: DEFAULT_CALIBRATION_SIGMA, quadrature_nodes: DEFAULT_QUADRATURE_NODES }
    }
}

/// Flags that override config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid_points: Option<usize>,
    pub n_max: Option<usize>,
    pub prior: Option<String>,
    pub calib_sigma: Option<f64>,
    pub threads: Option<usize>,
}

impl PipelineConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path` (or defaults), applies `overrides`, resolves relative
    /// paths and validates.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let (mut config, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (Self::parse(&text)?, base)
            }
            None => (Self::default(), PathBuf::new()),
        };
        config.apply(overrides);
        config.paths.traces = base.join(&config.paths.traces);
        config.paths.archive = base.join(&config.paths.archive);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.grid_points {
            self.grid.points = v;
        }
        if let Some(v) = o.n_max {
            self.em.n_max = v;
        }
        if let Some(v) = &o.prior {
            self.prior.prior = v.clone();
        }
        if let Some(v) = o.calib_sigma {
            self.calibration.sigma = v;
        }
        if let Some(v) = o.threads {
            self.threads = Some(v);
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.grid.points < MIN_GRID_POINTS {
            return bad(format!("grid.points must be at least {MIN_GRID_POINTS}, got {}", self.grid.points));
        }
        if self.em.n_max < 1 {
            return bad("em.n_max must be at least 1".into());
        }
        self.em.em_config().validate().map_err(|e| CliError::Config(format!("em: {e}")))?;
        if self.pca.components < 1 {
            return bad("pca.components must be at least 1".into());
        }
        self.prior_distribution()?;
        if !(self.prior.window_half_width > 0.0) {
            return bad("prior.window_half_width must be positive".into());
        }
        if !(self.calibration.sigma >= 0.0 && self.calibration.sigma < 1.0) {
            return bad(format!("calibration.sigma must lie in [0, 1), got {}", self.calibration.sigma));
        }
        if self.calibration.quadrature_nodes % 2 == 0 {
            return bad("calibration.quadrature_nodes must be odd".into());
        }
        if self.threads == Some(0) {
            return bad("threads must be at least 1".into());
        }
        if !(self.simulate.adc_scale > 0.0) {
            return bad("simulate.adc_scale must be positive".into());
        }
        Ok(())
    }

    pub fn prior_distribution(&self) -> CliResult<PriorDistribution> {
        PriorDistribution::parse(&self.prior.prior, self.em.n_max)
            .map_err(|e| CliError::Config(format!("prior: {e}")))
    }

    /// SHA-256 of the effective configuration as JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
