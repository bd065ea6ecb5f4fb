//! JSON experiment configuration.
//!
//! Every block rejects unknown keys; omitted keys take model-appropriate
//! defaults. Schema violations surface as [`Error::Config`] with the dotted
//! path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::amgd::OptimizerSettings;
use crate::cmlmc::CmlmcSettings;
use crate::error::{Error, Result};
use crate::fhn::{FhnModel, FhnParams, Z_REF};
use crate::model::{LinearGaussian, Model};
use crate::pollutant::{PollutantModel, PollutantParams, SINKS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    LinearGaussian,
    Fhn,
    Pollutant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearGaussianParams {
    pub sigma: f64,
    pub max_level: usize,
}

impl Default for LinearGaussianParams {
    fn default() -> Self {
        let m = LinearGaussian::default();
        LinearGaussianParams { sigma: m.sigma, max_level: m.max_level }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct StatisticConfig {
    pub tau: Option<f64>,
    pub kappa: Option<f64>,
    pub z_ref: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub z0: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub eta: Option<f64>,
    pub eps: Option<f64>,
    pub max_iters: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Estimate,
    Reliability,
    Complexity,
    Optimize,
    Reference,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config { path: "experiment.kind".into(), message: format!("unknown experiment `{s}`") })
    }
}

/// Budget of the single-level reference estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceConfig {
    pub samples: usize,
    pub level: usize,
    /// Points of the tabulated reference derivatives.
    pub grid_points: usize,
    /// Quantile levels bounding the tabulated θ range.
    pub quantiles: [f64; 2],
    /// Reference file to compare against; computed in process when absent.
    pub path: Option<PathBuf>,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        ReferenceConfig { samples: 20_000, level: 6, grid_points: 2001, quantiles: [0.3, 0.97], path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentBlock {
    pub kind: Option<ExperimentKind>,
    /// Target gradient RMSEs; the first one is used by `estimate`.
    pub tolerances: Vec<f64>,
    pub repeats: usize,
    pub out_dir: Option<PathBuf>,
    pub reference: ReferenceConfig,
}

impl Default for ExperimentBlock {
    fn default() -> Self {
        ExperimentBlock { kind: None, tolerances: Vec::new(), repeats: 1, out_dir: None, reference: ReferenceConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelKind,
    pub linear_gaussian: LinearGaussianParams,
    pub fhn: FhnParams,
    pub pollutant: PollutantParams,
    pub statistic: StatisticConfig,
    pub optimizer: OptimizerConfig,
    pub mlmc: Option<CmlmcSettings>,
    pub experiment: ExperimentBlock,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Parse JSON, reporting the path of the first offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_error(".", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn dim(&self) -> usize {
        match self.model {
            ModelKind::LinearGaussian => 1,
            ModelKind::Fhn => 4,
            ModelKind::Pollutant => SINKS,
        }
    }

    pub fn build_model(&self) -> Result<Box<dyn Model>> {
        Ok(match self.model {
            ModelKind::LinearGaussian => {
                let p = &self.linear_gaussian;
                Box::new(LinearGaussian { sigma: p.sigma, max_level: p.max_level })
            }
            ModelKind::Fhn => Box::new(FhnModel::new(self.fhn.clone())?),
            ModelKind::Pollutant => Box::new(PollutantModel::new(self.pollutant.clone())?),
        })
    }

    fn default_design(&self) -> Vec<f64> {
        match self.model {
            ModelKind::LinearGaussian => vec![0.0],
            ModelKind::Fhn => Z_REF.to_vec(),
            ModelKind::Pollutant => vec![0.1; SINKS],
        }
    }

    pub fn tau(&self) -> f64 {
        self.statistic.tau.unwrap_or(0.7)
    }

    pub fn z0(&self) -> Vec<f64> {
        self.optimizer.z0.clone().unwrap_or_else(|| self.default_design())
    }

    pub fn z_ref(&self) -> Vec<f64> {
        self.statistic.z_ref.clone().unwrap_or_else(|| match self.model {
            ModelKind::Pollutant => vec![0.0; SINKS],
            _ => self.default_design(),
        })
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        let o = &self.optimizer;
        let pollutant = self.model == ModelKind::Pollutant;
        OptimizerSettings {
            tau: self.tau(),
            kappa: self.statistic.kappa.unwrap_or(1.0),
            z_ref: self.z_ref(),
            z0: self.z0(),
            alpha: o.alpha.unwrap_or(0.1),
            eta: o.eta.unwrap_or(0.2),
            eps: o.eps.unwrap_or(if pollutant { 0.08 } else { 0.01 }),
            max_iters: o.max_iters.unwrap_or(200),
        }
    }

    /// Controller settings; the pollutant default screen is shallower.
    pub fn mlmc_settings(&self) -> CmlmcSettings {
        self.mlmc.clone().unwrap_or_else(|| match self.model {
            ModelKind::Pollutant => CmlmcSettings { screen: vec![16, 8], ..CmlmcSettings::default() },
            ModelKind::LinearGaussian => CmlmcSettings { screen: vec![256, 8], ..CmlmcSettings::default() },
            ModelKind::Fhn => CmlmcSettings::default(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let lift = |path: &'static str| move |e: Error| config_error(path, e.to_string());
        match self.model {
            ModelKind::LinearGaussian => {
                if !(self.linear_gaussian.sigma > 0.0) {
                    return Err(config_error("linear_gaussian.sigma", "must be positive"));
                }
            }
            ModelKind::Fhn => self.fhn.validate().map_err(lift("fhn"))?,
            ModelKind::Pollutant => self.pollutant.validate().map_err(lift("pollutant"))?,
        }
        if let Some(z) = &self.optimizer.z0 {
            if z.len() != d {
                return Err(config_error("optimizer.z0", format!("expected {d} components, got {}", z.len())));
            }
        }
        if let Some(z) = &self.statistic.z_ref {
            if z.len() != d {
                return Err(config_error("statistic.z_ref", format!("expected {d} components, got {}", z.len())));
            }
        }
        self.optimizer_settings().validate().map_err(lift("optimizer"))?;
        self.mlmc_settings().validate().map_err(lift("mlmc"))?;
        let ex = &self.experiment;
        if ex.tolerances.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(config_error("experiment.tolerances", "tolerances must be positive"));
        }
        if ex.repeats == 0 {
            return Err(config_error("experiment.repeats", "must be at least 1"));
        }
        let r = &ex.reference;
        if r.samples < 16 || r.grid_points < 4 {
            return Err(config_error("experiment.reference", "need samples >= 16 and grid_points >= 4"));
        }
        if !(0.0 < r.quantiles[0] && r.quantiles[0] < r.quantiles[1] && r.quantiles[1] < 1.0) {
            return Err(config_error("experiment.reference.quantiles", "need 0 < lo < hi < 1"));
        }
        Ok(())
    }
}
