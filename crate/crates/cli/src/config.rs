//! Study configuration files.
//!
//! A study is described by a TOML document with dotted sections:
//!
//! ```toml
//! l = 3
//!
//! [potential]
//! kind = "gaussian"
//! params = { width = 1.0 }
//!
//! [grid]
//! r_end = 4.8
//! n_points = 8192
//!
//! [lambda]
//! min = 0.0
//! max = 200.0
//!
//! [[seeds]]
//! lambda = 25.0
//! im_k = 0.9343034507
//!
//! [[seeds]]
//! lambda = 46.0
//! im_k = "auto"
//! bracket = [0.1, 2.0]
//!
//! [step]
//! ds = 0.01
//!
//! [output]
//! dir = "gaussian_out"
//! ```
//!
//! Unknown keys are rejected. `step`, `trace` and `output` may be omitted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resonance_core::continuation::StepControl;
use resonance_core::tracer::{Seed, StudyDefinition, DEFAULT_IM_K_MIN};
use resonance_core::{RadialGrid, RadialPotential};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub potential: PotentialConfig,
    pub l: usize,
    pub grid: GridConfig,
    pub lambda: LambdaConfig,
    #[serde(default)]
    pub seeds: Vec<SeedConfig>,
    #[serde(default)]
    pub step: StepConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialConfig {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub r_end: f64,
    pub n_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaConfig {
    pub min: f64,
    pub max: f64,
}

/// `im_k` is either a number or the keyword `"auto"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImKConfig {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub lambda: f64,
    pub im_k: ImKConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bracket: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepConfig {
    pub ds: f64,
    pub ds_min: f64,
    pub ds_max: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub max_steps: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        let step = StepControl::default();
        StepConfig {
            ds: step.ds,
            ds_min: step.ds_min,
            ds_max: step.ds_max,
            newton_tol: step.newton_tol,
            newton_max_iter: step.newton_max_iter,
            max_steps: 10_000,
        }
    }
}

/// Options of the tracer beyond step control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    /// Branches end when `Im k` drops below this value.
    pub im_k_min: f64,
    pub branch_switching: bool,
    /// Step limit for branches leaving a bifurcation point.
    pub switched_max_steps: usize,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            im_k_min: DEFAULT_IM_K_MIN,
            branch_switching: true,
            switched_max_steps: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Relative paths are resolved against the configuration file.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("."),
        }
    }
}

impl StudyConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn seeds(&self) -> Result<Vec<Seed>, CliError> {
        self.seeds
            .iter()
            .enumerate()
            .map(|(i, s)| match (&s.im_k, s.bracket) {
                (ImKConfig::Value(im_k), None) => Ok(Seed::Explicit {
                    lambda: s.lambda,
                    im_k: *im_k,
                }),
                (ImKConfig::Keyword(word), Some([lo, hi])) if word == "auto" => Ok(Seed::Auto {
                    lambda: s.lambda,
                    bracket: (lo, hi),
                }),
                (ImKConfig::Keyword(word), None) if word == "auto" => Err(CliError::Config(
                    format!("seed {i}: im_k = \"auto\" requires a bracket"),
                )),
                (ImKConfig::Value(_), Some(_)) => Err(CliError::Config(format!(
                    "seed {i}: a bracket is only allowed with im_k = \"auto\""
                ))),
                (ImKConfig::Keyword(word), _) => Err(CliError::Config(format!(
                    "seed {i}: im_k must be a number or \"auto\", got \"{word}\""
                ))),
            })
            .collect()
    }

    pub fn to_study(&self) -> Result<StudyDefinition, CliError> {
        let potential = RadialPotential::from_params(&self.potential.kind, &self.potential.params)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let grid = RadialGrid::new(self.grid.r_end, self.grid.n_points)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let mut study =
            StudyDefinition::new(potential, self.l, grid, (self.lambda.min, self.lambda.max));
        study.seeds = self.seeds()?;
        study.step = StepControl {
            ds: self.step.ds,
            ds_min: self.step.ds_min,
            ds_max: self.step.ds_max,
            newton_tol: self.step.newton_tol,
            newton_max_iter: self.step.newton_max_iter,
        };
        study
            .step
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        study.max_steps = self.step.max_steps;
        study.im_k_min = self.trace.im_k_min;
        study.branch_switching = self.trace.branch_switching;
        study.switched_max_steps = self.trace.switched_max_steps;
        Ok(study)
    }

    /// Output directory, relative paths taken from `base`.
    pub fn output_dir(&self, base: &Path) -> PathBuf {
        if self.output.dir.is_absolute() {
            self.output.dir.clone()
        } else {
            base.join(&self.output.dir)
        }
    }
}
