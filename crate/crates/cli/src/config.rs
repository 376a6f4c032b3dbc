//! Run configuration: one file describes one run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use dpmf::grid::GridFunction;
use dpmf::model::{validate_params, DelayDistribution, DelayLaw, InitialCondition, ModelParams, RawParams, SpatialData};
use dpmf::timechange::Numerics;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("unsupported config extension for {0} (expected .toml or .json)")]
    Format(PathBuf),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Meanfield,
    Buffered,
    SweepDelta,
    Particles,
    Compare,
    BufferDemo,
    BlowupReport,
}

/// Initial data. With neither key set the population starts as a point mass
/// at the reset position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpec {
    /// Position of a point mass.
    pub dirac_x0: Option<f64>,
    /// Mass of the point mass; the rest of the population is refractory.
    pub mass: Option<f64>,
    /// Two-column CSV `x,p` on a uniform grid starting at 0.
    pub density_file: Option<PathBuf>,
    /// Excess already accumulated at time 0.
    pub initial_excess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Buffer levels, strictly decreasing.
    pub deltas: Vec<f64>,
    /// Read `deltas` as multiples of the minimal delay.
    pub relative: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParticleSpec {
    pub counts: Vec<usize>,
    pub replicas: usize,
    pub horizon: f64,
    /// Comparison grid points on `[0, horizon]`.
    pub points: usize,
}

impl Default for ParticleSpec {
    fn default() -> Self {
        Self { counts: vec![400], replicas: 8, horizon: 2.0, points: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BufferDemoSpec {
    /// Sampling step of the input.
    pub step: f64,
    /// Spacing of the input knots.
    pub knot_step: f64,
    pub knots: Vec<f64>,
    /// Read `knots` as multiples of the crossing rate.
    pub relative: bool,
}

impl Default for BufferDemoSpec {
    fn default() -> Self {
        Self {
            step: 1e-3,
            knot_step: 1.0,
            knots: vec![0.2, 0.8, 1.4, 1.2, 0.6, 0.3, 1.3, 1.1, 0.5, 0.1],
            relative: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub params: RawParams,
    #[serde(default)]
    pub initial: InitialSpec,
    /// Two-column CSV `t,F` of the past cumulative rate, uniform in `t <= 0`
    /// and ending at `t = 0` with `F = 0`.
    #[serde(default)]
    pub history_file: Option<PathBuf>,
    #[serde(default)]
    pub delay: DelayLaw,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub particles: ParticleSpec,
    #[serde(default)]
    pub buffer_demo: BufferDemoSpec,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

/// Configuration with the model objects built and checked.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub params: ModelParams,
    pub delay: DelayDistribution,
    pub initial: InitialCondition,
}

fn parse_error(path: &Path, message: String) -> ConfigError {
    if let Some(rest) = message.split("missing field `").nth(1) {
        if let Some(key) = rest.split('`').next() {
            return ConfigError::MissingKey(key.to_string());
        }
    }
    ConfigError::Parse { path: path.to_path_buf(), message }
}

/// Reads a two-column CSV with a header row into a uniform grid function.
fn read_grid(path: &Path) -> Result<GridFunction, ConfigError> {
    let bad = |message: String| ConfigError::Parse { path: path.to_path_buf(), message };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 2 {
            return Err(bad(format!("expected two columns, found {}", row.len())));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        xs.push(num(&row[0])?);
        ys.push(num(&row[1])?);
    }
    if xs.len() < 2 {
        return Err(bad("need at least two rows".into()));
    }
    let step = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    if !(step > 0.0) || xs.iter().enumerate().any(|(i, x)| (x - xs[0] - i as f64 * step).abs() > 1e-9 * step.max(1.0)) {
        return Err(bad("first column must be uniformly increasing".into()));
    }
    Ok(GridFunction::new(xs[0], step, ys))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut config = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text).map_err(|m| parse_error(path, m))?,
            Some("json") => Self::from_json(&text).map_err(|m| parse_error(path, m))?,
            _ => return Err(ConfigError::Format(path.to_path_buf())),
        };
        config.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.message().to_string())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    fn initial_condition(&self, p: &ModelParams) -> Result<InitialCondition, ConfigError> {
        let init = &self.initial;
        let spatial = match (init.dirac_x0, &init.density_file) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid("initial.dirac_x0 and initial.density_file are exclusive".into()));
            }
            (_, Some(file)) => {
                let q = read_grid(&self.resolve(file))?;
                if q.start.abs() > 1e-12 {
                    return Err(ConfigError::Invalid("initial density grid must start at x = 0".into()));
                }
                SpatialData::Density(q)
            }
            (x0, None) => SpatialData::Dirac { position: x0.unwrap_or(p.reset_position), mass: init.mass.unwrap_or(1.0) },
        };
        let history = match &self.history_file {
            Some(file) => {
                let h = read_grid(&self.resolve(file))?;
                if h.end().abs() > 1e-9 * h.step {
                    return Err(ConfigError::Invalid("history grid must end at t = 0".into()));
                }
                Some(h)
            }
            None => None,
        };
        Ok(InitialCondition { spatial, history, initial_excess: init.initial_excess })
    }

    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let params = validate_params(self.params).map_err(|e| invalid(&e))?;
        self.numerics.validate(&params).map_err(|e| invalid(&e))?;
        let delay = DelayDistribution::new(params.min_delay, self.delay).map_err(|e| invalid(&e))?;
        let initial = self.initial_condition(&params)?;
        if self.command != Command::BufferDemo {
            initial.validate(&params, &delay, self.numerics.tol_mass).map_err(|e| invalid(&e))?;
        }
        match self.command {
            Command::Buffered | Command::BufferDemo if params.buffer <= 0.0 => {
                return Err(ConfigError::Invalid(format!("command {:?} needs delta > 0", self.command)));
            }
            Command::SweepDelta if self.sweep.deltas.is_empty() => {
                return Err(ConfigError::MissingKey("sweep.deltas".into()));
            }
            Command::Particles | Command::Compare => {
                let ps = &self.particles;
                if ps.counts.is_empty() || ps.counts.contains(&0) || ps.replicas == 0 || ps.points == 0 {
                    return Err(ConfigError::Invalid("particle counts, replicas and points must be positive".into()));
                }
                if !(ps.horizon > 0.0 && ps.horizon.is_finite()) {
                    return Err(ConfigError::Invalid("particle horizon must be positive".into()));
                }
            }
            Command::BufferDemo => {
                let b = &self.buffer_demo;
                if !(b.step > 0.0 && b.knot_step > 0.0) || b.knots.len() < 2 || b.knots.iter().any(|k| !(*k >= 0.0)) {
                    return Err(ConfigError::Invalid(
                        "buffer demo needs positive steps and at least two nonnegative knots".into(),
                    ));
                }
            }
            _ => {}
        }
        Ok(Prepared { params, delay, initial })
    }

    pub fn sweep_deltas(&self, p: &ModelParams) -> Vec<f64> {
        let scale = if self.sweep.relative { p.min_delay } else { 1.0 };
        self.sweep.deltas.iter().map(|d| d * scale).collect()
    }
}
