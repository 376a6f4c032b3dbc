//! Model constants, refractory delay laws and initial data.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter `{0}` must be strictly positive")]
    NonPositiveParameter(&'static str),
    #[error("parameter `{0}` must be nonnegative")]
    NegativeParameter(&'static str),
    #[error("history time change is not increasing near t = {0}")]
    NonMonotoneHistory(f64),
    #[error("initial data carries total mass {total}, expected 1")]
    NotNormalized { total: f64 },
    #[error("initial density slope {slope} at 0 reaches the explosion threshold {limit}")]
    ExplosiveInitialData { slope: f64, limit: f64 },
    #[error("invalid initial data: {0}")]
    InvalidInitialData(String),
    #[error("invalid delay law: {0}")]
    InvalidDelay(String),
}

/// Unvalidated model constants, keyed as in configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    #[serde(rename = "nu1")]
    pub drift_rate: f64,
    #[serde(rename = "nu2")]
    pub diffusion_rate: f64,
    #[serde(rename = "lambda1")]
    pub drift_coupling: f64,
    #[serde(rename = "lambda2")]
    pub diffusion_coupling: f64,
    #[serde(rename = "Lambda")]
    pub reset_position: f64,
    #[serde(rename = "epsilon")]
    pub min_delay: f64,
    #[serde(rename = "delta", default)]
    pub buffer: f64,
}

/// Validated constants plus the quantities derived from them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    pub drift_rate: f64,
    pub diffusion_rate: f64,
    pub drift_coupling: f64,
    pub diffusion_coupling: f64,
    pub reset_position: f64,
    pub min_delay: f64,
    /// Buffer level; zero selects the physical (unbuffered) solution.
    pub buffer: f64,
    /// Input rate at which the explosive and stable buffer maps meet.
    pub crossing_rate: f64,
    /// Slope of the inverse time change during buffered episodes.
    pub buffered_slope: f64,
    pub min_drift: f64,
    pub max_drift: f64,
}

pub fn validate_params(raw: RawParams) -> Result<ModelParams, ModelError> {
    let positive = [
        ("nu1", raw.drift_rate),
        ("nu2", raw.diffusion_rate),
        ("lambda1", raw.drift_coupling),
        ("lambda2", raw.diffusion_coupling),
        ("Lambda", raw.reset_position),
        ("epsilon", raw.min_delay),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(ModelError::NonPositiveParameter(name));
        }
    }
    if !(raw.buffer >= 0.0 && raw.buffer.is_finite()) {
        return Err(ModelError::NegativeParameter("delta"));
    }
    let denom = raw.diffusion_coupling + raw.diffusion_rate * raw.buffer;
    let a = raw.drift_coupling / raw.diffusion_coupling;
    let b = raw.drift_rate / raw.diffusion_rate;
    Ok(ModelParams {
        drift_rate: raw.drift_rate,
        diffusion_rate: raw.diffusion_rate,
        drift_coupling: raw.drift_coupling,
        diffusion_coupling: raw.diffusion_coupling,
        reset_position: raw.reset_position,
        min_delay: raw.min_delay,
        buffer: raw.buffer,
        crossing_rate: 1.0 / denom,
        buffered_slope: raw.buffer / denom,
        min_drift: a.min(b),
        max_drift: a.max(b),
    })
}

impl ModelParams {
    pub fn raw(&self) -> RawParams {
        RawParams {
            drift_rate: self.drift_rate,
            diffusion_rate: self.diffusion_rate,
            drift_coupling: self.drift_coupling,
            diffusion_coupling: self.diffusion_coupling,
            reset_position: self.reset_position,
            min_delay: self.min_delay,
            buffer: self.buffer,
        }
    }

    pub fn with_buffer(&self, buffer: f64) -> Result<ModelParams, ModelError> {
        validate_params(RawParams { buffer, ..self.raw() })
    }

    /// Drift of the time-changed process while the clock is frozen.
    pub fn blowup_drift(&self) -> f64 {
        self.drift_coupling / self.diffusion_coupling
    }

    /// Coefficient of the clock speed in the time-changed drift.
    pub fn drift_tilt(&self) -> f64 {
        self.drift_rate - self.drift_coupling * self.diffusion_rate / self.diffusion_coupling
    }

    /// Time-changed drift for a given clock speed `dpsi`.
    pub fn drift(&self, dpsi: f64) -> f64 {
        self.drift_tilt() * dpsi + self.blowup_drift()
    }

    /// Time-changed rate above which the physical clock stops.
    pub fn rate_threshold(&self) -> f64 {
        1.0 / self.diffusion_coupling
    }

    /// Time-changed rate level that drives the excess in buffered episodes.
    pub fn excess_level(&self) -> f64 {
        if self.buffer > 0.0 {
            self.buffered_slope / self.buffer
        } else {
            self.rate_threshold()
        }
    }

    /// Original-time rate produced by time-changed rate `z` while the clock runs.
    pub fn explosive_rate(&self, z: f64) -> f64 {
        self.diffusion_rate * z / (1.0 - self.diffusion_coupling * z)
    }

    /// Original-time rate produced by `z` while the clock runs at its buffered slope.
    pub fn stable_rate(&self, z: f64) -> f64 {
        z / self.buffered_slope
    }
}

/// Refractory delay law, supported on `[min_delay, inf)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayLaw {
    /// `min_delay + Gamma(shape, scale)`; scale defaults to half the minimal delay.
    ShiftedGamma {
        #[serde(default = "default_shape")]
        shape: f64,
        #[serde(default)]
        scale: Option<f64>,
    },
    /// `min_delay + width * Beta(3, 3)`: a bump whose CDF is a quintic smoothstep.
    SmoothBump { width: f64 },
}

fn default_shape() -> f64 {
    2.0
}

impl Default for DelayLaw {
    fn default() -> Self {
        DelayLaw::ShiftedGamma { shape: 2.0, scale: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum DelayShape {
    ShiftedGamma { shape: f64, scale: f64 },
    SmoothBump { width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DelayDistribution {
    pub min_delay: f64,
    pub shape: DelayShape,
}

impl DelayDistribution {
    pub fn new(min_delay: f64, law: DelayLaw) -> Result<Self, ModelError> {
        if !(min_delay > 0.0) {
            return Err(ModelError::NonPositiveParameter("epsilon"));
        }
        let shape = match law {
            DelayLaw::ShiftedGamma { shape, scale } => {
                let scale = scale.unwrap_or(0.5 * min_delay);
                if !(shape >= 2.0) {
                    return Err(ModelError::InvalidDelay(format!(
                        "gamma shape {shape} must be at least 2 for a continuous density"
                    )));
                }
                if !(scale > 0.0) {
                    return Err(ModelError::InvalidDelay(format!("gamma scale {scale} must be positive")));
                }
                DelayShape::ShiftedGamma { shape, scale }
            }
            DelayLaw::SmoothBump { width } => {
                if !(width > 0.0) {
                    return Err(ModelError::InvalidDelay(format!("bump width {width} must be positive")));
                }
                DelayShape::SmoothBump { width }
            }
        };
        Ok(Self { min_delay, shape })
    }

    pub fn default_for(min_delay: f64) -> Self {
        Self::new(min_delay, DelayLaw::default()).expect("default delay law is valid")
    }

    pub fn cdf(&self, s: f64) -> f64 {
        let u = s - self.min_delay;
        if u <= 0.0 {
            return 0.0;
        }
        match self.shape {
            DelayShape::ShiftedGamma { shape, scale } => gamma_cdf(shape, u / scale),
            DelayShape::SmoothBump { width } => {
                let v = u / width;
                if v >= 1.0 {
                    1.0
                } else {
                    v * v * v * (10.0 - 15.0 * v + 6.0 * v * v)
                }
            }
        }
    }

    pub fn pdf(&self, s: f64) -> f64 {
        let u = s - self.min_delay;
        if u <= 0.0 {
            return 0.0;
        }
        match self.shape {
            DelayShape::ShiftedGamma { shape, scale } => {
                let v = u / scale;
                ((shape - 1.0) * v.ln() - v - statrs::function::gamma::ln_gamma(shape)).exp() / scale
            }
            DelayShape::SmoothBump { width } => {
                let v = u / width;
                if v >= 1.0 {
                    0.0
                } else {
                    30.0 * v * v * (1.0 - v) * (1.0 - v) / width
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.shape {
            DelayShape::ShiftedGamma { shape, scale } => {
                self.min_delay + Gamma::new(shape, scale).expect("validated gamma").sample(rng)
            }
            DelayShape::SmoothBump { width } => {
                self.min_delay + width * Beta::new(3.0, 3.0).expect("valid beta").sample(rng)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self.shape {
            DelayShape::ShiftedGamma { shape, scale } => self.min_delay + shape * scale,
            DelayShape::SmoothBump { width } => self.min_delay + 0.5 * width,
        }
    }

    pub fn variance(&self) -> f64 {
        match self.shape {
            DelayShape::ShiftedGamma { shape, scale } => shape * scale * scale,
            DelayShape::SmoothBump { width } => width * width / 28.0,
        }
    }

    /// Smallest delay `s` (up to bisection accuracy) with `1 - cdf(s) < tol`.
    pub fn tail_horizon(&self, tol: f64) -> f64 {
        let mut hi = self.mean() + self.variance().sqrt();
        while 1.0 - self.cdf(hi) >= tol {
            hi *= 2.0;
        }
        let mut lo = self.min_delay;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if 1.0 - self.cdf(mid) >= tol {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

fn gamma_cdf(shape: f64, v: f64) -> f64 {
    if shape.fract() == 0.0 && shape <= 30.0 {
        // 1 - exp(-v) * sum_{j<k} v^j / j!
        let k = shape as usize;
        let mut term = 1.0;
        let mut sum = 1.0;
        for j in 1..k {
            term *= v / j as f64;
            sum += term;
        }
        (1.0 - (-v).exp() * sum).max(0.0)
    } else {
        statrs::function::gamma::gamma_lr(shape, v)
    }
}

/// Spatial part of the initial data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum SpatialData {
    Dirac { position: f64, mass: f64 },
    /// Density sampled on a grid starting at 0.
    Density(GridFunction),
}

impl SpatialData {
    pub fn mass(&self) -> f64 {
        match self {
            SpatialData::Dirac { mass, .. } => *mass,
            SpatialData::Density(q) => trapezoid(q),
        }
    }

    /// Rightmost point carrying mass.
    pub fn extent(&self) -> f64 {
        match self {
            SpatialData::Dirac { position, .. } => *position,
            SpatialData::Density(q) => {
                let last = q.values.iter().rposition(|&v| v > 0.0).unwrap_or(0);
                q.node((last + 1).min(q.len() - 1))
            }
        }
    }
}

pub(crate) fn trapezoid(f: &GridFunction) -> f64 {
    let v = &f.values;
    if v.len() < 2 {
        return 0.0;
    }
    f.step * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialCondition {
    pub spatial: SpatialData,
    /// Cumulative past rate on a grid ending at time 0 with value 0 there.
    pub history: Option<GridFunction>,
    pub initial_excess: f64,
}

impl InitialCondition {
    pub fn dirac(position: f64) -> Self {
        Self {
            spatial: SpatialData::Dirac { position, mass: 1.0 },
            history: None,
            initial_excess: 0.0,
        }
    }

    /// `∫ (1 - P(-t)) dF0(t)`: the fraction of the population that is refractory at time 0.
    pub fn refractory_mass(&self, delay: &DelayDistribution) -> f64 {
        let Some(h) = &self.history else { return 0.0 };
        h.values
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mid = h.node(i) + 0.5 * h.step;
                (1.0 - delay.cdf(-mid)) * (w[1] - w[0])
            })
            .sum()
    }

    pub fn validate(&self, p: &ModelParams, delay: &DelayDistribution, tol_mass: f64) -> Result<(), ModelError> {
        if !(self.initial_excess >= 0.0) {
            return Err(ModelError::NegativeParameter("initial_excess"));
        }
        match &self.spatial {
            SpatialData::Dirac { position, mass } => {
                if !(*position > 0.0) {
                    return Err(ModelError::NonPositiveParameter("dirac_x0"));
                }
                if !(*mass >= 0.0) {
                    return Err(ModelError::NegativeParameter("dirac_mass"));
                }
            }
            SpatialData::Density(q) => {
                if q.start != 0.0 || q.len() < 3 {
                    return Err(ModelError::InvalidInitialData(
                        "density grid must start at 0 with at least 3 nodes".into(),
                    ));
                }
                if q.values.iter().any(|&v| !(v >= 0.0)) {
                    return Err(ModelError::InvalidInitialData("density must be nonnegative".into()));
                }
                if self.initial_excess == 0.0 {
                    let slope = (q.values[1] - q.values[0]) / q.step;
                    let limit = 2.0 / p.diffusion_coupling;
                    if slope >= limit {
                        return Err(ModelError::ExplosiveInitialData { slope, limit });
                    }
                }
            }
        }
        if let Some(h) = &self.history {
            if h.len() < 2 || (h.end()).abs() > 1e-12 * h.step.max(1.0) {
                return Err(ModelError::InvalidInitialData("history grid must end at time 0".into()));
            }
            if h.values[h.len() - 1].abs() > 1e-12 {
                return Err(ModelError::InvalidInitialData("history must vanish at time 0".into()));
            }
        }
        let total = self.spatial.mass() + self.refractory_mass(delay);
        if (total - 1.0).abs() > tol_mass {
            return Err(ModelError::NotNormalized { total });
        }
        Ok(())
    }
}

/// Past data in the changed clock: inverse time change and cumulative rate on
/// a grid ending at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClockHistory {
    pub psi: GridFunction,
    pub cumulative: GridFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimechangedInitial {
    pub spatial: SpatialData,
    pub history: Option<ClockHistory>,
    pub initial_excess: f64,
}

/// Maps continuous-history initial data into the changed clock on a grid of step `dsigma`.
pub fn map_initial_to_timechange(
    ic: &InitialCondition,
    p: &ModelParams,
    dsigma: f64,
) -> Result<TimechangedInitial, ModelError> {
    let history = match &ic.history {
        None => None,
        Some(f0) => {
            let clock: Vec<f64> = f0
                .nodes()
                .zip(&f0.values)
                .map(|(t, f)| p.diffusion_rate * t + p.diffusion_coupling * f)
                .collect();
            for (i, w) in clock.windows(2).enumerate() {
                if !(w[1] > w[0]) {
                    return Err(ModelError::NonMonotoneHistory(f0.node(i + 1)));
                }
            }
            let clock = GridFunction::new(f0.start, f0.step, clock);
            let earliest = clock.values[0];
            let n = (-earliest / dsigma).floor() as usize;
            let start = -(n as f64) * dsigma;
            let psi: Vec<f64> = (0..=n)
                .map(|k| crate::grid::right_inverse(&clock, start + k as f64 * dsigma))
                .collect();
            let cumulative: Vec<f64> = psi.iter().map(|&t| f0.eval(t) + ic.initial_excess).collect();
            Some(ClockHistory {
                psi: GridFunction::new(start, dsigma, psi),
                cumulative: GridFunction::new(start, dsigma, cumulative),
            })
        }
    };
    Ok(TimechangedInitial {
        spatial: ic.spatial.clone(),
        history,
        initial_excess: ic.initial_excess,
    })
}
