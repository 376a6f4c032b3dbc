//! First-passage kernels of Brownian motion below a drift-integral boundary.
//!
//! A unit-variance Brownian motion started at `x` at clock time `tau` is
//! stopped when it falls below `M(sigma) - M(tau)`, `M` being the integrated
//! drift. Its passage density `h` solves the first-kind Volterra equation
//!
//! `k(x - ΔM(σ), σ - τ) = ∫_τ^σ k(ΔM(σ) - ΔM(ζ), σ - ζ) h(ζ) dζ`
//!
//! with the heat kernel `k(y, t) = exp(-y²/2t) / sqrt(2πt)`.

use std::f64::consts::PI;

use serde::Serialize;
use thiserror::Error;

use crate::grid::GridFunction;
use crate::model::ModelParams;
use crate::special::{erfc, gauss_erfcx};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FptError {
    #[error("time change leaves its slope band on cell {cell} (slope {slope})")]
    NotAdmissibleTimeChange { cell: usize, slope: f64 },
    #[error("start position {x} is too close to the boundary for clock step {step}")]
    SingularQuadrature { x: f64, step: f64 },
    #[error("start index {0} is outside the drift grid")]
    StartOutOfRange(usize),
}

/// Drift of the changed clock and its running integral on a uniform grid
/// starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftPath {
    pub step: f64,
    /// Integrated drift at the grid nodes, starting from 0.
    pub integral: Vec<f64>,
    /// Drift on each cell.
    pub drift: Vec<f64>,
}

impl DriftPath {
    pub fn constant(mu: f64, step: f64, cells: usize) -> Self {
        Self::from_cells(step, vec![mu; cells])
    }

    pub fn from_cells(step: f64, drift: Vec<f64>) -> Self {
        let mut integral = Vec::with_capacity(drift.len() + 1);
        integral.push(0.0);
        let mut acc = 0.0;
        for &mu in &drift {
            acc += mu * step;
            integral.push(acc);
        }
        Self { step, integral, drift }
    }

    pub fn cells(&self) -> usize {
        self.drift.len()
    }
}

/// Drift path generated by an inverse time change sampled from clock time 0.
///
/// The cell slopes of `psi` must lie in `[0, 1/nu2]` up to a small relative tolerance.
pub fn drift_path(psi: &GridFunction, p: &ModelParams) -> Result<DriftPath, FptError> {
    let max_slope = 1.0 / p.diffusion_rate;
    let tol = 1e-9 * max_slope;
    let mut drift = Vec::with_capacity(psi.len().saturating_sub(1));
    for (cell, w) in psi.values.windows(2).enumerate() {
        let slope = (w[1] - w[0]) / psi.step;
        if !(slope >= -tol && slope <= max_slope + tol) {
            return Err(FptError::NotAdmissibleTimeChange { cell, slope });
        }
        drift.push(p.drift(slope.clamp(0.0, max_slope)));
    }
    Ok(DriftPath::from_cells(psi.step, drift))
}

/// Passage density (cell midpoints) and CDF (nodes) for one start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FptKernel {
    /// Index of the start node on the drift grid.
    pub start: usize,
    pub tau: f64,
    pub x: f64,
    pub step: f64,
    /// `density[j]` approximates `h` at `tau + (j + 1/2) * step`.
    pub density: Vec<f64>,
    /// `cdf[i]` approximates `H` at `tau + i * step`; `cdf[0] = 0`.
    pub cdf: Vec<f64>,
}

impl FptKernel {
    /// CDF at elapsed clock time `s >= 0`, linearly interpolated.
    pub fn cdf_at(&self, s: f64) -> f64 {
        GridFunction::new(0.0, self.step, self.cdf.clone()).eval(s)
    }
}

fn heat(y: f64, t: f64) -> f64 {
    (-y * y / (2.0 * t)).exp() / (2.0 * PI * t).sqrt()
}

/// Solves the Volterra equation for a start at grid node `start` and position `x`
/// by product midpoint integration: the `1/sqrt(σ - ζ)` factor is integrated
/// exactly over each cell and the Gaussian factor is frozen at the cell midpoint.
pub fn solve_fpt(drift: &DriftPath, start: usize, x: f64) -> Result<FptKernel, FptError> {
    let total = drift.cells();
    if start > total {
        return Err(FptError::StartOutOfRange(start));
    }
    let n = total - start;
    let dt = drift.step;
    let tau = start as f64 * dt;
    let m: Vec<f64> = drift.integral[start..].iter().map(|v| v - drift.integral[start]).collect();
    let zero = || FptKernel {
        start,
        tau,
        x,
        step: dt,
        density: vec![0.0; n],
        cdf: vec![0.0; n + 1],
    };
    if n == 0 || x > m[n] + 8.0 * (n as f64 * dt).sqrt() {
        return Ok(zero());
    }
    if !(x >= 2.0 * dt.sqrt()) {
        return Err(FptError::SingularQuadrature { x, step: dt });
    }
    let mid: Vec<f64> = m.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    let root: Vec<f64> = (0..=n).map(|k| (k as f64 * dt).sqrt()).collect();
    let c = 2.0 / (2.0 * PI).sqrt();
    let mut h = vec![0.0; n];
    for i in 1..=n {
        let rhs = heat(x - m[i], i as f64 * dt);
        let mut acc = 0.0;
        for j in 1..i {
            let lag = i - j;
            let y = m[i] - mid[j - 1];
            let w = c * (root[lag + 1] - root[lag]) * (-y * y / ((2 * lag + 1) as f64 * dt)).exp();
            acc += w * h[j - 1];
        }
        let y = m[i] - mid[i - 1];
        let diag = c * root[1] * (-y * y / dt).exp();
        h[i - 1] = (rhs - acc) / diag;
    }
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &v in &h {
        acc += v * dt;
        cdf.push(acc);
    }
    Ok(FptKernel {
        start,
        tau,
        x,
        step: dt,
        density: h,
        cdf,
    })
}

/// Passage CDF for constant drift `mu` toward the boundary after elapsed time `s`.
pub fn constant_drift_cdf(s: f64, x: f64, mu: f64) -> f64 {
    if x <= 0.0 {
        return if s > 0.0 { 1.0 } else { 0.0 };
    }
    if s <= 0.0 {
        return 0.0;
    }
    let r = (2.0 * s).sqrt();
    let a = (x - mu * s) / r;
    let b = (x + mu * s) / r;
    // exp(2 mu x) erfc(b) = exp(-a^2) erfcx(b)
    (0.5 * (erfc(a) + gauss_erfcx(a, b))).clamp(0.0, 1.0)
}

/// Passage density for constant drift `mu`.
pub fn constant_drift_density(s: f64, x: f64, mu: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    x / (2.0 * PI * s * s * s).sqrt() * (-(x - mu * s).powi(2) / (2.0 * s)).exp()
}

/// Upper bound on the passage density after elapsed time `s` from `x`, valid
/// for every drift with values in `[min_drift, max_drift]`. The Gaussian factor
/// uses the distance from `x` to the band of reachable drift integrals.
pub fn density_upper_bound(s: f64, x: f64, p: &ModelParams) -> f64 {
    let lo = p.min_drift * s;
    let hi = p.max_drift * s;
    let gap = if x < lo {
        lo - x
    } else if x > hi {
        x - hi
    } else {
        0.0
    };
    bound_with_gap(s, x, gap, p)
}

/// Same bound with the actual drift integral `m` over the elapsed time.
pub fn density_bound_along(s: f64, x: f64, m: f64, p: &ModelParams) -> f64 {
    bound_with_gap(s, x, (x - m).abs(), p)
}

/// Largest value of [`density_upper_bound`] over the clock cell `[s0, s1]`,
/// sampled at the ends and the midpoint. Kernel densities are cell averages,
/// so this is what they must stay below.
pub fn density_cell_bound(s0: f64, s1: f64, x: f64, p: &ModelParams) -> f64 {
    [s0, 0.5 * (s0 + s1), s1]
        .into_iter()
        .map(|s| density_upper_bound(s, x, p))
        .fold(0.0, f64::max)
}

fn bound_with_gap(s: f64, x: f64, gap: f64, p: &ModelParams) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    (x / (s * s * s).sqrt() + (p.max_drift - p.min_drift) / s.sqrt()) * (-gap * gap / (2.0 * s)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_params, RawParams};

    fn params(nu1: f64, lambda1: f64) -> ModelParams {
        validate_params(RawParams {
            drift_rate: nu1,
            diffusion_rate: 1.0,
            drift_coupling: lambda1,
            diffusion_coupling: 1.0,
            reset_position: 1.0,
            min_delay: 0.1,
            buffer: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn closed_form_edges() {
        assert_eq!(constant_drift_cdf(0.5, 0.0, 1.0), 1.0);
        assert_eq!(constant_drift_cdf(0.0, 1.0, 1.0), 0.0);
    }

    #[test]
    fn closed_form_reference_value() {
        // 0.5 * (erfc(0) + e^2 erfc(sqrt 2)), evaluated in 50-digit arithmetic.
        let want = 0.668_102_001_223_170_6;
        assert!((constant_drift_cdf(1.0, 1.0, 1.0) - want).abs() < 1e-14);
    }

    #[test]
    fn closed_form_survives_large_exponents() {
        let v = constant_drift_cdf(1e-2, 30.0, 50.0);
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn flat_psi_gives_blowup_drift() {
        let p = params(1.0, 2.0);
        let psi = GridFunction::new(0.0, 0.1, vec![0.0; 5]);
        let d = drift_path(&psi, &p).unwrap();
        assert!(d.drift.iter().all(|&mu| (mu - 2.0).abs() < 1e-15));
    }

    #[test]
    fn identity_psi_gives_free_drift() {
        let p = params(1.5, 2.0);
        let psi = GridFunction::sample(0.0, 0.1, 10, |s| s);
        let d = drift_path(&psi, &p).unwrap();
        assert!(d.drift.iter().all(|&mu| (mu - 1.5).abs() < 1e-12));
        assert!((d.integral[10] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn steep_psi_is_rejected() {
        let p = params(1.0, 1.0);
        let psi = GridFunction::sample(0.0, 0.1, 10, |s| 2.0 * s);
        assert!(matches!(drift_path(&psi, &p), Err(FptError::NotAdmissibleTimeChange { .. })));
    }

    #[test]
    fn start_too_close_to_boundary() {
        let d = DriftPath::constant(1.0, 1e-2, 100);
        assert!(matches!(solve_fpt(&d, 0, 0.1), Err(FptError::SingularQuadrature { .. })));
    }

    #[test]
    fn far_start_short_circuits() {
        let d = DriftPath::constant(1.0, 1e-2, 100);
        let k = solve_fpt(&d, 0, 20.0).unwrap();
        assert!(k.cdf.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_closed_form_on_short_horizon() {
        let d = DriftPath::constant(0.7, 1e-3, 500);
        let k = solve_fpt(&d, 0, 0.5).unwrap();
        let err = k
            .cdf
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - constant_drift_cdf(i as f64 * 1e-3, 0.5, 0.7)).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "err {err}");
    }
}
