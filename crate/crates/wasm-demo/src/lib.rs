//! Browser bindings for three curves: the standalone buffer, a first-passage
//! kernel, and the mean-field cumulative rate. Every function returns a flat
//! row-major table; the row widths are the `*_WIDTH` constants.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use thiserror::Error;
use wasm_bindgen::prelude::*;

use dpmf::buffer::{solve_buffer, BufferError, BufferSpec};
use dpmf::fpt::{constant_drift_density, solve_fpt, DriftPath, FptError};
use dpmf::grid::GridFunction;
use dpmf::model::{validate_params, DelayDistribution, InitialCondition, ModelError, ModelParams, RawParams};
use dpmf::timechange::{solve_fixed_point, to_original_time, Numerics, SolveError};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Fpt(#[from] FptError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("{0}")]
    Input(&'static str),
}

/// `t, z, theta, E, B`
pub const BUFFER_WIDTH: usize = 5;
/// `sigma, h, exact h`
pub const PASSAGE_WIDTH: usize = 3;
/// `t, F, rate`
pub const MEANFIELD_WIDTH: usize = 3;

const PASSAGE_CELLS: usize = 2000;

fn symmetric(coupling: f64, min_delay: f64, buffer: f64) -> Result<ModelParams, ModelError> {
    validate_params(RawParams {
        drift_rate: 1.0,
        diffusion_rate: 1.0,
        drift_coupling: coupling,
        diffusion_coupling: coupling,
        reset_position: 1.0,
        min_delay,
        buffer,
    })
}

/// Buffer driven by a piecewise-linear input through `knots` (one per unit of
/// time, in multiples of the crossing rate).
pub fn buffer_rows(delta: f64, coupling: f64, knots: &[f64]) -> Result<Vec<f64>, DemoError> {
    if knots.len() < 2 || knots.iter().any(|k| !(*k >= 0.0)) {
        return Err(DemoError::Input("need at least two nonnegative knots"));
    }
    let p = symmetric(coupling, 1.0, delta)?;
    let spec = BufferSpec::mean_field(&p)?;
    let knot_fn = GridFunction::new(0.0, 1.0, knots.iter().map(|k| k * spec.crossing).collect());
    let step = 1e-3;
    let n = ((knots.len() - 1) as f64 / step).round() as usize;
    let z = GridFunction::sample(0.0, step, n, |t| knot_fn.eval(t));
    let sol = solve_buffer(&spec, &z, 0.0)?;
    let mut rows = Vec::with_capacity(BUFFER_WIDTH * sol.input.len());
    for i in 0..sol.input.len() {
        let b = if sol.active[i] { 1.0 } else { 0.0 };
        rows.extend_from_slice(&[z.node(i), sol.input[i], sol.theta[i], sol.excess[i], b]);
    }
    Ok(rows)
}

/// Passage density from `x0` under constant drift, numerical and closed form.
pub fn passage_rows(x0: f64, drift: f64, horizon: f64) -> Result<Vec<f64>, DemoError> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(DemoError::Input("horizon must be positive"));
    }
    let step = horizon / PASSAGE_CELLS as f64;
    let kernel = solve_fpt(&DriftPath::constant(drift, step, PASSAGE_CELLS), 0, x0)?;
    let mut rows = Vec::with_capacity(PASSAGE_WIDTH * PASSAGE_CELLS);
    for (j, &h) in kernel.density.iter().enumerate() {
        let s = (j as f64 + 0.5) * step;
        rows.extend_from_slice(&[s, h, constant_drift_density(s, x0, drift)]);
    }
    Ok(rows)
}

/// Mean-field cumulative spike count and rate in original time, started from
/// the whole population at the reset position.
pub fn meanfield_rows(coupling: f64, min_delay: f64, sigma_max: f64) -> Result<Vec<f64>, DemoError> {
    let p = symmetric(coupling, min_delay, 0.0)?;
    let delay = DelayDistribution::default_for(min_delay);
    let num = Numerics { dsigma: 1e-3f64.min(min_delay), ..Numerics::with_horizon(sigma_max) };
    let st = solve_fixed_point(&p, &InitialCondition::dirac(1.0), &delay, &num)?;
    let o = to_original_time(&st, num.output_step(&p));
    let mut rows = Vec::with_capacity(MEANFIELD_WIDTH * o.times.len());
    for i in 0..o.times.len() {
        rows.extend_from_slice(&[o.times[i], o.cumulative[i], o.rate[i]]);
    }
    Ok(rows)
}

#[wasm_bindgen]
pub fn buffer_demo(delta: f64, coupling: f64, knots: Vec<f64>) -> Result<Vec<f64>, JsError> {
    Ok(buffer_rows(delta, coupling, &knots)?)
}

#[wasm_bindgen]
pub fn passage_demo(x0: f64, drift: f64, horizon: f64) -> Result<Vec<f64>, JsError> {
    Ok(passage_rows(x0, drift, horizon)?)
}

#[wasm_bindgen]
pub fn meanfield_demo(coupling: f64, min_delay: f64, sigma_max: f64) -> Result<Vec<f64>, JsError> {
    Ok(meanfield_rows(coupling, min_delay, sigma_max)?)
}
