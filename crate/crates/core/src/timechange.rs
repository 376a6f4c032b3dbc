//! The changed-clock solver.
//!
//! In the clock `σ = ν2 t + λ2 F(t)` the density `q(σ, x)` of active particles
//! obeys
//!
//! `∂σ q = μ(σ) ∂x q + ½ ∂²x q + (dG_ε/dσ) δ_Λ`,  `q(σ, 0) = 0`,
//!
//! with drift `μ = (ν1 - λ1ν2/λ2) Ψ' + λ1/λ2`, boundary rate `g = ½ ∂x q(σ, 0)`,
//! cumulative rate `G` and delayed reset rate `G_ε`. The inverse time change is
//! the fixed point `Ψ = δ2 σ + [sup_{τ≤σ} ((τ - λ2 G(τ))/ν2 - δ2 τ)]₊`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{solve_buffer, BufferError, BufferSpec};
use crate::fpt::{constant_drift_cdf, drift_path, solve_fpt, DriftPath, FptError};
use crate::grid::{right_inverse, GridFunction};
use crate::model::{
    map_initial_to_timechange, ClockHistory, DelayDistribution, InitialCondition, ModelError, ModelParams,
    SpatialData, TimechangedInitial,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fpt(#[from] FptError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error("cell Peclet number {peclet} exceeds 2: refine dx (drift {drift}, dx {dx})")]
    CflViolation { drift: f64, dx: f64, peclet: f64 },
    #[error("fixed point did not converge on window [{start}, {end}] after {iterations} iterations")]
    NoConvergence { start: f64, end: f64, iterations: usize },
    #[error("blowup triggered at sigma = {0} never exits before the end of the run")]
    EternalBlowup(f64),
    #[error("invalid numerics: {0}")]
    InvalidNumerics(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    BackwardEuler,
    #[default]
    Bdf2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    pub sigma_max: f64,
    pub dsigma: f64,
    /// Spatial step; defaults to `Λ/200`.
    pub dx: Option<f64>,
    /// Right end of the spatial domain; defaults to the data extent plus a
    /// margin the drift keeps the mass from crossing.
    pub x_max: Option<f64>,
    /// Particle Euler step; defaults to `1e-4 Λ²/ν2`.
    pub dt: Option<f64>,
    /// Original-time output step; defaults to `10 dσ / ν2`.
    pub output_step: Option<f64>,
    pub tol_fp: f64,
    #[serde(rename = "tol_E")]
    pub tol_e: f64,
    pub tol_mass: f64,
    pub relaxation: f64,
    pub max_iterations: usize,
    pub scheme: TimeScheme,
    /// Keep one density slice every this many clock steps; defaults to about 200 slices.
    pub snapshot_every: Option<usize>,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            sigma_max: 10.0,
            dsigma: 1e-3,
            dx: None,
            x_max: None,
            dt: None,
            output_step: None,
            tol_fp: 1e-10,
            tol_e: 1e-10,
            tol_mass: 1e-6,
            relaxation: 1.0,
            max_iterations: 500,
            scheme: TimeScheme::Bdf2,
            snapshot_every: None,
        }
    }
}

impl Numerics {
    pub fn with_horizon(sigma_max: f64) -> Self {
        Self { sigma_max, ..Self::default() }
    }

    pub fn validate(&self, p: &ModelParams) -> Result<(), SolveError> {
        let positive = [
            ("sigma_max", self.sigma_max),
            ("dsigma", self.dsigma),
            ("tol_fp", self.tol_fp),
            ("tol_E", self.tol_e),
            ("tol_mass", self.tol_mass),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SolveError::InvalidNumerics(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("dx", self.dx), ("x_max", self.x_max), ("dt", self.dt), ("output_step", self.output_step)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(SolveError::InvalidNumerics(format!("{name} must be positive")));
                }
            }
        }
        if !(self.relaxation > 0.0 && self.relaxation <= 1.0) {
            return Err(SolveError::InvalidNumerics("relaxation must lie in (0, 1]".into()));
        }
        if self.dsigma > p.diffusion_rate * p.min_delay {
            return Err(SolveError::InvalidNumerics(format!(
                "dsigma {} exceeds nu2 * epsilon = {}",
                self.dsigma,
                p.diffusion_rate * p.min_delay
            )));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.sigma_max / self.dsigma - 1e-9).ceil().max(1.0) as usize
    }

    pub fn space_step(&self, p: &ModelParams) -> f64 {
        self.dx.unwrap_or(p.reset_position / 200.0)
    }

    pub fn particle_step(&self, p: &ModelParams) -> f64 {
        self.dt.unwrap_or(1e-4 * p.reset_position * p.reset_position / p.diffusion_rate)
    }

    pub fn output_step(&self, p: &ModelParams) -> f64 {
        self.output_step.unwrap_or(10.0 * self.dsigma / p.diffusion_rate)
    }

    pub fn domain_end(&self, p: &ModelParams, spatial: &SpatialData) -> f64 {
        self.x_max.unwrap_or_else(|| {
            let reach = p.reset_position.max(spatial.extent());
            // A particle drifting toward 0 at speed >= min_drift overshoots its
            // start by more than a with probability exp(-2 min_drift a).
            let margin = (10.0 * self.sigma_max.sqrt()).min(12.0 / p.min_drift + 1.0);
            reach + margin
        })
    }
}

/// Spatial discretization: `cells` cells of width `dx` on `[0, cells * dx]`,
/// values are cell averages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpaceGrid {
    pub dx: f64,
    pub cells: usize,
}

impl SpaceGrid {
    pub fn new(dx: f64, x_max: f64) -> Self {
        Self { dx, cells: (x_max / dx).ceil().max(3.0) as usize }
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dx
    }

    /// Cells bracketing `x` and the linear weights on them.
    fn bracket(&self, x: f64) -> [(usize, f64); 2] {
        let u = x / self.dx - 0.5;
        if u <= 0.0 {
            return [(0, 1.0), (0, 0.0)];
        }
        let k = u.floor() as usize;
        if k + 1 >= self.cells {
            return [(self.cells - 1, 1.0), (self.cells - 1, 0.0)];
        }
        let w = u - k as f64;
        [(k, 1.0 - w), (k + 1, w)]
    }

    pub fn mass(&self, q: &[f64]) -> f64 {
        self.dx * q.iter().sum::<f64>()
    }

    /// `½ ∂x q(0)` from the one-sided stencil through `q(0) = 0` and the first two cell centers.
    pub fn boundary_rate(&self, q: &[f64]) -> f64 {
        (9.0 * q[0] - q[1]) / (6.0 * self.dx)
    }
}

/// Density slice at the start of the run.
pub fn initial_slice(grid: &SpaceGrid, spatial: &SpatialData) -> Vec<f64> {
    let mut q = vec![0.0; grid.cells];
    match spatial {
        SpatialData::Dirac { position, mass } => {
            for (k, w) in grid.bracket(*position) {
                q[k] += mass * w / grid.dx;
            }
        }
        SpatialData::Density(f) => {
            for (k, v) in q.iter_mut().enumerate() {
                *v = f.eval(grid.center(k)).max(0.0);
            }
            let target = spatial.mass();
            let have = grid.mass(&q);
            if have > 0.0 {
                q.iter_mut().for_each(|v| *v *= target / have);
            }
        }
    }
    q
}

/// Increments produced by one density step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Boundary rate `g` at the new level.
    pub rate: f64,
    /// Increment of the cumulative rate `G` over the step.
    pub flux: f64,
    /// Mass leaving through the right end of the domain.
    pub outflow: f64,
}

/// Implicit finite-volume integrator for the changed-clock density.
///
/// Diffusion and advection are both implicit (central advective fluxes, one
/// tridiagonal solve per step). The boundary flux, the outflow and the reset
/// deposit are booked with the same multistep weights as the density, so that
/// `mass + G - G_ε + outflow` is invariant to round-off.
#[derive(Debug, Clone)]
pub struct DensityStepper {
    pub grid: SpaceGrid,
    pub scheme: TimeScheme,
    pub q: Vec<f64>,
    prev: Option<Vec<f64>>,
    last_flux: f64,
    last_outflow: f64,
    last_source: f64,
    reset: [(usize, f64); 2],
}

impl DensityStepper {
    pub fn new(grid: SpaceGrid, q: Vec<f64>, reset_position: f64, scheme: TimeScheme) -> Self {
        Self {
            grid,
            scheme,
            q,
            prev: None,
            last_flux: 0.0,
            last_outflow: 0.0,
            last_source: 0.0,
            reset: grid.bracket(reset_position),
        }
    }

    pub fn mass(&self) -> f64 {
        self.grid.mass(&self.q)
    }

    /// Advances one clock step of length `dsigma` with drift `mu`, depositing the
    /// reset mass `source` (the increment of `G_ε`) at the reset position.
    pub fn step(&mut self, mu: f64, dsigma: f64, source: f64) -> StepOutput {
        let n = self.grid.cells;
        let dx = self.grid.dx;
        let bdf2 = self.scheme == TimeScheme::Bdf2 && self.prev.is_some();
        let (beta, carry) = if bdf2 { (2.0 * dsigma / 3.0, 1.0 / 3.0) } else { (dsigma, 0.0) };

        let mut rhs: Vec<f64> = match (&self.prev, bdf2) {
            (Some(prev), true) => self.q.iter().zip(prev).map(|(a, b)| (4.0 * a - b) / 3.0).collect(),
            _ => self.q.clone(),
        };
        let deposit = source - carry * self.last_source;
        for (k, w) in self.reset {
            rhs[k] += deposit * w / dx;
        }

        // flux through face k+1/2: a q_k + b q_{k+1}; through x = 0: (9 q_0 - q_1) / (6 dx)
        let a = 0.5 * mu - 0.5 / dx;
        let b = 0.5 * mu + 0.5 / dx;
        let r = beta / dx;
        let mut lower = vec![0.0; n];
        let mut diag = vec![0.0; n];
        let mut upper = vec![0.0; n];
        for k in 0..n {
            let (mut l, mut d, mut u) = (0.0, 0.0, 0.0);
            // right face
            if k + 1 < n {
                d += a;
                u += b;
            } else {
                d -= 1.0 / dx;
            }
            // left face
            if k == 0 {
                d -= 1.5 / dx;
                u += 1.0 / (6.0 * dx);
            } else {
                l -= a;
                d -= b;
            }
            lower[k] = -r * l;
            diag[k] = 1.0 - r * d;
            upper[k] = -r * u;
        }
        let next = thomas(&lower, &diag, &upper, &rhs);

        let rate = self.grid.boundary_rate(&next);
        let out_rate = next[n - 1] / dx;
        let flux = beta * rate + carry * self.last_flux;
        let outflow = beta * out_rate + carry * self.last_outflow;
        self.last_flux = flux;
        self.last_outflow = outflow;
        self.last_source = source;
        self.prev = Some(std::mem::replace(&mut self.q, next));
        StepOutput { rate, flux, outflow }
    }
}

fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for k in 1..n {
        let m = diag[k] - lower[k] * c[k - 1];
        c[k] = upper[k] / m;
        d[k] = (rhs[k] - lower[k] * d[k - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for k in (0..n - 1).rev() {
        x[k] = d[k] - c[k] * x[k + 1];
    }
    x
}

/// One backward-Euler step of the density equation; returns the new slice and
/// its boundary rate.
pub fn evolve_density(q_prev: &[f64], grid: SpaceGrid, mu: f64, dsigma: f64, source: f64, reset_position: f64) -> (Vec<f64>, f64) {
    let mut st = DensityStepper::new(grid, q_prev.to_vec(), reset_position, TimeScheme::BackwardEuler);
    let out = st.step(mu, dsigma, source);
    (st.q, out.rate)
}

/// Delayed reset rate at node `i` of a changed-clock run:
/// `G_ε(σ_i) = ∫ G(ξ) dQ(ξ)` with `Q(ξ) = 1 - P_ε(Ψ(σ_i) - Ψ(ξ))`, summed over
/// clock cells with `G` at cell midpoints, then over the history cells, with
/// the mass older than `horizon` (in original time) lumped at the last cell visited.
#[allow(clippy::too_many_arguments)]
fn delayed_at(
    i: usize,
    psi: &[f64],
    cum: &[f64],
    history: Option<&ClockHistory>,
    past_level: f64,
    delay: &DelayDistribution,
    horizon: f64,
) -> f64 {
    let now = psi[i];
    let target = now - delay.min_delay;
    let k = psi[..=i].partition_point(|&v| v <= target);
    let mut total = 0.0;
    let mut p_right = 0.0;
    for j in (0..k).rev() {
        let p_left = delay.cdf(now - psi[j]);
        total += 0.5 * (cum[j] + cum[j + 1]) * (p_left - p_right);
        p_right = p_left;
        if now - psi[j] > horizon {
            return total + cum[j] * (1.0 - p_left);
        }
    }
    if k == 0 {
        p_right = delay.cdf(now - psi[0]);
    }
    match history {
        Some(h) => {
            let (hp, hc) = (&h.psi.values, &h.cumulative.values);
            for j in (0..hp.len() - 1).rev() {
                let p_left = delay.cdf(now - hp[j]);
                total += 0.5 * (hc[j] + hc[j + 1]) * (p_left - p_right);
                p_right = p_left;
                if now - hp[j] > horizon {
                    break;
                }
            }
            let oldest = hc[0];
            total + oldest * (1.0 - p_right)
        }
        None => total + past_level * (1.0 - p_right),
    }
}

/// `G_ε(σ)` for a cumulative rate and inverse time change sampled on the same
/// grid from 0, with history taken from `initial`.
pub fn reset_rate(
    cumulative: &GridFunction,
    psi: &GridFunction,
    initial: &TimechangedInitial,
    delay: &DelayDistribution,
    sigma: f64,
) -> f64 {
    let i = ((sigma - psi.start) / psi.step).round().clamp(0.0, (psi.len() - 1) as f64) as usize;
    let horizon = delay.tail_horizon(1e-12);
    delayed_at(i, &psi.values, &cumulative.values, initial.history.as_ref(), initial.initial_excess, delay, horizon)
}

/// Right-hand side of the fixed-point equation applied to `G` on a grid from 0.
pub fn apply_psi_map(cumulative: &GridFunction, p: &ModelParams) -> GridFunction {
    let mut running = f64::NEG_INFINITY;
    let values = cumulative
        .nodes()
        .zip(&cumulative.values)
        .map(|(s, &g)| {
            let s = s - cumulative.start;
            running = running.max((s - p.diffusion_coupling * g) / p.diffusion_rate - p.buffered_slope * s);
            p.buffered_slope * s + running.max(0.0)
        })
        .collect();
    GridFunction::new(cumulative.start, cumulative.step, values)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot {
    pub index: usize,
    pub sigma: f64,
    pub density: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    pub start: f64,
    pub end: f64,
    pub iterations: usize,
    /// Sup distance between consecutive iterates.
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeChangeState {
    pub params: ModelParams,
    pub numerics: Numerics,
    pub delay: DelayDistribution,
    #[serde(skip)]
    pub initial: TimechangedInitial,
    pub space: SpaceGrid,
    pub psi: GridFunction,
    pub cumulative: GridFunction,
    pub delayed: GridFunction,
    pub rate: GridFunction,
    pub excess: GridFunction,
    pub mass: GridFunction,
    /// Mass that left through the right end of the domain, cumulative.
    pub outflow: GridFunction,
    pub snapshots: Vec<Snapshot>,
    /// Density slices at the last node before each rise of the excess.
    pub trigger_slices: Vec<Snapshot>,
    pub windows: Vec<WindowReport>,
}

impl TimeChangeState {
    pub fn steps(&self) -> usize {
        self.psi.len() - 1
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.psi.node(i)
    }

    /// Drift on clock cell `i`.
    pub fn drift(&self, i: usize) -> f64 {
        let slope = (self.psi.values[i + 1] - self.psi.values[i]) / self.psi.step;
        self.params.drift(slope.clamp(0.0, 1.0 / self.params.diffusion_rate))
    }

    /// `mass + G - G_ε + outflow - 1` at every node.
    pub fn clock_conservation(&self) -> Vec<f64> {
        (0..self.psi.len())
            .map(|i| {
                self.mass.values[i] + self.cumulative.values[i] - self.delayed.values[i] + self.outflow.values[i]
                    - 1.0
            })
            .collect()
    }
}

struct Setup {
    initial: TimechangedInitial,
    space: SpaceGrid,
    steps: usize,
    horizon: f64,
}

fn setup(p: &ModelParams, ic: &InitialCondition, delay: &DelayDistribution, num: &Numerics) -> Result<Setup, SolveError> {
    num.validate(p)?;
    ic.validate(p, delay, num.tol_mass)?;
    let initial = map_initial_to_timechange(ic, p, num.dsigma)?;
    let dx = num.space_step(p);
    let peclet = 2.0 * p.max_drift * dx;
    if peclet > 2.0 {
        return Err(SolveError::CflViolation { drift: p.max_drift, dx, peclet });
    }
    let space = SpaceGrid::new(dx, num.domain_end(p, &initial.spatial));
    Ok(Setup { initial, space, steps: num.steps(), horizon: delay.tail_horizon(1e-12) })
}

/// Picard iteration for the inverse time change, continued window by window.
pub fn solve_fixed_point(
    p: &ModelParams,
    ic: &InitialCondition,
    delay: &DelayDistribution,
    num: &Numerics,
) -> Result<TimeChangeState, SolveError> {
    let Setup { initial, space, steps: n, horizon } = setup(p, ic, delay, num)?;
    let ds = num.dsigma;
    let (lambda2, nu2, slope_lo) = (p.diffusion_coupling, p.diffusion_rate, p.buffered_slope);
    let slope_hi = 1.0 / nu2;
    let snapshot_every = num.snapshot_every.unwrap_or((n / 200).max(1));

    let q0 = initial_slice(&space, &initial.spatial);
    let mut stepper = DensityStepper::new(space, q0.clone(), p.reset_position, num.scheme);
    let mut psi = vec![0.0; n + 1];
    let mut cum = vec![0.0; n + 1];
    let mut geps = vec![0.0; n + 1];
    let mut rate = vec![0.0; n + 1];
    let mut mass = vec![0.0; n + 1];
    let mut outflow = vec![0.0; n + 1];
    let mut excess = vec![0.0; n + 1];
    cum[0] = initial.initial_excess;
    geps[0] = delayed_at(0, &psi, &cum, initial.history.as_ref(), initial.initial_excess, delay, horizon);
    rate[0] = match initial.spatial {
        SpatialData::Dirac { .. } => 0.0,
        SpatialData::Density(_) => space.boundary_rate(&q0),
    };
    mass[0] = space.mass(&q0);
    excess[0] = initial.initial_excess;
    let mut running = -lambda2 * cum[0] / nu2;

    let mut window_start = q0.clone();
    let mut snapshots = vec![Snapshot { index: 0, sigma: 0.0, density: q0 }];
    let mut trigger_slices = Vec::new();
    let mut windows = Vec::new();
    let window = ((nu2 * p.min_delay).min(num.sigma_max / 50.0) / ds + 1e-9).floor().max(1.0) as usize;

    let mut a = 0;
    let mut new_psi = vec![0.0; n + 1];
    while a < n {
        let b = (a + window).min(n);
        let slope = if a == 0 {
            slope_hi
        } else {
            ((psi[a] - psi[a - 1]) / ds).clamp(slope_lo, slope_hi)
        };
        for i in a + 1..=b {
            psi[i] = psi[a] + (i - a) as f64 * ds * slope;
        }
        let mut distances = Vec::new();
        let mut slices: Vec<Vec<f64>>;
        let mut final_running;
        loop {
            for i in a + 1..=b {
                geps[i] = delayed_at(i, &psi, &cum, initial.history.as_ref(), initial.initial_excess, delay, horizon);
            }
            let mut st = stepper.clone();
            slices = Vec::with_capacity(b - a);
            for i in a + 1..=b {
                let s = ((psi[i] - psi[i - 1]) / ds).clamp(0.0, slope_hi);
                let out = st.step(p.drift(s), ds, geps[i] - geps[i - 1]);
                cum[i] = cum[i - 1] + out.flux;
                rate[i] = out.rate;
                outflow[i] = outflow[i - 1] + out.outflow;
                mass[i] = st.mass();
                slices.push(st.q.clone());
            }
            let mut run = running;
            let mut dist: f64 = 0.0;
            for i in a + 1..=b {
                let sigma = i as f64 * ds;
                run = run.max((sigma - lambda2 * cum[i]) / nu2 - slope_lo * sigma);
                new_psi[i] = slope_lo * sigma + run.max(0.0);
                dist = dist.max((new_psi[i] - psi[i]).abs());
            }
            final_running = run;
            distances.push(dist);
            if dist <= num.tol_fp {
                psi[a + 1..=b].copy_from_slice(&new_psi[a + 1..=b]);
                stepper = st;
                break;
            }
            if distances.len() >= num.max_iterations {
                return Err(SolveError::NoConvergence {
                    start: a as f64 * ds,
                    end: b as f64 * ds,
                    iterations: distances.len(),
                });
            }
            let w = num.relaxation;
            for i in a + 1..=b {
                psi[i] += w * (new_psi[i] - psi[i]);
            }
        }
        running = final_running;
        for i in a + 1..=b {
            let sigma = i as f64 * ds;
            excess[i] = cum[i] + (nu2 * psi[i] - sigma) / lambda2;
            if excess[i] > num.tol_e && excess[i - 1] <= num.tol_e {
                let density = if i - 1 == a { window_start.clone() } else { slices[i - a - 2].clone() };
                trigger_slices.push(Snapshot { index: i - 1, sigma: (i - 1) as f64 * ds, density });
            }
            if i % snapshot_every == 0 || i == n {
                snapshots.push(Snapshot { index: i, sigma, density: slices[i - a - 1].clone() });
            }
        }
        windows.push(WindowReport {
            start: a as f64 * ds,
            end: b as f64 * ds,
            iterations: distances.len(),
            distances,
        });
        window_start = stepper.q.clone();
        a = b;
    }

    let g = |v: Vec<f64>| GridFunction::new(0.0, ds, v);
    Ok(TimeChangeState {
        params: *p,
        numerics: *num,
        delay: *delay,
        initial,
        space,
        psi: g(psi),
        cumulative: g(cum),
        delayed: g(geps),
        rate: g(rate),
        excess: g(excess),
        mass: g(mass),
        outflow: g(outflow),
        snapshots,
        trigger_slices,
        windows,
    })
}

/// How `G` is obtained for a prescribed inverse time change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    /// Boundary flux of the evolved density.
    Density,
    /// Renewal quadrature over first-passage kernels.
    Renewal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSolution {
    pub cumulative: GridFunction,
    pub delayed: GridFunction,
    /// Boundary rate; absent in renewal mode.
    pub rate: Option<GridFunction>,
    pub mass: Option<GridFunction>,
}

/// Cumulative rate `G` produced by a prescribed inverse time change `psi`
/// (sampled from 0 with the clock step of `num`).
pub fn solve_g(
    psi: &GridFunction,
    p: &ModelParams,
    ic: &InitialCondition,
    delay: &DelayDistribution,
    num: &Numerics,
    mode: RateMode,
) -> Result<RateSolution, SolveError> {
    let num = Numerics { sigma_max: psi.end(), dsigma: psi.step, ..*num };
    let Setup { initial, space, horizon, .. } = setup(p, ic, delay, &num)?;
    let drift = drift_path(psi, p)?;
    let n = drift.cells();
    let ds = psi.step;
    let mut cum = vec![0.0; n + 1];
    let mut geps = vec![0.0; n + 1];
    cum[0] = initial.initial_excess;
    geps[0] = delayed_at(0, &psi.values, &cum, initial.history.as_ref(), initial.initial_excess, delay, horizon);
    let g = |v: Vec<f64>| GridFunction::new(0.0, ds, v);
    match mode {
        RateMode::Density => {
            let q0 = initial_slice(&space, &initial.spatial);
            let mut rate = vec![0.0; n + 1];
            let mut mass = vec![0.0; n + 1];
            rate[0] = match initial.spatial {
                SpatialData::Dirac { .. } => 0.0,
                SpatialData::Density(_) => space.boundary_rate(&q0),
            };
            mass[0] = space.mass(&q0);
            let mut st = DensityStepper::new(space, q0, p.reset_position, num.scheme);
            for i in 1..=n {
                geps[i] = delayed_at(i, &psi.values, &cum, initial.history.as_ref(), initial.initial_excess, delay, horizon);
                let out = st.step(drift.drift[i - 1], ds, geps[i] - geps[i - 1]);
                cum[i] = cum[i - 1] + out.flux;
                rate[i] = out.rate;
                mass[i] = st.mass();
            }
            Ok(RateSolution { cumulative: g(cum), delayed: g(geps), rate: Some(g(rate)), mass: Some(g(mass)) })
        }
        RateMode::Renewal => {
            let from_reset: Vec<Vec<f64>> = crate::par_map((0..n).collect(), |k| {
                solve_fpt(&drift, k, p.reset_position).map(|kern| kern.cdf)
            })
            .into_iter()
            .collect::<Result<_, _>>()?;
            let start_term = initial_passage(&drift, &initial.spatial)?;
            for i in 1..=n {
                geps[i] = delayed_at(i, &psi.values, &cum, initial.history.as_ref(), initial.initial_excess, delay, horizon);
                let mut acc = initial.initial_excess + start_term[i];
                for k in 0..i {
                    let h_left = from_reset[k][i - k];
                    let h_right = if k + 1 < i { from_reset[k + 1][i - k - 1] } else { 0.0 };
                    acc += 0.5 * (h_left + h_right) * (geps[k + 1] - geps[k]);
                }
                cum[i] = acc;
            }
            Ok(RateSolution { cumulative: g(cum), delayed: g(geps), rate: None, mass: None })
        }
    }
}

/// `∫ H(σ, 0, x) q0(dx)` on the drift grid.
fn initial_passage(drift: &DriftPath, spatial: &SpatialData) -> Result<Vec<f64>, SolveError> {
    let n = drift.cells();
    match spatial {
        SpatialData::Dirac { position, mass } => {
            let k = solve_fpt(drift, 0, *position)?;
            Ok(k.cdf.iter().map(|v| v * mass).collect())
        }
        SpatialData::Density(f) => {
            let near = 2.0 * drift.step.sqrt();
            let weights: Vec<(f64, f64)> = f
                .nodes()
                .zip(&f.values)
                .enumerate()
                .filter(|(_, (x, q))| *x > 0.0 && **q > 0.0)
                .map(|(j, (x, q))| {
                    let w = if j == 0 || j + 1 == f.len() { 0.5 } else { 1.0 };
                    (x, w * q * f.step)
                })
                .collect();
            let columns: Vec<Vec<f64>> = crate::par_map(weights, |(x, w)| -> Result<Vec<f64>, SolveError> {
                if x >= near {
                    Ok(solve_fpt(drift, 0, x)?.cdf.iter().map(|v| v * w).collect())
                } else {
                    // too close to the boundary for the quadrature; average drift is exact to first order
                    Ok((0..=n)
                        .map(|i| {
                            let s = i as f64 * drift.step;
                            let mu = if i == 0 { 0.0 } else { drift.integral[i] / s };
                            w * constant_drift_cdf(s, x, mu)
                        })
                        .collect())
                }
            })
            .into_iter()
            .collect::<Result<_, _>>()?;
            let mut total = vec![0.0; n + 1];
            for c in columns {
                for (t, v) in total.iter_mut().zip(c) {
                    *t += v;
                }
            }
            Ok(total)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitRule {
    /// Exit once the cumulative rate has caught up with the clock.
    Physical,
    /// Exit at the first return of the boundary rate below `1/λ2`.
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlowupRecord {
    /// Last clock node before the excess rises.
    pub trigger: f64,
    /// Clock time of the exit, `None` if the episode outlasts the run.
    pub exit: Option<f64>,
    /// Original time of the episode, `Ψ(trigger)`.
    pub time: f64,
    /// `(exit - trigger) / λ2`.
    pub size: Option<f64>,
    /// Size predicted from the trigger slice by the killed-Brownian formula;
    /// only for unbuffered runs.
    pub predicted_size: Option<f64>,
    /// The predicted size is zero because the formula has no positive root on the scan grid.
    pub degenerate: bool,
}

/// Blowup episodes of a solved state.
pub fn detect_blowups(state: &TimeChangeState, rule: ExitRule) -> Result<Vec<BlowupRecord>, SolveError> {
    let p = &state.params;
    let d = &state.excess.values;
    let g = &state.cumulative.values;
    let r = &state.rate.values;
    let ds = state.psi.step;
    let tol = state.numerics.tol_e;
    let level = p.excess_level();
    let mut out = Vec::new();
    let mut i = 0;
    while i < d.len() {
        if d[i] <= tol {
            i += 1;
            continue;
        }
        let s = i.saturating_sub(1);
        let mut j = i;
        while j < d.len() && d[j] > tol {
            j += 1;
        }
        if j == i + 1 && j < d.len() && i > 0 {
            // rise and fall inside one cell: below resolution
            i = j;
            continue;
        }
        let exit = match rule {
            ExitRule::Physical => {
                let f = |k: usize| d[s] + (g[k] - g[s]) - (k - s) as f64 * ds * level;
                (s + 1..d.len()).find(|&k| f(k) <= 0.0).map(|k| {
                    let (fa, fb) = (f(k - 1), f(k));
                    let w = if fa > fb { fa / (fa - fb) } else { 1.0 };
                    ((k - 1) as f64 + w.clamp(0.0, 1.0)) * ds
                })
            }
            ExitRule::Naive => {
                let thr = p.rate_threshold();
                let found = (s + 2..r.len()).find(|&k| r[k] <= thr && r[k - 1] > thr).map(|k| {
                    let (fa, fb) = (r[k - 1] - thr, r[k] - thr);
                    let w = fa / (fa - fb);
                    ((k - 1) as f64 + w) * ds
                });
                if found.is_none() {
                    return Err(SolveError::EternalBlowup(s as f64 * ds));
                }
                found
            }
        };
        let trigger = s as f64 * ds;
        let full = p.buffer == 0.0;
        let (predicted_size, degenerate) = match state.trigger_slices.iter().find(|t| full && t.index == s) {
            Some(slice) => {
                let (size, degenerate) = blowup_size(&slice.density, &state.space, p, ds);
                (Some(size), degenerate)
            }
            None => (None, false),
        };
        out.push(BlowupRecord {
            trigger,
            exit,
            time: state.psi.values[s],
            size: exit.map(|u| (u - trigger) / p.diffusion_coupling),
            predicted_size,
            degenerate,
        });
        i = j.max(i + 1);
    }
    Ok(out)
}

/// Size of a full blowup from the density at its trigger:
/// `J = inf { P > 0 : P ≥ ∫ H(λ2 P, x) q(x) dx }`, `H` the passage CDF at drift
/// `λ1/λ2`. The scan uses steps of one clock cell in `λ2 P`; returns
/// `(0, true)` when the first scan point already satisfies the inequality.
pub fn blowup_size(density: &[f64], space: &SpaceGrid, p: &ModelParams, dsigma: f64) -> (f64, bool) {
    let mu = p.blowup_drift();
    let lambda2 = p.diffusion_coupling;
    let cells: Vec<(f64, f64)> = density
        .iter()
        .enumerate()
        .filter(|(_, &q)| q != 0.0)
        .map(|(k, &q)| (space.center(k), q * space.dx))
        .collect();
    let gap = |size: f64| -> f64 {
        let s = lambda2 * size;
        let reach = mu * s + 12.0 * s.sqrt();
        size - cells
            .iter()
            .take_while(|(x, _)| *x <= reach)
            .map(|(x, w)| w * constant_drift_cdf(s, *x, mu))
            .sum::<f64>()
    };
    let step = dsigma / lambda2;
    if gap(step) >= 0.0 {
        return (0.0, true);
    }
    let mut lo = step;
    let mut hi = 2.0 * step;
    while gap(hi) < 0.0 {
        lo = hi;
        hi += step;
        if hi > 1.0 + step {
            return (1.0, false);
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi), false)
}

/// Changed-clock solution read in original time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OriginalSolution {
    pub step: f64,
    pub times: Vec<f64>,
    /// Clock position `Φ(t)`, right-continuous.
    pub clock: Vec<f64>,
    pub cumulative: Vec<f64>,
    /// Output rate `g/Ψ'` at `Φ(t)`.
    pub rate: Vec<f64>,
    pub excess: Vec<f64>,
    /// Mass of the active population.
    pub active_mass: Vec<f64>,
    /// `∫ (1 - P_ε(t - u)) dF(u)`: mass of the refractory population.
    pub refractory_mass: Vec<f64>,
}

impl OriginalSolution {
    pub fn conservation_residual(&self) -> Vec<f64> {
        self.active_mass.iter().zip(&self.refractory_mass).map(|(a, r)| a + r - 1.0).collect()
    }

    pub fn cumulative_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return self.cumulative[0];
        }
        let i = k - 1;
        if i + 1 >= self.times.len() {
            return self.cumulative[i];
        }
        // F is right-continuous and jumps between samples only at blowups
        let w = (t - self.times[i]) / self.step;
        self.cumulative[i] * (1.0 - w) + self.cumulative[i + 1] * w
    }
}

/// Maps a solved state back to original time on a uniform grid of step `dt`.
pub fn to_original_time(state: &TimeChangeState, dt: f64) -> OriginalSolution {
    let psi = &state.psi;
    let ds = psi.step;
    let n = psi.len() - 1;
    let t_end = psi.values[n];
    let count = (t_end / dt + 1e-9).floor() as usize;
    let horizon = state.delay.tail_horizon(1e-12);
    // Trapezoid weights in P, so that with the midpoint-G sum of the delayed
    // rate the two add up to G by summation by parts.
    let survival = |t: f64, a: f64, b: f64| 1.0 - 0.5 * (state.delay.cdf(t - a) + state.delay.cdf(t - b));
    // Evaluated at clock nodes and interpolated like the active mass.
    let refractory_node = |i: usize| -> f64 {
        let pv = &psi.values;
        let gv = &state.cumulative.values;
        let t = pv[i];
        let lo = pv[..=i].partition_point(|&v| v < t - horizon).saturating_sub(1);
        let mut total = 0.0;
        for j in lo..i {
            total += survival(t, pv[j], pv[j + 1]) * (gv[j + 1] - gv[j]);
        }
        if let Some(h) = &state.initial.history {
            let (hp, hc) = (&h.psi.values, &h.cumulative.values);
            for j in 0..hp.len() - 1 {
                if t - hp[j + 1] > horizon {
                    continue;
                }
                total += survival(t, hp[j], hp[j + 1]) * (hc[j + 1] - hc[j]);
            }
        }
        total
    };
    let refractory = |sigma: f64| -> f64 {
        let i = ((sigma / ds).floor() as usize).min(n - 1);
        let w = (sigma / ds - i as f64).clamp(0.0, 1.0);
        let left = refractory_node(i);
        if w == 0.0 {
            left
        } else {
            left * (1.0 - w) + refractory_node(i + 1) * w
        }
    };
    let mut out = OriginalSolution {
        step: dt,
        times: Vec::with_capacity(count + 1),
        clock: Vec::with_capacity(count + 1),
        cumulative: Vec::with_capacity(count + 1),
        rate: Vec::with_capacity(count + 1),
        excess: Vec::with_capacity(count + 1),
        active_mass: Vec::with_capacity(count + 1),
        refractory_mass: Vec::with_capacity(count + 1),
    };
    for k in 0..=count {
        let t = k as f64 * dt;
        let sigma = right_inverse(psi, t).min(psi.end());
        let cell = ((sigma / ds).floor() as usize).min(n - 1);
        let slope = (psi.values[cell + 1] - psi.values[cell]) / ds;
        let g = state.rate.eval(sigma);
        out.times.push(t);
        out.clock.push(sigma);
        out.cumulative.push(state.cumulative.eval(sigma) - state.initial.initial_excess);
        out.rate.push(if slope > 0.0 { g / slope } else { f64::INFINITY });
        out.excess.push(state.excess.eval(sigma));
        out.active_mass.push(state.mass.eval(sigma) + state.outflow.eval(sigma));
        out.refractory_mass.push(refractory(sigma));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepEntry {
    pub delta: f64,
    pub psi_distance: f64,
    pub cumulative_distance: f64,
    /// Sup distance between the excess and the reservoir of the buffered boundary rate.
    pub persistence_error: f64,
    pub blowups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub entries: Vec<SweepEntry>,
    /// Persistence error of the unbuffered run.
    pub baseline_persistence_error: f64,
    /// Sup distance between the unbuffered run and the same run on a grid twice as coarse.
    pub grid_error: f64,
    pub monotone: bool,
}

/// Reservoir of the boundary rate above the excess level, compared with the excess.
pub fn persistence_error(state: &TimeChangeState) -> Result<f64, SolveError> {
    let spec = BufferSpec::threshold(state.params.excess_level())?;
    let sol = solve_buffer(&spec, &state.rate, state.excess.values[0])?;
    Ok(sol
        .excess
        .iter()
        .zip(&state.excess.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Solves at each buffer level and at zero, and compares.
pub fn delta_sweep(
    p: &ModelParams,
    ic: &InitialCondition,
    delay: &DelayDistribution,
    deltas: &[f64],
    num: &Numerics,
) -> Result<SweepReport, SolveError> {
    if deltas.windows(2).any(|w| w[1] >= w[0]) || deltas.iter().any(|&d| !(d > 0.0)) {
        return Err(SolveError::InvalidNumerics("buffer levels must be positive and strictly decreasing".into()));
    }
    let mut jobs: Vec<(f64, Numerics)> = deltas.iter().map(|&d| (d, *num)).collect();
    jobs.push((0.0, *num));
    let coarse = Numerics {
        dsigma: 2.0 * num.dsigma,
        dx: Some(2.0 * num.space_step(p)),
        ..*num
    };
    jobs.push((0.0, coarse));
    let states: Vec<TimeChangeState> = crate::par_map(jobs, |(d, nm)| -> Result<TimeChangeState, SolveError> {
        solve_fixed_point(&p.with_buffer(d)?, ic, delay, &nm)
    })
    .into_iter()
    .collect::<Result<_, _>>()?;
    let m = deltas.len();
    let base = &states[m];
    let coarse_state = &states[m + 1];
    let grid_error = coarse_state.psi.sup_distance_interp(&base.psi);
    let mut entries = Vec::with_capacity(m);
    for (k, &delta) in deltas.iter().enumerate() {
        let s = &states[k];
        entries.push(SweepEntry {
            delta,
            psi_distance: s.psi.sup_distance(&base.psi),
            cumulative_distance: s.cumulative.sup_distance(&base.cumulative),
            persistence_error: persistence_error(s)?,
            blowups: detect_blowups(s, ExitRule::Physical)?.len(),
        });
    }
    let monotone = entries.windows(2).all(|w| w[1].psi_distance <= w[0].psi_distance);
    Ok(SweepReport {
        baseline_persistence_error: persistence_error(base)?,
        grid_error,
        monotone,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_params, RawParams};

    fn params(lambda: f64, reset: f64, eps: f64) -> ModelParams {
        validate_params(RawParams {
            drift_rate: 1.0,
            diffusion_rate: 1.0,
            drift_coupling: lambda,
            diffusion_coupling: lambda,
            reset_position: reset,
            min_delay: eps,
            buffer: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn psi_map_examples() {
        let p = params(1.0, 1.0, 0.1);
        let zero = GridFunction::new(0.0, 0.01, vec![0.0; 101]);
        let id = GridFunction::sample(0.0, 0.01, 100, |s| s);
        assert!(apply_psi_map(&zero, &p).sup_distance(&id) < 1e-15);
        let critical = GridFunction::sample(0.0, 0.01, 100, |s| s);
        assert!(apply_psi_map(&critical, &p).values.iter().all(|&v| v.abs() < 1e-15));
        let quad = GridFunction::sample(0.0, 0.01, 200, |s| s * s / 2.0);
        let want = GridFunction::sample(0.0, 0.01, 200, |s| if s <= 1.0 { s - s * s / 2.0 } else { 0.5 });
        assert!(apply_psi_map(&quad, &p).sup_distance(&want) < 1e-12);
    }

    #[test]
    fn pure_deposit_step() {
        let grid = SpaceGrid::new(0.01, 3.0);
        let (q, _) = evolve_density(&vec![0.0; grid.cells], grid, 1.0, 1e-12, 0.3, 1.0);
        assert!((grid.mass(&q) - 0.3).abs() < 1e-9);
        let peak = q.iter().cloned().fold(0.0, f64::max);
        let k = q.iter().position(|&v| v == peak).unwrap();
        assert!((grid.center(k) - 1.0).abs() <= grid.dx);
    }

    #[test]
    fn discrete_conservation_without_source() {
        let grid = SpaceGrid::new(0.01, 4.0);
        let q0 = initial_slice(&grid, &SpatialData::Dirac { position: 0.5, mass: 1.0 });
        for scheme in [TimeScheme::BackwardEuler, TimeScheme::Bdf2] {
            let mut st = DensityStepper::new(grid, q0.clone(), 1.0, scheme);
            let mut lost = 0.0;
            for _ in 0..500 {
                let out = st.step(0.0, 1e-3, 0.0);
                lost += out.flux + out.outflow;
            }
            assert!((st.mass() + lost - 1.0).abs() < 1e-8, "{scheme:?}");
        }
    }

    #[test]
    fn empty_history_no_reset_before_min_delay() {
        let p = params(0.5, 1.0, 0.2);
        let delay = DelayDistribution::default_for(0.2);
        let ic = InitialCondition::dirac(1.0);
        let ti = map_initial_to_timechange(&ic, &p, 1e-3).unwrap();
        let psi = GridFunction::sample(0.0, 1e-3, 150, |s| s);
        let cum = GridFunction::sample(0.0, 1e-3, 150, |s| s * s);
        assert_eq!(reset_rate(&cum, &psi, &ti, &delay, 0.15), 0.0);
    }
}
