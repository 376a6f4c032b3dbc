//! Finite interacting particle system.
//!
//! `K` particles diffuse toward 0 with drift `ν1` and variance rate `ν2`. A
//! particle reaching 0 spikes, stays refractory for a delay drawn from the
//! delay law, then restarts at `Λ`. Each spike kicks every other active
//! particle by an independent `N(λ1/K, λ2/K)` step toward 0; particles pushed
//! to 0 spike in the same instant as a new generation of the avalanche.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::grid::GridFunction;
use crate::model::{DelayDistribution, InitialCondition, ModelParams, SpatialData};
use crate::timechange::OriginalSolution;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticleError {
    #[error("particle count must be at least 1")]
    NoParticles,
    #[error("horizon {0} must be positive")]
    InvalidHorizon(f64),
    #[error("time step {0} must be positive")]
    InvalidStep(f64),
    #[error("no replicas to compare")]
    NoReplicas,
    #[error("mean-field solution ends at {end}, before the horizon {horizon}")]
    ShortMeanField { end: f64, horizon: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Status {
    Active,
    Refractory { reset_time: f64 },
}

/// Running sums of the kicks received, per unit kick.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct KickStats {
    /// Number of individual spike-to-particle kicks.
    pub count: u64,
    pub sum: f64,
    /// Sum of squared deviations of aggregated kicks from their mean.
    pub sum_sq_dev: f64,
}

impl KickStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Variance of a single kick.
    pub fn variance(&self) -> f64 {
        self.sum_sq_dev / self.count as f64
    }
}

#[derive(Debug, Clone)]
pub struct ParticleState {
    /// Positions of active particles; meaningless for refractory ones.
    pub positions: Vec<f64>,
    pub status: Vec<Status>,
    pub clock: f64,
    pub rng: ChaCha8Rng,
    pub kicks: KickStats,
}

impl ParticleState {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_active(&self, i: usize) -> bool {
        matches!(self.status[i], Status::Active)
    }

    /// Draws starting positions from `ic`: a fraction equal to the active
    /// mass starts from the spatial data, the rest is refractory with reset
    /// times drawn from the history and the delay law.
    pub fn from_initial(
        ic: &InitialCondition,
        k: usize,
        delay: &DelayDistribution,
        mut rng: ChaCha8Rng,
    ) -> Self {
        let active = ((ic.spatial.mass() * k as f64).round() as usize).min(k);
        let mut positions = vec![0.0; k];
        let mut status = vec![Status::Active; k];
        for x in positions.iter_mut().take(active) {
            *x = match &ic.spatial {
                SpatialData::Dirac { position, .. } => *position,
                SpatialData::Density(f) => sample_density(f, &mut rng),
            };
        }
        for s in status.iter_mut().skip(active) {
            *s = Status::Refractory { reset_time: sample_pending_reset(ic, delay, &mut rng) };
        }
        Self { positions, status, clock: 0.0, rng, kicks: KickStats::default() }
    }
}

fn sample_density(f: &GridFunction, rng: &mut ChaCha8Rng) -> f64 {
    // inverse CDF of the piecewise linear density, exact within each cell
    let mut cum = Vec::with_capacity(f.len());
    cum.push(0.0);
    for w in f.values.windows(2) {
        let last = *cum.last().unwrap();
        cum.push(last + 0.5 * (w[0].max(0.0) + w[1].max(0.0)) * f.step);
    }
    let total = *cum.last().unwrap();
    let u = rng.random::<f64>() * total;
    let j = cum.partition_point(|&c| c <= u).clamp(1, f.len() - 1) - 1;
    let (a, b) = (f.values[j].max(0.0), f.values[j + 1].max(0.0));
    let r = u - cum[j];
    let h = f.step;
    let slope = (b - a) / h;
    let dx = if slope.abs() < 1e-14 * a.max(1e-300) {
        if a > 0.0 { r / a } else { 0.5 * h }
    } else {
        (-a + (a * a + 2.0 * slope * r).max(0.0).sqrt()) / slope
    };
    (f.node(j) + dx.clamp(0.0, h)).max(f64::MIN_POSITIVE)
}

// Last spike from the history rate, delay conditioned on ending after time 0.
fn sample_pending_reset(ic: &InitialCondition, delay: &DelayDistribution, rng: &mut ChaCha8Rng) -> f64 {
    let spike = match &ic.history {
        Some(h) if h.values.last().copied().unwrap_or(0.0) > h.values[0] => {
            let total = h.values[h.len() - 1] - h.values[0];
            let u = h.values[0] + rng.random::<f64>() * total;
            let j = h.values.partition_point(|&c| c <= u).clamp(1, h.len() - 1) - 1;
            let span = h.values[j + 1] - h.values[j];
            let w = if span > 0.0 { (u - h.values[j]) / span } else { 0.5 };
            h.node(j) + w * h.step
        }
        _ => 0.0,
    };
    for _ in 0..100_000 {
        let r = spike + delay.sample(rng);
        if r > 0.0 {
            return r;
        }
    }
    delay.min_delay.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AvalancheRecord {
    pub time: f64,
    pub generations: Vec<usize>,
}

impl AvalancheRecord {
    pub fn size(&self) -> usize {
        self.generations.iter().sum()
    }
}

/// Resolves an avalanche at the current clock: `triggers` form generation 0,
/// each generation kicks the particles still active, those pushed to or below 0
/// form the next one. Spikers become refractory with fresh delays. Returns the
/// spikers grouped by generation.
pub fn resolve_avalanche(
    state: &mut ParticleState,
    triggers: &[usize],
    p: &ModelParams,
    delay: &DelayDistribution,
) -> Vec<Vec<usize>> {
    let k = state.len() as f64;
    let (mean, var) = (p.drift_coupling / k, p.diffusion_coupling / k);
    let mut generations: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = triggers.to_vec();
    let mut spiking = vec![false; state.len()];
    for &i in &current {
        spiking[i] = true;
    }
    while !current.is_empty() {
        let c = current.len() as f64;
        let kick = Normal::new(c * mean, (c * var).sqrt()).expect("finite kick law");
        let mut next = Vec::new();
        for j in 0..state.len() {
            if spiking[j] || !state.is_active(j) {
                continue;
            }
            let dk: f64 = kick.sample(&mut state.rng);
            state.kicks.count += current.len() as u64;
            state.kicks.sum += dk;
            state.kicks.sum_sq_dev += (dk - c * mean).powi(2);
            state.positions[j] -= dk;
            if state.positions[j] <= 0.0 {
                next.push(j);
            }
        }
        for &j in &next {
            spiking[j] = true;
        }
        generations.push(std::mem::replace(&mut current, next));
    }
    for g in &generations {
        for &i in g {
            let reset_time = state.clock + delay.sample(&mut state.rng);
            state.status[i] = Status::Refractory { reset_time };
            state.positions[i] = 0.0;
        }
    }
    generations
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleTrace {
    pub particles: usize,
    pub horizon: f64,
    pub step: f64,
    pub spike_times: Vec<Vec<f64>>,
    /// Times at which particles restarted from the reset position.
    pub reset_times: Vec<Vec<f64>>,
    pub avalanches: Vec<AvalancheRecord>,
    pub kicks: KickStats,
}

impl ParticleTrace {
    /// All spike times, sorted.
    pub fn spikes(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.spike_times.iter().flatten().copied().collect();
        all.sort_by(f64::total_cmp);
        all
    }

    /// Empirical mean cumulative spike count at `t`.
    pub fn cumulative_at(&self, t: f64) -> f64 {
        let n: usize = self.spike_times.iter().map(|s| s.partition_point(|&u| u <= t)).sum();
        n as f64 / self.particles as f64
    }

    /// Empirical mean cumulative count on a sorted time grid.
    pub fn cumulative_on(&self, times: &[f64]) -> Vec<f64> {
        let spikes = self.spikes();
        let k = self.particles as f64;
        times.iter().map(|&t| spikes.partition_point(|&u| u <= t) as f64 / k).collect()
    }

    /// Largest single-avalanche fraction of the population.
    pub fn max_avalanche_fraction(&self) -> f64 {
        self.avalanches.iter().map(|a| a.size()).max().unwrap_or(0) as f64 / self.particles as f64
    }
}

/// Random stream for `replica` under a master seed.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Euler scheme with step `dt`; crossings between grid times are caught with
/// the Brownian-bridge probability and stamped at the end of the step.
/// Crossings in the same step form one avalanche, all in generation 0.
pub fn simulate(
    p: &ModelParams,
    delay: &DelayDistribution,
    k: usize,
    ic: &InitialCondition,
    horizon: f64,
    dt: f64,
    rng: ChaCha8Rng,
) -> Result<ParticleTrace, ParticleError> {
    if k == 0 {
        return Err(ParticleError::NoParticles);
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(ParticleError::InvalidHorizon(horizon));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(ParticleError::InvalidStep(dt));
    }
    let mut state = ParticleState::from_initial(ic, k, delay, rng);
    let mut trace = ParticleTrace {
        particles: k,
        horizon,
        step: dt,
        spike_times: vec![Vec::new(); k],
        reset_times: vec![Vec::new(); k],
        avalanches: Vec::new(),
        kicks: KickStats::default(),
    };
    let (nu1, nu2) = (p.drift_rate, p.diffusion_rate);
    let steps = (horizon / dt - 1e-9).ceil() as usize;
    let mut crossed = Vec::new();
    for n in 0..steps {
        let t0 = n as f64 * dt;
        let t1 = ((n + 1) as f64 * dt).min(horizon);
        crossed.clear();
        for i in 0..k {
            let (x, span) = match state.status[i] {
                Status::Active => (state.positions[i], t1 - t0),
                Status::Refractory { reset_time } if reset_time <= t1 => {
                    state.status[i] = Status::Active;
                    trace.reset_times[i].push(reset_time);
                    (p.reset_position, t1 - reset_time.max(t0))
                }
                Status::Refractory { .. } => continue,
            };
            if span <= 0.0 {
                state.positions[i] = x;
                continue;
            }
            let var = nu2 * span;
            let z: f64 = StandardNormal.sample(&mut state.rng);
            let y = x - nu1 * span + var.sqrt() * z;
            let hit = if y <= 0.0 {
                true
            } else {
                let a = 2.0 * x * y / var;
                a < 40.0 && state.rng.random::<f64>() < (-a).exp()
            };
            state.positions[i] = if hit { 0.0 } else { y };
            if hit {
                crossed.push(i);
            }
        }
        state.clock = t1;
        if !crossed.is_empty() {
            let generations = resolve_avalanche(&mut state, &crossed, p, delay);
            for &i in generations.iter().flatten() {
                trace.spike_times[i].push(t1);
            }
            trace.avalanches.push(AvalancheRecord { time: t1, generations: generations.iter().map(Vec::len).collect() });
        }
    }
    trace.kicks = state.kicks;
    Ok(trace)
}

/// Independent replicas; replica `r` uses stream `r` of the master seed.
#[allow(clippy::too_many_arguments)]
pub fn simulate_replicas(
    p: &ModelParams,
    delay: &DelayDistribution,
    k: usize,
    ic: &InitialCondition,
    horizon: f64,
    dt: f64,
    seed: u64,
    replicas: usize,
) -> Result<Vec<ParticleTrace>, ParticleError> {
    crate::par_map((0..replicas as u64).collect(), |r| simulate(p, delay, k, ic, horizon, dt, replica_rng(seed, r)))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub particles: usize,
    pub replicas: usize,
    pub times: Vec<f64>,
    pub mean_field: Vec<f64>,
    /// Replica average of the empirical cumulative count.
    pub empirical: Vec<f64>,
    /// Standard error of the replica average.
    pub standard_error: Vec<f64>,
    pub sup_error: f64,
    /// Every time point within three standard errors of the mean-field value,
    /// widened by the resolution `1/(K R)` of the replica average.
    pub within_band: bool,
    pub max_avalanche_fraction: f64,
}

/// Compares replicated traces with the mean-field cumulative rate on `points`
/// equally spaced times in `[0, T]`.
pub fn compare_to_meanfield(
    traces: &[ParticleTrace],
    mf: &OriginalSolution,
    points: usize,
) -> Result<ComparisonReport, ParticleError> {
    let first = traces.first().ok_or(ParticleError::NoReplicas)?;
    let horizon = first.horizon;
    let end = *mf.times.last().unwrap_or(&0.0);
    if end + 1e-12 < horizon {
        return Err(ParticleError::ShortMeanField { end, horizon });
    }
    let times: Vec<f64> = (0..=points).map(|i| horizon * i as f64 / points as f64).collect();
    let paths: Vec<Vec<f64>> = traces.iter().map(|t| t.cumulative_on(&times)).collect();
    let r = traces.len() as f64;
    let mut empirical = vec![0.0; times.len()];
    let mut standard_error = vec![0.0; times.len()];
    for (j, _) in times.iter().enumerate() {
        let mean = paths.iter().map(|p| p[j]).sum::<f64>() / r;
        let var = if traces.len() > 1 {
            paths.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / (r - 1.0)
        } else {
            0.0
        };
        empirical[j] = mean;
        standard_error[j] = (var / r).sqrt();
    }
    let mean_field: Vec<f64> = times.iter().map(|&t| mf.cumulative_at(t)).collect();
    let sup_error = empirical.iter().zip(&mean_field).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    // one spike over all replicas: the resolution of the replica average
    let resolution = 1.0 / (first.particles as f64 * r);
    let within_band = empirical
        .iter()
        .zip(&mean_field)
        .zip(&standard_error)
        .all(|((a, b), s)| (a - b).abs() <= 3.0 * s + resolution);
    Ok(ComparisonReport {
        particles: first.particles,
        replicas: traces.len(),
        times,
        mean_field,
        empirical,
        standard_error,
        sup_error,
        within_band,
        max_avalanche_fraction: traces.iter().map(ParticleTrace::max_avalanche_fraction).fold(0.0, f64::max),
    })
}
