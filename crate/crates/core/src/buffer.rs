//! Rate-conserving buffer: an input rate `z` feeds an explosive map `K` until
//! it crosses `z*`, where `K(z*) = L(z*) = 1/δ`. Above the crossing the output
//! switches to the stable map `L` and the surplus `L(z) - 1/δ` is stored in an
//! excess reservoir `E`, which is drained again before `K` takes over.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::grid::GridFunction;
use crate::model::ModelParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("input {z} reaches the pole {pole} of the explosive map at t = {t}")]
    ExplosiveInput { t: f64, z: f64, pole: f64 },
    #[error("invalid buffer specification: {0}")]
    InvalidSpec(String),
}

type RateMap = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct BufferSpec {
    explosive: RateMap,
    stable: RateMap,
    /// Pole of the explosive map.
    pub pole: f64,
    /// Buffer level `δ`; the buffered output rate is `1/δ`.
    pub level: f64,
    /// Input rate `z*` where both maps equal `1/δ`.
    pub crossing: f64,
}

impl fmt::Debug for BufferSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BufferSpec")
            .field("pole", &self.pole)
            .field("level", &self.level)
            .field("crossing", &self.crossing)
            .finish()
    }
}

impl BufferSpec {
    /// General buffer; the crossing point is located by bisection on `L(z) = 1/δ`.
    pub fn new(
        explosive: impl Fn(f64) -> f64 + Send + Sync + 'static,
        stable: impl Fn(f64) -> f64 + Send + Sync + 'static,
        pole: f64,
        level: f64,
    ) -> Result<Self, BufferError> {
        if !(level > 0.0) {
            return Err(BufferError::InvalidSpec(format!("level {level} must be positive")));
        }
        let target = 1.0 / level;
        let mut hi = if pole.is_finite() { pole } else { 1.0 };
        while !pole.is_finite() && stable(hi) < target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        if stable(hi) < target {
            return Err(BufferError::InvalidSpec("stable map never reaches 1/level".into()));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if stable(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self {
            explosive: Arc::new(explosive),
            stable: Arc::new(stable),
            pole,
            level,
            crossing: 0.5 * (lo + hi),
        })
    }

    /// The buffer acting on the time-changed rate of the mean-field model:
    /// `K(z) = ν2 z / (1 - λ2 z)` and `L(z) = z / δ2`.
    pub fn mean_field(p: &ModelParams) -> Result<Self, BufferError> {
        if !(p.buffer > 0.0) {
            return Err(BufferError::InvalidSpec("buffer level must be positive".into()));
        }
        let (nu2, lambda2, slope) = (p.diffusion_rate, p.diffusion_coupling, p.buffered_slope);
        Ok(Self {
            explosive: Arc::new(move |z| nu2 * z / (1.0 - lambda2 * z)),
            stable: Arc::new(move |z| z / slope),
            pole: 1.0 / lambda2,
            level: p.buffer,
            crossing: p.crossing_rate,
        })
    }

    /// Both maps equal to the identity; the reservoir collects the input above `rate`.
    pub fn threshold(rate: f64) -> Result<Self, BufferError> {
        if !(rate > 0.0) {
            return Err(BufferError::InvalidSpec(format!("rate {rate} must be positive")));
        }
        Ok(Self {
            explosive: Arc::new(|z| z),
            stable: Arc::new(|z| z),
            pole: f64::INFINITY,
            level: 1.0 / rate,
            crossing: rate,
        })
    }

    pub fn explosive(&self, z: f64) -> f64 {
        (self.explosive)(z)
    }

    pub fn stable(&self, z: f64) -> f64 {
        (self.stable)(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Episode {
    pub start: f64,
    /// `None` while the reservoir is still nonempty at the end of the input.
    pub end: Option<f64>,
    /// Output jump at the exit, `K(z) - L(z)`.
    pub exit_jump: Option<f64>,
    /// Exit with a jump below tolerance: a touch that the grid cannot tell from a crossing.
    pub tangential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferSolution {
    pub start: f64,
    pub step: f64,
    pub input: Vec<f64>,
    /// Output rate, right-continuous at nodes.
    pub theta: Vec<f64>,
    pub active: Vec<bool>,
    pub excess: Vec<f64>,
    /// `E0 + ∫ theta`.
    pub cumulative: Vec<f64>,
    pub episodes: Vec<Episode>,
}

impl BufferSolution {
    pub fn excess_function(&self) -> GridFunction {
        GridFunction::new(self.start, self.step, self.excess.clone())
    }

    pub fn cumulative_function(&self) -> GridFunction {
        GridFunction::new(self.start, self.step, self.cumulative.clone())
    }

    /// `∫ ((1 - B) theta + B / δ)`, the cumulative buffered output.
    pub fn buffered_cumulative(&self) -> Vec<f64> {
        self.cumulative.iter().zip(&self.excess).map(|(c, e)| c - e).collect()
    }
}

/// Solves the buffer problem for a piecewise-linear input.
///
/// Threshold crossings and reservoir exhaustion are located inside each cell:
/// `z` is linear there, and the reservoir is integrated against the linear
/// interpolant of `L(z)`, which is exact whenever `L` is linear.
pub fn solve_buffer(spec: &BufferSpec, z: &GridFunction, initial_excess: f64) -> Result<BufferSolution, BufferError> {
    let n = z.len();
    let h = z.step;
    let cap = 1.0 / spec.level;
    let tiny = 1e-12 * h;
    let zv = &z.values;
    let mut theta = Vec::with_capacity(n);
    let mut active = Vec::with_capacity(n);
    let mut excess = Vec::with_capacity(n);
    let mut cumulative = Vec::with_capacity(n);
    let mut episodes: Vec<Episode> = Vec::new();

    let mut e = initial_excess.max(0.0);
    let mut on = e > 0.0 || zv.first().is_some_and(|&z0| z0 > spec.crossing);
    if on {
        episodes.push(Episode { start: z.start, end: None, exit_jump: None, tangential: false });
    }
    let mut big_theta = initial_excess;
    let check_pole = |t: f64, v: f64| -> Result<(), BufferError> {
        if v >= spec.pole {
            Err(BufferError::ExplosiveInput { t, z: v, pole: spec.pole })
        } else {
            Ok(())
        }
    };
    if let Some(&z0) = zv.first() {
        if !on {
            check_pole(z.start, z0)?;
        }
        theta.push(if on { spec.stable(z0) } else { spec.explosive(z0) });
        active.push(on);
        excess.push(e);
        cumulative.push(big_theta);
    }

    for i in 1..n {
        let t0 = z.node(i - 1);
        let (z0, z1) = (zv[i - 1], zv[i]);
        let z_at = |s: f64| z0 + (z1 - z0) * s / h;
        let mut s = 0.0;
        while s < h {
            if on {
                let (la, lb) = (spec.stable(z_at(s)), spec.stable(z1));
                let span = h - s;
                let alpha = if e == 0.0 { (la - cap).max(0.0) } else { la - cap };
                let beta = (lb - la) / span;
                match first_exhaustion(e, alpha, beta, span, tiny) {
                    Some(v) => {
                        let zv_exit = z_at(s + v);
                        big_theta += v * (la + 0.5 * beta * v);
                        e = 0.0;
                        on = false;
                        let jump = spec.explosive(zv_exit) - spec.stable(zv_exit);
                        if let Some(ep) = episodes.last_mut() {
                            ep.end = Some(t0 + s + v);
                            ep.exit_jump = Some(jump);
                            ep.tangential = jump.abs() <= 1e-9 * cap;
                        }
                        check_pole(t0 + s + v, zv_exit)?;
                        s += v;
                    }
                    None => {
                        big_theta += span * 0.5 * (la + lb);
                        e = (e + span * (alpha + 0.5 * beta * span)).max(0.0);
                        s = h;
                    }
                }
            } else {
                let zs = z_at(s);
                let s_on = if zs > spec.crossing {
                    Some(s)
                } else if z1 > spec.crossing {
                    Some(((spec.crossing - z0) / (z1 - z0) * h).clamp(s, h))
                } else {
                    None
                };
                let s_end = s_on.unwrap_or(h);
                check_pole(t0 + s_end, z_at(s_end).max(zs))?;
                big_theta += simpson(|u| spec.explosive(z_at(u)), s, s_end);
                s = s_end;
                if let Some(s_on) = s_on {
                    if s_on < h {
                        on = true;
                        episodes.push(Episode { start: t0 + s_on, end: None, exit_jump: None, tangential: false });
                    }
                }
            }
        }
        theta.push(if on { spec.stable(z1) } else { spec.explosive(z1) });
        active.push(on);
        excess.push(e);
        cumulative.push(big_theta);
    }

    Ok(BufferSolution {
        start: z.start,
        step: h,
        input: zv.clone(),
        theta,
        active,
        excess,
        cumulative,
        episodes,
    })
}

/// Smallest `v` in `(tiny, span]` where `e + alpha v + beta v²/2` reaches 0.
fn first_exhaustion(e: f64, alpha: f64, beta: f64, span: f64, tiny: f64) -> Option<f64> {
    let at = |v: f64| e + v * (alpha + 0.5 * beta * v);
    if at(span) > 0.0 {
        // the quadratic may still dip below zero inside the cell
        if beta <= 0.0 {
            return None;
        }
        let vmin = -alpha / beta;
        if !(vmin > tiny && vmin < span && at(vmin) <= 0.0) {
            return None;
        }
    }
    let roots = quadratic_roots(0.5 * beta, alpha, e);
    roots.into_iter().flatten().filter(|&v| v > tiny && v <= span * (1.0 + 1e-12)).fold(None, |best: Option<f64>, v| {
        Some(best.map_or(v, |b| b.min(v)))
    }).map(|v| v.min(span))
}

fn quadratic_roots(a: f64, b: f64, c: f64) -> [Option<f64>; 2] {
    if a.abs() < 1e-300 || (a * c).abs() < 1e-16 * b * b {
        if b == 0.0 {
            return [None, None];
        }
        // nearly linear: refine the small root
        let r = -c / b;
        let r = if a != 0.0 { -c / (b + a * r) } else { r };
        let other = if a != 0.0 { Some(-b / a - r) } else { None };
        return [Some(r), other];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return [None, None];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let r1 = q / a;
    let r2 = if q != 0.0 { c / q } else { r1 };
    [Some(r1), Some(r2)]
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
}

/// `t/δ + [inf_{s ≤ t} (Θ(s) - s/δ)]₋`, from a single running-minimum pass.
pub fn buffered_cumulative(theta_cum: &GridFunction, level: f64, initial_excess: f64) -> GridFunction {
    let mut running = initial_excess;
    let values = theta_cum
        .nodes()
        .zip(&theta_cum.values)
        .map(|(t, &v)| {
            let s = t - theta_cum.start;
            running = running.min(v - s / level);
            s / level + running.min(0.0)
        })
        .collect();
    GridFunction::new(theta_cum.start, theta_cum.step, values)
}

/// `δσ + [sup_{τ ≤ σ} (Γ(τ) - δτ)]₊`, from a single running-maximum pass.
pub fn inverse_extrema(gamma: &GridFunction, level: f64) -> GridFunction {
    let mut running = f64::NEG_INFINITY;
    let values = gamma
        .nodes()
        .zip(&gamma.values)
        .map(|(s, &v)| {
            let s = s - gamma.start;
            running = running.max(v - level * s);
            level * s + running.max(0.0)
        })
        .collect();
    GridFunction::new(gamma.start, gamma.step, values)
}

/// Maximal intervals where `E > tol`. Starts are the last node at or below
/// `tol`; ends are refined by linear interpolation to the zero of `E`.
pub fn blowup_intervals(excess: &GridFunction, tol: f64) -> Vec<Episode> {
    let v = &excess.values;
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        if v[i] > tol {
            let start = if i == 0 { excess.start } else { excess.node(i - 1) };
            let mut j = i;
            while j < v.len() && v[j] > tol {
                j += 1;
            }
            let end = (j < v.len()).then(|| {
                let (a, b) = (v[j - 1], v[j]);
                let w = if a > b { a / (a - b) } else { 1.0 };
                excess.node(j - 1) + w.clamp(0.0, 1.0) * excess.step
            });
            out.push(Episode { start, end, exit_jump: None, tangential: false });
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_params, RawParams};

    fn spec(delta: f64) -> BufferSpec {
        let p = validate_params(RawParams {
            drift_rate: 1.0,
            diffusion_rate: 1.0,
            drift_coupling: 1.0,
            diffusion_coupling: 1.0,
            reset_position: 1.0,
            min_delay: 0.1,
            buffer: delta,
        })
        .unwrap();
        BufferSpec::mean_field(&p).unwrap()
    }

    #[test]
    fn general_constructor_finds_crossing() {
        let s = BufferSpec::new(|z| z / (1.0 - z), |z| 3.0 * z, 1.0, 0.5).unwrap();
        assert!((s.crossing - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.explosive(s.crossing) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn subthreshold_input_is_passed_through_k() {
        let b = spec(0.5);
        let zs = b.crossing / 2.0;
        let z = GridFunction::new(0.0, 0.01, vec![zs; 101]);
        let sol = solve_buffer(&b, &z, 0.0).unwrap();
        assert!(sol.episodes.is_empty());
        assert!(sol.excess.iter().all(|&e| e == 0.0));
        assert!(sol.theta.iter().all(|&t| (t - b.explosive(zs)).abs() < 1e-15));
    }

    #[test]
    fn two_phase_input() {
        let delta = 0.5;
        let b = spec(delta);
        let h = 1e-4;
        let z = GridFunction::sample(0.0, h, 50_000, |t| if t <= 1.0 { 2.0 * b.crossing } else { 0.5 * b.crossing });
        let sol = solve_buffer(&b, &z, 0.0).unwrap();
        assert_eq!(sol.episodes.len(), 1);
        let ep = sol.episodes[0];
        assert_eq!(ep.start, 0.0);
        assert!((ep.end.unwrap() - 3.0).abs() < 1e-3, "{ep:?}");
        assert!((sol.excess[10_000] - 1.0 / delta).abs() < 1e-3);
        assert!(ep.exit_jump.unwrap() < 0.0);
        let zl = 0.5 * b.crossing;
        assert!((ep.exit_jump.unwrap() - (b.explosive(zl) - 1.0 / (2.0 * delta))).abs() < 1e-9);
    }

    #[test]
    fn initial_excess_drains_linearly() {
        let delta = 0.5;
        let b = spec(delta);
        let z = GridFunction::new(0.0, 0.01, vec![0.0; 201]);
        let sol = solve_buffer(&b, &z, 1.5).unwrap();
        let ep = sol.episodes[0];
        assert_eq!(ep.start, 0.0);
        assert!((ep.end.unwrap() - delta * 1.5).abs() < 1e-12);
        assert!((sol.excess[50] - (1.5 - 0.5 / delta)).abs() < 1e-12);
        assert!(sol.theta[..75].iter().all(|&t| t == 0.0));
    }

    #[test]
    fn pole_outside_episode_is_explosive() {
        let p = validate_params(RawParams {
            drift_rate: 1.0,
            diffusion_rate: 1.0,
            drift_coupling: 1.0,
            diffusion_coupling: 1.0,
            reset_position: 1.0,
            min_delay: 0.1,
            buffer: 0.5,
        })
        .unwrap();
        let b = BufferSpec { crossing: 2.0, ..BufferSpec::mean_field(&p).unwrap() };
        let z = GridFunction::new(0.0, 0.1, vec![0.5, 1.2]);
        assert!(matches!(solve_buffer(&b, &z, 0.0), Err(BufferError::ExplosiveInput { .. })));
    }

    #[test]
    fn running_extrema_examples() {
        let delta = 0.25;
        let half = GridFunction::sample(0.0, 0.01, 100, |t| t / (2.0 * delta));
        assert!(buffered_cumulative(&half, delta, 0.0).sup_distance(&half) < 1e-12);
        let steep = GridFunction::sample(0.0, 0.01, 100, |s| 2.0 * delta * s);
        assert!(inverse_extrema(&steep, delta).sup_distance(&steep) < 1e-12);
        let shallow = GridFunction::sample(0.0, 0.01, 100, |s| 0.5 * delta * s);
        let want = GridFunction::sample(0.0, 0.01, 100, |s| delta * s);
        assert!(inverse_extrema(&shallow, delta).sup_distance(&want) < 1e-12);
    }

    #[test]
    fn intervals_from_excess() {
        let e = GridFunction::new(0.0, 1.0, vec![0.0; 5]);
        assert!(blowup_intervals(&e, 1e-10).is_empty());
        let e = GridFunction::new(0.0, 1.0, vec![1.0, 0.5, 0.0, 0.0, 2.0, 1.0]);
        let eps = blowup_intervals(&e, 1e-10);
        assert_eq!(eps.len(), 2);
        assert_eq!(eps[0].start, 0.0);
        assert_eq!(eps[0].end, Some(2.0));
        assert_eq!(eps[1].start, 3.0);
        assert_eq!(eps[1].end, None);
    }
}
