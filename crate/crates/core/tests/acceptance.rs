//! Acceptance suite: one line per criterion, nonzero exit status if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpmf::buffer::{buffered_cumulative, solve_buffer, BufferSpec};
use dpmf::fpt::{constant_drift_cdf, density_cell_bound, drift_path, solve_fpt};
use dpmf::grid::GridFunction;
use dpmf::model::{validate_params, DelayDistribution, InitialCondition, ModelParams, RawParams};
use dpmf::particles::{compare_to_meanfield, simulate_replicas};
use dpmf::timechange::{
    delta_sweep, detect_blowups, solve_fixed_point, solve_g, to_original_time, ExitRule, Numerics, RateMode,
    TimeChangeState,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn params(nu1: f64, nu2: f64, lambda1: f64, lambda2: f64, reset: f64, eps: f64, delta: f64) -> ModelParams {
    validate_params(RawParams {
        drift_rate: nu1,
        diffusion_rate: nu2,
        drift_coupling: lambda1,
        diffusion_coupling: lambda2,
        reset_position: reset,
        min_delay: eps,
        buffer: delta,
    })
    .expect("valid parameters")
}

fn sup(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(0.0, f64::max)
}

fn fpt_oracle() -> Outcome {
    let t0 = Instant::now();
    let dsigma = 1e-3;
    let mut worst: f64 = 0.0;
    // drift ratio equal to diffusion ratio: the drift is λ1/λ2 whatever the clock
    for (nu1, nu2, l1, l2) in [(1.0, 1.0, 1.0, 1.0), (0.5, 1.0, 1.0, 2.0), (4.0, 2.0, 2.0, 1.0)] {
        let p = params(nu1, nu2, l1, l2, 1.0, 0.1, 0.0);
        let psi = GridFunction::sample(0.0, dsigma, 2000, |s| 0.5 * s / nu2);
        let drift = drift_path(&psi, &p).unwrap();
        for x in [0.5, 1.0, 2.0] {
            let k = solve_fpt(&drift, 0, x).unwrap();
            let mu = l1 / l2;
            worst = worst.max(sup(k.cdf.iter().enumerate().skip(1).map(|(i, &v)| {
                (v - constant_drift_cdf(i as f64 * dsigma, x, mu)).abs()
            })));
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(10),
        format!("sup CDF error {worst:.3e} (< 1e-3), {:.2} s (< 10 s)", elapsed.as_secs_f64()),
    )
}

fn density_bound() -> Outcome {
    let dsigma = 1e-3;
    let n = 2000;
    let mut samples = 0usize;
    let mut violations = 0usize;
    let sets = [
        params(1.5, 1.0, 1.0, 1.0, 1.0, 0.1, 0.0),
        params(0.5, 1.0, 2.0, 1.0, 1.0, 0.1, 0.0),
        params(1.0, 2.0, 0.5, 1.5, 1.0, 0.1, 0.0),
    ];
    for p in &sets {
        let hi = 1.0 / p.diffusion_rate;
        let clocks = [
            GridFunction::sample(0.0, dsigma, n, |s| s * hi),
            GridFunction::new(0.0, dsigma, vec![0.0; n + 1]),
            GridFunction::sample(0.0, dsigma, n, |s| {
                // alternating fast and frozen stretches
                let period = 0.3;
                let whole = (s / period).floor();
                let frac = s - whole * period;
                hi * (whole * period * 0.5 + frac.min(0.5 * period))
            }),
        ];
        for psi in &clocks {
            let drift = drift_path(psi, p).unwrap();
            for x in [0.5, 1.0, 2.0] {
                let k = solve_fpt(&drift, 0, x).unwrap();
                for (j, &h) in k.density.iter().enumerate() {
                    let s = j as f64 * dsigma;
                    samples += 1;
                    if h > density_cell_bound(s, s + dsigma, x, p) {
                        violations += 1;
                    }
                }
            }
        }
    }
    outcome(violations == 0, format!("{violations} violations over {samples} samples"))
}

fn buffer_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let step = 1e-3;
    let mut worst_ratio: f64 = 0.0;
    let mut bad_jumps = 0usize;
    let mut exits = 0usize;
    for _ in 0..50 {
        let p = params(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.2..2.0),
            rng.random_range(0.2..2.0),
            1.0,
            1.0,
            rng.random_range(0.05..0.5),
        );
        let spec = BufferSpec::mean_field(&p).unwrap();
        let knots: Vec<f64> = (0..=20).map(|_| rng.random_range(0.0..1.5 * spec.crossing)).collect();
        let knot_fn = GridFunction::new(0.0, 0.5, knots);
        let z = GridFunction::sample(0.0, step, 10_000, |t| knot_fn.eval(t));
        let e0 = if rng.random::<bool>() { rng.random_range(0.0..0.5) } else { 0.0 };
        let sol = solve_buffer(&spec, &z, e0).unwrap();
        let reference = buffered_cumulative(&sol.cumulative_function(), spec.level, e0);
        let err = sup(sol.buffered_cumulative().iter().zip(&reference.values).map(|(a, b)| (a - b).abs()));
        worst_ratio = worst_ratio.max(err / (10.0 * step / spec.level));
        let k = |v: f64| p.explosive_rate(v);
        let l = |v: f64| p.stable_rate(v);
        let exit_cells: Vec<usize> = sol
            .episodes
            .iter()
            .filter_map(|e| e.end)
            .map(|u| ((u / step).floor() as usize).min(sol.theta.len() - 2))
            .collect();
        exits += exit_cells.len();
        for e in &sol.episodes {
            if e.exit_jump.is_some_and(|j| j > 1e-12) {
                bad_jumps += 1;
            }
        }
        for i in 0..sol.theta.len() - 1 {
            let (za, zb) = (sol.input[i], sol.input[i + 1]);
            let slack = if za.max(zb) < spec.pole { (k(zb) - k(za)).abs() } else { 0.0 } + (l(zb) - l(za)).abs() + 1e-9;
            let d = sol.theta[i + 1] - sol.theta[i];
            if d > slack || (d < -slack && !exit_cells.contains(&i)) {
                bad_jumps += 1;
            }
        }
    }
    outcome(
        worst_ratio < 1.0 && bad_jumps == 0,
        format!("sup error / (10 dt/delta) = {worst_ratio:.3e}, {bad_jumps} misplaced or positive jumps, {exits} exits"),
    )
}

fn conservation(runs: &[(&str, &TimeChangeState)]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, st) in runs {
        let o = to_original_time(st, st.numerics.output_step(&st.params));
        let r = sup(o.conservation_residual().iter().map(|v| v.abs()));
        worst = worst.max(r);
        parts.push(format!("{name} {r:.1e}"));
    }
    outcome(worst < 1e-4, format!("max residual {worst:.3e} (< 1e-4): {}", parts.join(", ")))
}

fn contraction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut ratios = 0usize;
    let floor = 1e-11;
    for _ in 0..20 {
        let reset = rng.random_range(0.5..2.0);
        let eps = rng.random_range(0.05..0.5);
        let p = params(
            rng.random_range(0.5..2.0),
            rng.random_range(0.5..2.0),
            rng.random_range(0.2..3.0),
            rng.random_range(0.2..3.0),
            reset,
            eps,
            0.0,
        );
        let delay = DelayDistribution::default_for(eps);
        let ic = InitialCondition::dirac(rng.random_range(0.1..0.5) * reset);
        let num = Numerics { max_iterations: 200, ..Numerics::with_horizon(2.0) };
        let st = solve_fixed_point(&p, &ic, &delay, &num).unwrap();
        let d = &st.windows[0].distances;
        for w in d.windows(2) {
            if w[0] > floor && w[1] > floor {
                ratios += 1;
                worst = worst.max(w[1] / w[0]);
            }
        }
    }
    outcome(worst <= 0.6 && ratios > 0, format!("max ratio {worst:.3} (<= 0.6) over {ratios} ratios above {floor:e}"))
}

fn blowup_onset(st: &TimeChangeState, elapsed: Duration) -> Outcome {
    let n = detect_blowups(st, ExitRule::Physical).unwrap().len();
    outcome(
        n >= 1 && elapsed < Duration::from_secs(60),
        format!("{n} blowups before sigma = 20, {:.2} s (< 60 s)", elapsed.as_secs_f64()),
    )
}

fn blowup_sizes(st: &TimeChangeState) -> Outcome {
    let records = detect_blowups(st, ExitRule::Physical).unwrap();
    let cells = st.numerics.dsigma / st.params.diffusion_coupling;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut ok = !records.is_empty();
    for r in &records {
        let (Some(size), Some(pred)) = (r.size, r.predicted_size) else { continue };
        checked += 1;
        worst = worst.max((size - pred).abs());
        ok &= pred <= 1.0 && size <= 1.0 + 2.0 * cells;
    }
    ok &= checked > 0 && worst < 2.0 * cells;
    outcome(ok, format!("{checked} complete episodes, max |J - (U-S)/lambda2| = {worst:.3e} (< {:.1e}), all J <= 1", 2.0 * cells))
}

fn duration_bound(st: &TimeChangeState) -> Outcome {
    let p = &st.params;
    let records = detect_blowups(st, ExitRule::Physical).unwrap();
    let bound = p.diffusion_coupling + p.diffusion_rate * p.buffer + 2.0 * st.numerics.dsigma;
    let durations: Vec<f64> = records.iter().filter_map(|r| r.exit.map(|u| u - r.trigger)).collect();
    let worst = sup(durations.iter().copied());
    let naive = match detect_blowups(st, ExitRule::Naive) {
        Ok(v) => format!("naive rule: {} episodes", v.len()),
        Err(e) => format!("naive rule: {e}"),
    };
    outcome(
        !durations.is_empty() && worst <= bound,
        format!("{} complete episodes, max U-S {worst:.4} (<= {bound:.4}); {naive}", durations.len()),
    )
}

fn sweep() -> (Outcome, Outcome, Duration) {
    let t0 = Instant::now();
    let eps = 0.01;
    let p = params(1.0, 1.0, 2.0, 2.0, 1.0, eps, 0.0);
    let delay = DelayDistribution::default_for(eps);
    let deltas: Vec<f64> = [0.2, 0.1, 0.05, 0.025].iter().map(|f| f * eps).collect();
    let rep = delta_sweep(&p, &InitialCondition::dirac(1.0), &delay, &deltas, &Numerics::with_horizon(4.0)).unwrap();
    let elapsed = t0.elapsed();
    let dists: Vec<String> = rep.entries.iter().map(|e| format!("{:.2e}", e.psi_distance)).collect();
    let last = rep.entries.last().unwrap().psi_distance;
    let recovery = outcome(
        rep.monotone && last < 5.0 * rep.grid_error && elapsed < Duration::from_secs(300),
        format!(
            "distances [{}] nonincreasing: {}, last < 5 x grid error {:.2e}, {:.1} s (< 300 s)",
            dists.join(", "),
            rep.monotone,
            rep.grid_error,
            elapsed.as_secs_f64()
        ),
    );
    let worst = rep.entries.iter().map(|e| e.persistence_error).fold(rep.baseline_persistence_error, f64::max);
    let persistence = outcome(worst < 1e-3, format!("max sup |E - D| {worst:.3e} over {} runs (< 1e-3)", deltas.len() + 1));
    (recovery, persistence, elapsed)
}

fn particle_agreement(weak: &TimeChangeState) -> Outcome {
    let t0 = Instant::now();
    let p = &weak.params;
    let mf = to_original_time(weak, 1e-3);
    let ic = InitialCondition::dirac(p.reset_position);
    let dt = weak.numerics.particle_step(p);
    let mut sups = Vec::new();
    let mut band = false;
    for k in [100, 400, 1600] {
        let traces = simulate_replicas(p, &weak.delay, k, &ic, 2.0, dt, 1, 32).unwrap();
        let rep = compare_to_meanfield(&traces, &mf, 200).unwrap();
        sups.push(rep.sup_error);
        band = rep.within_band;
    }
    let elapsed = t0.elapsed();
    let decreasing = sups.windows(2).all(|w| w[1] < w[0]);
    outcome(
        decreasing && band && elapsed < Duration::from_secs(600),
        format!(
            "sup errors {:.2e}, {:.2e}, {:.2e} decreasing: {decreasing}; K = 1600 within 3 sigma band: {band}; {:.1} s",
            sups[0],
            sups[1],
            sups[2],
            elapsed.as_secs_f64()
        ),
    )
}

fn mode_cross_check() -> Outcome {
    let p = params(1.0, 1.0, 0.2, 0.2, 1.0, 0.1, 0.0);
    let delay = DelayDistribution::default_for(0.1);
    let ic = InitialCondition::dirac(1.0);
    let num = Numerics::with_horizon(2.0);
    let st = solve_fixed_point(&p, &ic, &delay, &num).unwrap();
    let blowups = detect_blowups(&st, ExitRule::Physical).unwrap().len();
    let renewal = solve_g(&st.psi, &p, &ic, &delay, &num, RateMode::Renewal).unwrap();
    let err = st.cumulative.sup_distance(&renewal.cumulative);
    outcome(blowups == 0 && err < 5e-3, format!("sup |G_A - G_B| = {err:.3e} (< 5e-3), {blowups} blowups"))
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    results.push(("1 first-passage oracle", fpt_oracle()));
    results.push(("2 passage density bound", density_bound()));
    results.push(("3 buffer equivalence", buffer_equivalence()));

    let t0 = Instant::now();
    let onset_params = params(1.0, 1.0, 2.0, 2.0, 1.0, 0.05, 0.0);
    let delay = DelayDistribution::default_for(0.05);
    let ic = InitialCondition::dirac(1.0);
    let onset = solve_fixed_point(&onset_params, &ic, &delay, &Numerics::with_horizon(20.0)).unwrap();
    let onset_time = t0.elapsed();
    let buffered = solve_fixed_point(&onset_params.with_buffer(0.01).unwrap(), &ic, &delay, &Numerics::with_horizon(10.0)).unwrap();
    let weak_params = params(1.0, 1.0, 0.2, 0.2, 1.0, 0.1, 0.0);
    let weak_delay = DelayDistribution::default_for(0.1);
    let weak = solve_fixed_point(&weak_params, &ic, &weak_delay, &Numerics::with_horizon(3.0)).unwrap();

    results.push(("4 conservation", conservation(&[("blowup", &onset), ("buffered", &buffered), ("weak", &weak)])));
    results.push(("5 contraction", contraction()));
    results.push(("6 blowup onset", blowup_onset(&onset, onset_time)));
    results.push(("7 blowup size", blowup_sizes(&onset)));
    results.push(("8 duration bound", duration_bound(&buffered)));
    let (recovery, persistence, _) = sweep();
    results.push(("9 buffer-to-zero recovery", recovery));
    results.push(("10 buffer persistence", persistence));
    results.push(("11 particle agreement", particle_agreement(&weak)));
    results.push(("12 mode cross-check", mode_cross_check()));

    let mut failed = 0;
    for (name, o) in &results {
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
