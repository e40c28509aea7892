//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line with
//! its runtime; the test fails if any criterion fails or exceeds its budget.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use dsde_core::bdsdep::{build_projectors, solve_backward, BackwardProblem, BackwardSolution, RegressionConfig, StepArgs};
use dsde_core::calculus::{backward_ito, energy_identity_residual, forward_ito, jump_integral, ProcessPath, SemimartingaleDecomposition};
use dsde_core::coeffs::{deterministic_coupled, monotone_linear, LinearSpec, SamplerConfig};
use dsde_core::experiments::{continuity_study, hamiltonian_demo, LinearTerms, ParameterFamily, QuadraticHamiltonian};
use dsde_core::fbdsdep::{solution_distance, Branch, FbdsdepSolver, HomotopyConfig, QuintupleSolution};
use dsde_core::paths::PathArray;
use dsde_core::randomness::{make_grid, sample_noise, stream_rng, BMode, MarkSpace, NoiseEnsemble};
use dsde_core::spdie::{compare_feynman_kac, EnsembleConfig, FdConfig, ScalarCase};
use rand::Rng;
use tempfile::TempDir;

type Verdict = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn random_path(rng: &mut impl Rng, grid: dsde_core::randomness::TimeGrid, width: usize) -> ProcessPath {
    let values = (0..grid.nodes() * width).map(|_| rng.random_range(-2.0..2.0)).collect();
    ProcessPath::new(grid, width, values).unwrap()
}

fn energy_identity() -> Verdict {
    let mut rng = stream_rng(2024, 0);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let grid = make_grid(rng.random_range(0.1..3.0), rng.random_range(1..50)).unwrap();
        let (k, d, l) = (rng.random_range(1..4), rng.random_range(0..3), rng.random_range(0..3));
        let marks_n = rng.random_range(0..3);
        let rates: Vec<f64> = (0..marks_n).map(|_| rng.random_range(0.1..5.0)).collect();
        let marks = MarkSpace::new((0..marks_n).map(|j| j as f64).collect(), rates).unwrap();
        let bundle = sample_noise(grid, d, l, &marks, case);
        let dec = SemimartingaleDecomposition {
            alpha0: (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
            beta: random_path(&mut rng, grid, k),
            gamma: random_path(&mut rng, grid, k * l),
            delta: random_path(&mut rng, grid, k * d),
            k_jump: random_path(&mut rng, grid, k * marks_n),
        };
        worst = worst.max(energy_identity_residual(&dec, &bundle).map_err(|e| e.to_string())?.relative());
    }
    check(worst < 1e-10, format!("max relative residual {worst:.2e} over 100 decompositions"))
}

type Integrand = fn(f64, f64, f64) -> f64;

fn integrands() -> [(&'static str, Integrand); 5] {
    [
        ("constant", |_, _, _| 1.0),
        ("linear", |_, w, _| w),
        ("sign", |_, w, _| if w >= 0.0 { 1.0 } else { -1.0 }),
        ("time_cosine", |t, w, _| t * w.cos()),
        ("mixed", |_, w, n| n + 0.5 * w),
    ]
}

fn ito_statistics() -> Verdict {
    const PATHS: usize = 100_000;
    let grid = make_grid(1.0, 8).unwrap();
    let marks = MarkSpace::single(1.5).unwrap();
    let ens = NoiseEnsemble::sample(grid, 1, 1, &marks, 17, PATHS, BMode::Independent).map_err(|e| e.to_string())?;
    let (w, n, bf) = (ens.w_paths(), ens.compensated_paths(), ens.b_future());
    let dt = grid.dt();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for (name, v) in integrands() {
        let mut samples: [Vec<f64>; 6] = Default::default();
        for p in 0..PATHS {
            let bundle = ens.bundle(p);
            let fwd: Vec<f64> = (0..grid.nodes()).map(|i| v(grid.node(i), w.get(p, i)[0], n.get(p, i)[0])).collect();
            // Backward integrands are functions of the future increment B_T − B_t.
            let bwd: Vec<f64> = (0..grid.nodes()).map(|i| v(grid.node(i), bf.get(p, i)[0], 0.0)).collect();
            let qf: f64 = fwd[..grid.steps()].iter().map(|x| x * x * dt).sum();
            let qb: f64 = bwd[1..].iter().map(|x| x * x * dt).sum();
            let fwd = ProcessPath::new(grid, 1, fwd).unwrap();
            let bwd = ProcessPath::new(grid, 1, bwd).unwrap();
            let i = forward_ito(&fwd, &bundle).unwrap();
            let j = jump_integral(&fwd, &bundle).unwrap();
            let b = backward_ito(&bwd, &bundle).unwrap();
            for (s, x) in samples.iter_mut().zip([i, i * i - qf, j, j * j - marks.rate(0) * qf, b, b * b - qb]) {
                s.push(x);
            }
        }
        let labels = ["forward mean", "forward isometry", "jump mean", "jump isometry", "backward mean", "backward isometry"];
        for (label, s) in labels.iter().zip(&samples) {
            let (mean, se) = mean_stderr(s);
            worst = worst.max(mean.abs() / se);
            if mean.abs() >= 3.0 * se {
                failures.push(format!("{name} {label}: {mean:.3e} vs 3·{se:.3e}"));
            }
        }
    }
    let mut detail = format!("30 statistics, worst |mean|/stderr {worst:.2}");
    for f in &failures {
        detail.push_str("; ");
        detail.push_str(f);
    }
    check(failures.is_empty(), detail)
}

fn backward_solve(
    ens: &NoiseEnsemble,
    features: &PathArray,
    terminal: Vec<f64>,
    jumps: Option<(&PathArray, &[f64])>,
    driver: &(dyn Fn(&StepArgs<'_>) -> Vec<f64> + Sync),
    backward: &(dyn Fn(&StepArgs<'_>) -> Vec<f64> + Sync),
) -> Result<BackwardSolution, String> {
    let projectors = build_projectors(features, &RegressionConfig::default()).map_err(|e| e.to_string())?;
    let problem = BackwardProblem {
        grid: ens.grid,
        m: 1,
        terminal,
        forward_noise: &ens.dw,
        jumps,
        backward_noise: &ens.db,
        projectors: projectors.iter().collect(),
        driver,
        backward_integrand: backward,
    };
    solve_backward(&problem).map_err(|e| e.to_string())
}

/// Largest path-RMS error over the grid nodes.
fn max_rms_error(sol: &PathArray, exact: impl Fn(usize, usize) -> f64) -> f64 {
    (0..sol.nodes())
        .map(|i| {
            let ss: f64 = (0..sol.paths()).map(|p| (sol.get(p, i)[0] - exact(p, i)).powi(2)).sum();
            (ss / sol.paths() as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

fn bdsdep_closed_forms() -> Verdict {
    const PATHS: usize = 20_000;
    let grid = make_grid(1.0, 64).unwrap();
    let sample = |marks: &MarkSpace, seed| {
        NoiseEnsemble::sample(grid, 1, 1, marks, seed, PATHS, BMode::Frozen { replicate: 0 }).unwrap()
    };
    let zero = |_: &StepArgs<'_>| vec![0.0];
    let mut errors = Vec::new();

    let ens = sample(&MarkSpace::empty(), 1);
    let w = ens.w_paths();
    let sol = backward_solve(&ens, &w, (0..PATHS).map(|p| w.get(p, 64)[0]).collect(), None, &zero, &zero)?;
    errors.push(("W_T", max_rms_error(&sol.p, |p, i| w.get(p, i)[0])));

    let ens = sample(&MarkSpace::empty(), 2);
    let w = ens.w_paths();
    let future = ens.b_future();
    let c = 1.7;
    let g = move |_: &StepArgs<'_>| vec![c];
    let sol = backward_solve(&ens, &w, vec![0.0; PATHS], None, &zero, &g)?;
    errors.push(("dB integral", max_rms_error(&sol.p, |p, i| -c * future.get(p, i)[0])));

    let marks = MarkSpace::single(2.0).unwrap();
    let ens = sample(&marks, 3);
    let (comp, n) = (ens.compensated(), ens.compensated_paths());
    let sol = backward_solve(&ens, &n, (0..PATHS).map(|p| n.get(p, 64)[0]).collect(), Some((&comp, marks.rates())), &zero, &zero)?;
    errors.push(("compensated jump", max_rms_error(&sol.p, |p, i| n.get(p, i)[0])));

    let ens = sample(&MarkSpace::empty(), 4);
    let a = 0.5;
    let drift = move |s: &StepArgs<'_>| vec![a * s.p[0]];
    let sol = backward_solve(&ens, &ens.w_paths(), vec![1.0; PATHS], None, &drift, &zero)?;
    errors.push(("linear ODE", max_rms_error(&sol.p, |_, i| (-a * (1.0 - grid.node(i))).exp())));

    let detail = errors.iter().map(|(k, e)| format!("{k} {e:.4}")).collect::<Vec<_>>().join(", ");
    check(errors.iter().all(|(_, e)| *e < 0.02), format!("max grid-point RMS error: {detail}"))
}

fn ensemble_for(spec: &LinearSpec, steps: usize, paths: usize, seed: u64) -> NoiseEnsemble {
    let grid = make_grid(1.0, steps).unwrap();
    let marks = MarkSpace::new(spec.mark_labels.clone(), spec.mark_rates.clone()).unwrap();
    NoiseEnsemble::sample(grid, spec.d, spec.l, &marks, seed, paths, BMode::Independent).unwrap()
}

fn random_solution(solver: &FbdsdepSolver<'_>, seed: u64) -> QuintupleSolution {
    let mut rng = stream_rng(seed, 1);
    let mut u = solver.zero_solution();
    for arr in [&mut u.x, &mut u.p, &mut u.y, &mut u.q, &mut u.k] {
        for v in arr.as_mut_slice() {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    u
}

fn contraction() -> Verdict {
    let cfg = HomotopyConfig::default();
    let spec = monotone_linear(1.0, 0.0);
    let sys = spec.build().map_err(|e| e.to_string())?;
    let noise = ensemble_for(&spec, 16, 200, 6);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).map_err(|e| e.to_string())?;
    let src = solver.zero_sources();
    let map = |u: &QuintupleSolution, delta| solver.continuation_map(Branch::MGreaterN, 0.0, delta, u, &src, &cfg);
    let mut ratios = Vec::new();
    for pair in 0..5 {
        let (a, b) = (random_solution(&solver, 10 + 2 * pair), random_solution(&solver, 11 + 2 * pair));
        let (ia, ib) = (map(&a, 0.25).map_err(|e| e.to_string())?, map(&b, 0.25).map_err(|e| e.to_string())?);
        ratios.push(solution_distance(&ia, &ib).unwrap() / solution_distance(&a, &b).unwrap());
    }
    let worst = ratios.iter().copied().fold(0.0, f64::max);

    let spec = deterministic_coupled();
    let sys = spec.build().map_err(|e| e.to_string())?;
    let noise = ensemble_for(&spec, 16, 8, 7);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).map_err(|e| e.to_string())?;
    let src = solver.zero_sources();
    let map = |u: &QuintupleSolution| solver.continuation_map(Branch::MGreaterN, 0.5, 0.0, u, &src, &cfg).unwrap();
    let image = map(&random_solution(&solver, 1));
    let idem = solution_distance(&map(&image), &image)
        .unwrap()
        .max(solution_distance(&map(&random_solution(&solver, 2)), &image).unwrap());
    check(
        worst < 1.0 && idem < cfg.inner_tol,
        format!("max ratio over 5 pairs {worst:.4}; delta = 0 idempotence distance {idem:.2e}"),
    )
}

fn uniqueness() -> Verdict {
    let coarse = HomotopyConfig { delta_init: 0.5, ..HomotopyConfig::default() };
    let fine = HomotopyConfig { delta_init: 0.125, min_delta: 0.125 / 8.0, ..HomotopyConfig::default() };
    let bound = 5.0 * coarse.inner_tol;
    let mut details = Vec::new();
    let mut ok = true;
    for (name, spec, paths) in [("deterministic", deterministic_coupled(), 8), ("monotone", monotone_linear(1.0, 1.0), 500)] {
        let sys = spec.build().map_err(|e| e.to_string())?;
        let noise = ensemble_for(&spec, 32, paths, 11);
        let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).map_err(|e| e.to_string())?;
        let (a, _) = solver.solve(&coarse).map_err(|e| e.to_string())?;
        let (b, _) = solver.solve(&fine).map_err(|e| e.to_string())?;
        let d = solution_distance(&a, &b).unwrap();
        ok &= d < bound;
        details.push(format!("{name} {d:.2e}"));
    }
    check(ok, format!("schedule distance {} (bound {bound:.0e})", details.join(", ")))
}

fn deterministic_oracle() -> Verdict {
    let spec = deterministic_coupled();
    let sys = spec.build().map_err(|e| e.to_string())?;
    let noise = ensemble_for(&spec, 64, 4, 3);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).map_err(|e| e.to_string())?;
    let (sol, _) = solver.solve(&HomotopyConfig::default()).map_err(|e| e.to_string())?;
    // X' = 1 − P, P' = −X, X(0) = 0, P(1) = X(1).
    let e = (-1.0f64).exp();
    let mut worst: f64 = 0.0;
    for p in 0..sol.paths() {
        for i in 0..sol.grid.nodes() {
            let t = sol.grid.node(i);
            worst = worst.max((sol.x.get(p, i)[0] - e * t.sinh()).abs());
            worst = worst.max((sol.p.get(p, i)[0] - (1.0 - e * t.cosh())).abs());
        }
    }
    check(worst < 0.02, format!("max error {worst:.4} at N = 64"))
}

fn feynman_kac() -> Verdict {
    let grid = make_grid(1.0, 16).unwrap();
    let ens = EnsembleConfig { paths: 50_000, seed: 8, ..EnsembleConfig::default() };
    let fd = FdConfig::new(-4.0, 4.0, 401);
    let points: Vec<(f64, f64)> = [0.0, 0.25, 0.5].iter().flat_map(|&t| [-1.0, 0.0, 1.0].map(move |x| (t, x))).collect();
    let mut details = Vec::new();
    let mut ok = true;
    for (name, case) in [("heat", ScalarCase::heat()), ("transport", ScalarCase::transport()), ("jump", ScalarCase::jump_only())] {
        let sys = case.build().map_err(|e| e.to_string())?;
        let table = compare_feynman_kac(&sys, &points, grid, &ens, &RegressionConfig::default(), &fd).map_err(|e| e.to_string())?;
        let worst = table.rows.iter().map(|r| r.difference / r.tolerance).fold(0.0, f64::max);
        ok &= table.rows.len() == 9 && table.all_within();
        details.push(format!("{name} max |MC − FD|/tol {worst:.2}"));
    }
    check(ok, details.join(", "))
}

fn continuity() -> Verdict {
    let cfg = HomotopyConfig { inner_tol: 1e-14, ..HomotopyConfig::default() };
    let spec = monotone_linear(1.0, 1.0);
    let family = ParameterFamily::additive_drift(spec.clone(), vec![0.1, 0.01, 0.001]).map_err(|e| e.to_string())?;
    let noise = ensemble_for(&spec, 16, 300, 4);
    let table = continuity_study(&family, &noise, &cfg, &RegressionConfig::default()).map_err(|e| e.to_string())?;
    let spread = table.quadratic_ratio_spread();
    let distances: Vec<String> = table.distances().iter().map(|d| d.map_or("failed".into(), |d| format!("{d:.3e}"))).collect();
    check(
        table.strictly_decreasing() && spread.is_some_and(|s| s < 10.0),
        format!("distances [{}], distance/alpha^2 spread {:.3}", distances.join(", "), spread.unwrap_or(f64::NAN)),
    )
}

fn hamiltonian() -> Verdict {
    let ham = QuadraticHamiltonian {
        linear: LinearTerms { x: 0.5, p: 1.0, y: 0.2, q: 0.3, k: 0.1 },
        psi1: 0.5,
        phi1: -0.25,
        ..QuadraticHamiltonian::new(0.5, 0.5).map_err(|e| e.to_string())?
    };
    let sampler = SamplerConfig { samples: 1000, ..SamplerConfig::default() };
    let (homotopy, reg) = (HomotopyConfig::default(), RegressionConfig::default());
    let grid = make_grid(1.0, 64).unwrap();
    let quiet = NoiseEnsemble::sample(grid, 0, 0, &MarkSpace::empty(), 1, 8, BMode::Independent).unwrap();
    let (_, calm) = hamiltonian_demo(&ham, &quiet, &homotopy, &reg, &sampler).map_err(|e| e.to_string())?;
    let marks = MarkSpace::single(1.0).unwrap();
    let noisy = NoiseEnsemble::sample(grid, 1, 1, &marks, 2, 1000, BMode::Independent).unwrap();
    let (_, rough) = hamiltonian_demo(&ham, &noisy, &homotopy, &reg, &sampler).map_err(|e| e.to_string())?;
    let violations = calm.monotonicity.violation_count
        + calm.boundary.psi.violation_count
        + calm.boundary.phi.violation_count
        + calm.lipschitz.entries().iter().map(|(_, r)| r.violation_count).sum::<usize>();
    check(
        violations == 0 && calm.checks_passed() && rough.checks_passed() && calm.max_bvp_error < 0.02 && rough.max_standardised_error < 3.0,
        format!(
            "violations {violations}; zero-noise BVP error {:.2e}; noisy max |mean − BVP|/stderr {:.2}",
            calm.max_bvp_error, rough.max_standardised_error
        ),
    )
}

fn run_binary(dir: &Path, sub: &str, config: &str, out: &str, threads: Option<&str>) -> Result<(), String> {
    let path = dir.join(format!("{out}.json"));
    fs::write(&path, config).unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dsde-lab"));
    cmd.args([sub, "--config", path.to_str().unwrap(), "--out", out]).current_dir(dir);
    match threads {
        Some(t) => cmd.env("DSDE_THREADS", t),
        None => cmd.env_remove("DSDE_THREADS"),
    };
    let status = cmd.output().map_err(|e| e.to_string())?;
    if status.status.success() {
        Ok(())
    } else {
        Err(format!("{sub} exited with {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)))
    }
}

fn reproducibility() -> Verdict {
    let dir = TempDir::new().map_err(|e| e.to_string())?;
    let runs: [(&str, &str, &[&str]); 3] = [
        (
            "solve-fbdsdep",
            r#"{"problem": {"builtin": "monotone_linear"}, "grid": {"steps": 16}, "ensemble": {"paths": 5000}, "seed": 3}"#,
            &["solution.csv", "trace.csv"],
        ),
        (
            "solve-bdsdep",
            r#"{"problem": {"builtin": "backward", "terminal": {"kind": "compensated_jump"}, "rate": 2.0},
                "grid": {"steps": 16}, "ensemble": {"paths": 10000, "b_replicates": 2}, "seed": 4}"#,
            &["solution.csv"],
        ),
        (
            "feynman-kac",
            r#"{"problem": {"builtin": "pide", "case": {"volatility": 1.0, "jump": 0.5, "rate": 1.0, "terminal": {"kind": "square"}}},
                "grid": {"steps": 8}, "ensemble": {"paths": 20000},
                "feynman_kac": {"times": [0.0, 0.5], "xs": [-1.0, 1.0], "fd": {"lower": -4.0, "upper": 4.0, "space_nodes": 101}}}"#,
            &["field.csv", "comparison.csv"],
        ),
    ];
    let threads = [None, Some("1"), Some("4"), Some("4")];
    let mut compared = 0;
    for (sub, config, files) in runs {
        let outs: Vec<String> = (0..threads.len()).map(|k| format!("{sub}-{k}")).collect();
        for (out, t) in outs.iter().zip(threads) {
            run_binary(dir.path(), sub, config, out, t)?;
        }
        for file in files {
            let reference = fs::read(dir.path().join(&outs[0]).join(file)).map_err(|e| e.to_string())?;
            for out in &outs[1..] {
                let other = fs::read(dir.path().join(out).join(file)).map_err(|e| e.to_string())?;
                if other != reference {
                    return Err(format!("{sub}: {file} differs between {} and {out}", outs[0]));
                }
                compared += 1;
            }
        }
    }
    check(true, format!("{compared} byte comparisons over 4 runs per workflow (default, 1, 4, 4 workers)"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 10] = [
        ("discrete energy identity", 10, energy_identity),
        ("isometry and martingale means", 60, ito_statistics),
        ("backward closed forms", 120, bdsdep_closed_forms),
        ("contraction of the continuation map", 120, contraction),
        ("uniqueness across step schedules", 300, uniqueness),
        ("deterministic two-point oracle", 60, deterministic_oracle),
        ("Feynman-Kac consistency", 300, feynman_kac),
        ("continuity in the parameter", 300, continuity),
        ("quadratic Hamiltonian", 180, hamiltonian),
        ("reproducibility", 600, reproducibility),
    ];
    let mut failed = Vec::new();
    for (k, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let verdict = run();
        let elapsed = start.elapsed();
        let in_budget = elapsed < Duration::from_secs(budget);
        let (status, detail) = match &verdict {
            Ok(d) if in_budget => ("PASS", d.clone()),
            Ok(d) => ("FAIL", format!("{d}; over the {budget} s budget")),
            Err(d) => ("FAIL", d.clone()),
        };
        if status == "FAIL" {
            failed.push(k + 1);
        }
        // Written past the test harness capture so the lines always show.
        let line = format!("criterion {}: {status} {name} ({detail}; {:.1} s)\n", k + 1, elapsed.as_secs_f64());
        std::io::stderr().write_all(line.as_bytes()).unwrap();
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
