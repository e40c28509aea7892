use dsde_core::bdsdep::RegressionConfig;
use dsde_core::coeffs::{deterministic_coupled, monotone_linear, zero_system, AffineBlock, AffineMap, Constants, LinearSpec};
use dsde_core::fbdsdep::{
    reversed_node, select_branch, solution_distance, Branch, FbdsdepSolver, HomotopyConfig, QuintupleSolution,
};
use dsde_core::randomness::{make_grid, BMode, MarkSpace, NoiseEnsemble};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn ensemble(steps: usize, d: usize, l: usize, marks: &MarkSpace, paths: usize, seed: u64) -> NoiseEnsemble {
    let grid = make_grid(1.0, steps).unwrap();
    NoiseEnsemble::sample(grid, d, l, marks, seed, paths, BMode::Independent).unwrap()
}

fn max_err(sol: &QuintupleSolution, which: char, exact: impl Fn(f64) -> f64) -> f64 {
    let arr = if which == 'x' { &sol.x } else { &sol.p };
    let mut worst: f64 = 0.0;
    for path in 0..sol.paths() {
        for i in 0..sol.grid.nodes() {
            worst = worst.max((arr.get(path, i)[0] - exact(sol.grid.node(i))).abs());
        }
    }
    worst
}

#[test]
fn alpha_zero_m_greater_n() {
    let mut spec = LinearSpec::scalar(Constants {
        mu1: 1.0,
        mu2: 0.0,
        beta1: 1.0,
        beta2: 0.0,
        c: 1.0,
        gamma: 0.5,
    });
    spec.phi = AffineMap::new(vec![vec![1.0]], vec![0.0]);
    let sys = spec.build().unwrap();
    let noise = ensemble(64, 0, 0, &MarkSpace::empty(), 8, 1);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let mut src = solver.zero_sources();
    src.f0.as_mut_slice().fill(1.0);
    let sol = solver.solve_alpha_zero(Branch::MGreaterN, &src).unwrap();
    assert!(max_err(&sol, 'x', |t| t) < 1e-10);
    // P_T = X_T = 1 and dP = −X dt; the drift enters at left endpoints
    let dt = 1.0 / 64.0;
    let err = max_err(&sol, 'p', |t| 1.0 + (1.0 - t * t) / 2.0);
    assert!(err < dt, "{err}");

    let zero = solver.solve_alpha_zero(Branch::MGreaterN, &solver.zero_sources()).unwrap();
    assert!(solution_distance(&zero, &solver.zero_solution()).unwrap() < 1e-16);
}

#[test]
fn alpha_zero_m_less_n() {
    let mut spec = LinearSpec::scalar(Constants {
        mu1: 0.0,
        mu2: 1.0,
        beta1: 0.0,
        beta2: 1.0,
        c: 1.0,
        gamma: 0.5,
    });
    spec.psi = AffineMap::new(vec![vec![-1.0]], vec![0.0]);
    let sys = spec.build().unwrap();
    assert_eq!(select_branch(&sys).unwrap(), Branch::MLessN);
    let noise = ensemble(64, 0, 0, &MarkSpace::empty(), 8, 1);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let mut src = solver.zero_sources();
    src.big_f0.as_mut_slice().fill(1.0);
    let sol = solver.solve_alpha_zero(Branch::MLessN, &src).unwrap();
    assert!(max_err(&sol, 'p', |t| t - 1.0) < 1e-10);
    let err = max_err(&sol, 'x', |t| -1.0 - (t * t / 2.0 - t));
    assert!(err < 1.0 / 64.0, "{err}");
}

#[test]
fn deterministic_coupled_matches_bvp() {
    let sys = deterministic_coupled().build().unwrap();
    let noise = ensemble(64, 0, 0, &MarkSpace::empty(), 8, 3);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let (sol, trace) = solver.solve(&HomotopyConfig::default()).unwrap();
    assert_eq!(trace.final_alpha(), 1.0);
    let e = (-1.0f64).exp();
    let ex = max_err(&sol, 'x', |t| e * t.sinh());
    let ep = max_err(&sol, 'p', |t| 1.0 - e * t.cosh());
    assert!(ex < 0.02 && ep < 0.02, "{ex} {ep}");
    let (r0, rt) = sol.boundary_residuals(&sys);
    assert!(r0 < 1e-3 && rt < 1e-3, "{r0} {rt}");
}

#[test]
fn zero_system_trace() {
    let sys = zero_system().build().unwrap();
    let noise = ensemble(16, 0, 0, &MarkSpace::empty(), 8, 3);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let (sol, trace) = solver.solve(&HomotopyConfig::default()).unwrap();
    assert_eq!(trace.steps.len(), 4);
    assert!(trace.steps.iter().all(|s| s.inner_iters == 1));
    assert_eq!(solution_distance(&sol, &solver.zero_solution()).unwrap(), 0.0);
}

#[test]
fn stochastic_monotone_solves() {
    let spec = monotone_linear(1.0, 1.0);
    let sys = spec.build().unwrap();
    let marks = sys.marks.clone();
    let noise = ensemble(32, 1, 1, &marks, 1000, 7);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let (sol, trace) = solver.solve(&HomotopyConfig::default()).unwrap();
    assert_eq!(trace.final_alpha(), 1.0);
    assert!(trace.steps.iter().all(|s| s.max_ratio() < 1.0));
    let (r0, rt) = sol.boundary_residuals(&sys);
    assert!(r0 < 1e-3 && rt < 1e-3, "{r0} {rt}");
}

fn m_less_n_spec() -> LinearSpec {
    let mut s = LinearSpec::scalar(Constants {
        mu1: 0.0,
        mu2: 1.0,
        beta1: 0.0,
        beta2: 1.0,
        c: 2.0,
        gamma: 0.5,
    });
    s.d = 1;
    s.l = 1;
    s.mark_labels = vec![1.0];
    s.mark_rates = vec![1.0];
    s.f = AffineBlock::zero().with_p(vec![vec![-1.0]]);
    s.g = AffineBlock::zero().with_q(vec![vec![-1.0]]).with_constant(vec![0.2]);
    s.h = AffineBlock::zero().with_k(vec![vec![-1.0]]);
    s.diffusion_p = AffineBlock::zero().with_constant(vec![0.2]);
    s.psi = AffineMap::new(vec![vec![-1.0]], vec![0.5]);
    s.phi = AffineMap::new(vec![vec![1.0]], vec![0.5]);
    s
}

#[test]
fn m_less_n_continuation() {
    let sys = m_less_n_spec().build().unwrap();
    assert_eq!(select_branch(&sys).unwrap(), Branch::MLessN);
    let noise = ensemble(16, 1, 1, &sys.marks.clone(), 200, 9);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let (sol, trace) = match solver.solve(&HomotopyConfig::default()) {
        Ok(v) => v,
        Err(f) => panic!("{} {:?}", f.error, f.trace.rejected),
    };
    assert_eq!(trace.final_alpha(), 1.0);
    assert!(trace.steps.iter().all(|s| s.max_ratio() < 1.0));
    let (r0, rt) = sol.boundary_residuals(&sys);
    assert!(r0 < 1e-3 && rt < 1e-3, "{r0} {rt}");
}

#[test]
fn uniqueness_two_schedules() {
    let sys = monotone_linear(1.0, 1.0).build().unwrap();
    let noise = ensemble(32, 1, 1, &sys.marks.clone(), 500, 11);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let a = HomotopyConfig { delta_init: 0.5, ..HomotopyConfig::default() };
    let b = HomotopyConfig { delta_init: 0.125, min_delta: 0.125 / 8.0, ..HomotopyConfig::default() };
    let (ua, _) = solver.solve(&a).unwrap();
    let (ub, _) = solver.solve(&b).unwrap();
    let dist = solution_distance(&ua, &ub).unwrap();
    assert!(dist < 5e-6);
}

fn spec_monotone() -> LinearSpec {
    let mut s = LinearSpec::scalar(Constants {
        mu1: 1.0,
        mu2: 1.0,
        beta1: 1.0,
        beta2: 0.0,
        c: 2.0,
        gamma: 0.5,
    });
    s.d = 1;
    s.l = 1;
    s.f = AffineBlock::zero().with_p(vec![vec![-1.0]]);
    s.drift_p = AffineBlock::zero().with_x(vec![vec![-1.0]]);
    s.diffusion_p = AffineBlock::zero().with_y(vec![vec![-1.0]]);
    s.phi = AffineMap::new(vec![vec![1.0]], vec![0.0]);
    s
}

fn random_solution(solver: &FbdsdepSolver<'_>, seed: u64) -> QuintupleSolution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = solver.zero_solution();
    for arr in [&mut u.x, &mut u.p, &mut u.y, &mut u.q, &mut u.k] {
        for v in arr.as_mut_slice() {
            *v = rng.sample(StandardNormal);
        }
    }
    u
}

#[test]
fn distance_examples() {
    let sys = spec_monotone().build().unwrap();
    let noise = ensemble(8, 1, 1, &MarkSpace::empty(), 64, 1);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let zero = solver.zero_solution();
    let mut ones = zero.clone();
    ones.x.as_mut_slice().fill(1.0);
    assert!((solution_distance(&ones, &zero).unwrap() - 2.0).abs() < 1e-12);
    let a = random_solution(&solver, 1);
    let b = random_solution(&solver, 2);
    assert_eq!(solution_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(solution_distance(&a, &b).unwrap(), solution_distance(&b, &a).unwrap());
}

#[test]
fn reverse_time_examples() {
    for k in 0..=16 {
        assert_eq!(reversed_node(16, reversed_node(16, k)), k);
    }
    let sys = spec_monotone().build().unwrap();
    let noise = ensemble(16, 1, 1, &MarkSpace::empty(), 64, 4);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let paths = solver.paths();
    let zero = |_: usize, _: usize| vec![0.0];
    let (x, y) = solver.solve_forward(vec![3.0; paths], zero, zero, |_, _| vec![]).unwrap();
    assert!(x.as_slice().iter().all(|v| (v - 3.0).abs() < 1e-10));
    assert!(y.as_slice().iter().all(|v| v.abs() < 1e-10));
    let (x, y) = solver.solve_forward(vec![0.0; paths], |_, _| vec![1.0], zero, |_, _| vec![]).unwrap();
    let grid = solver.grid();
    for p in 0..paths {
        for i in 0..grid.nodes() {
            assert!((x.get(p, i)[0] - grid.node(i)).abs() < 1e-10);
        }
    }
    assert!(y.as_slice().iter().all(|v| v.abs() < 1e-10));
}

#[test]
fn delta_zero_ignores_ubar() {
    let sys = spec_monotone().build().unwrap();
    let noise = ensemble(16, 1, 1, &MarkSpace::empty(), 200, 5);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let cfg = HomotopyConfig::default();
    let src = solver.zero_sources();
    let a = solver.continuation_map(Branch::MGreaterN, 0.5, 0.0, &random_solution(&solver, 1), &src, &cfg).unwrap();
    let b = solver.continuation_map(Branch::MGreaterN, 0.5, 0.0, &random_solution(&solver, 2), &src, &cfg).unwrap();
    assert!(solution_distance(&a, &b).unwrap() < cfg.inner_tol);
}

#[test]
fn continuation_map_contracts() {
    let sys = spec_monotone().build().unwrap();
    let noise = ensemble(16, 1, 1, &MarkSpace::empty(), 200, 6);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let cfg = HomotopyConfig::default();
    let src = solver.zero_sources();
    let map = |u: &QuintupleSolution| solver.continuation_map(Branch::MGreaterN, 0.0, 0.25, u, &src, &cfg).unwrap();
    for pair in 0..5 {
        let a = random_solution(&solver, 10 + 2 * pair);
        let b = random_solution(&solver, 11 + 2 * pair);
        let ratio = solution_distance(&map(&a), &map(&b)).unwrap() / solution_distance(&a, &b).unwrap();
        assert!(ratio < 1.0, "pair {pair}: {ratio}");
    }

    let mut u = random_solution(&solver, 99);
    let mut last = f64::INFINITY;
    for _ in 0..60 {
        let next = map(&u);
        let d = solution_distance(&next, &u).unwrap();
        assert!(d < last, "{d} >= {last}");
        last = d;
        u = next;
        if d < cfg.inner_tol {
            break;
        }
    }
    assert!(last < cfg.inner_tol);
}

#[test]
fn boundary_residuals_at_alpha_one() {
    let sys = spec_monotone().build().unwrap();
    let noise = ensemble(16, 1, 1, &MarkSpace::empty(), 300, 8);
    let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
    let cfg = HomotopyConfig::default();
    let (sol, _) = solver.solve(&cfg).unwrap();
    let (r0, rt) = sol.boundary_residuals(&sys);
    assert!(r0 < cfg.inner_tol && rt < cfg.inner_tol, "{r0} {rt}");
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn reversal_is_an_involution(steps in 1usize..10_000, frac in 0.0f64..=1.0) {
            let node = ((steps as f64) * frac).floor() as usize;
            prop_assert_eq!(reversed_node(steps, reversed_node(steps, node)), node);
            prop_assert_eq!(reversed_node(steps, 0), steps);
        }

        #[test]
        fn distance_is_symmetric_and_quadratic(sa in any::<u64>(), sb in any::<u64>(), s in -4.0f64..4.0) {
            let sys = spec_monotone().build().unwrap();
            let noise = ensemble(4, 1, 1, &MarkSpace::empty(), 64, 3);
            let solver = FbdsdepSolver::new(&sys, &noise, &RegressionConfig::default()).unwrap();
            let a = random_solution(&solver, sa);
            let b = random_solution(&solver, sb);
            let d = solution_distance(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, solution_distance(&b, &a).unwrap());
            prop_assert_eq!(solution_distance(&a, &a).unwrap(), 0.0);
            let scale = |u: &QuintupleSolution| {
                let mut v = u.clone();
                for arr in [&mut v.x, &mut v.p, &mut v.y, &mut v.q, &mut v.k] {
                    arr.as_mut_slice().iter_mut().for_each(|x| *x *= s);
                }
                v
            };
            let ds = solution_distance(&scale(&a), &scale(&b)).unwrap();
            prop_assert!((ds - s * s * d).abs() <= 1e-10 * (1.0 + ds));
        }
    }
}
