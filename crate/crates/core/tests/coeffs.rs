use dsde_core::coeffs::{
    check_boundary_monotonicity, check_lipschitz, check_monotonicity, monotone_linear, monotonicity_margin,
    AffineBlock, AffineMap, CoefficientSystem, Constants, LinearSpec, SamplePair, SamplerConfig, State,
};
use proptest::prelude::*;

const N: usize = 2;
const M: usize = 2;
const D: usize = 1;
const L: usize = 1;
const J: usize = 2;

fn rows(vals: &[f64], r: usize, c: usize) -> Vec<Vec<f64>> {
    (0..r).map(|i| vals[i * c..(i + 1) * c].to_vec()).collect()
}

/// A dense linear system with `n = m = 2`, one `W`, one `B` and two marks.
/// `w` supplies the matrix entries in a fixed order.
fn linear_system(w: &[f64]) -> CoefficientSystem {
    let mut it = w.iter().copied().cycle();
    let mut take = |r: usize, c: usize| rows(&(0..r * c).map(|_| it.next().unwrap()).collect::<Vec<_>>(), r, c);
    let block = |take: &mut dyn FnMut(usize, usize) -> Vec<Vec<f64>>, out: usize, k_width: usize| {
        AffineBlock::zero()
            .with_x(take(out, N))
            .with_p(take(out, M))
            .with_y(take(out, N * L))
            .with_q(take(out, M * D))
            .with_k(take(out, k_width))
            .with_constant(take(1, out).remove(0))
    };
    let f = block(&mut take, N, J * M);
    let g = block(&mut take, N * D, J * M);
    // h sees only the jump component of its own mark.
    let h = block(&mut take, N, M);
    let drift_p = block(&mut take, M, J * M);
    let diffusion_p = block(&mut take, M * L, J * M);
    let psi = AffineMap::new(take(N, M), take(1, N).remove(0));
    let phi = AffineMap::new(take(M, N), take(1, M).remove(0));
    LinearSpec {
        n: N,
        m: M,
        d: D,
        l: L,
        mark_labels: vec![1.0, -1.0],
        mark_rates: vec![0.7, 1.9],
        coupling: vec![vec![1.0, 0.3], vec![-0.2, 0.8]],
        f,
        g,
        h,
        drift_p,
        diffusion_p,
        psi,
        phi,
        constants: Constants { mu1: 0.4, mu2: 0.3, beta1: 0.5, beta2: 0.2, c: 1.0, gamma: 0.5 },
    }
    .build()
    .unwrap()
}

fn state(v: &[f64]) -> State {
    let mut it = v.iter().copied().cycle();
    let mut take = |len: usize| (0..len).map(|_| it.next().unwrap()).collect::<Vec<f64>>();
    State { x: take(N), p: take(M), y: take(N * L), q: take(M * D), k: take(J * M) }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

fn coeff_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, 7..41)
}

fn state_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pairing_is_symmetric_in_its_arguments(w in coeff_strategy(), a in state_strategy(), b in state_strategy(), t in 0.0f64..1.0) {
        let sys = linear_system(&w);
        let (u, v) = (state(&a), state(&b));
        prop_assert!(close(sys.pairing(t, &u, &v).unwrap(), sys.pairing(t, &v, &u).unwrap()));
        prop_assert_eq!(sys.pairing(t, &u, &u).unwrap(), 0.0);
    }

    #[test]
    fn pairing_is_quadratic_under_scaling(w in coeff_strategy(), a in state_strategy(), b in state_strategy(), s in -3.0f64..3.0) {
        let sys = linear_system(&w);
        let (u, v) = (state(&a), state(&b));
        let base = sys.pairing(0.5, &u, &v).unwrap();
        let scaled = sys.pairing(0.5, &u.scaled(s), &v.scaled(s)).unwrap();
        prop_assert!(close(scaled, s * s * base), "{} vs {}", scaled, s * s * base);
    }

    #[test]
    fn negation_flips_pairing(w in coeff_strategy(), a in state_strategy(), b in state_strategy()) {
        let sys = linear_system(&w);
        let (u, v) = (state(&a), state(&b));
        let p = sys.pairing(0.2, &u, &v).unwrap();
        prop_assert!(close(sys.negated().pairing(0.2, &u, &v).unwrap(), -p));
    }

    #[test]
    fn primed_margin_of_negation_matches(w in coeff_strategy(), a in state_strategy(), b in state_strategy()) {
        let sys = linear_system(&w);
        let pair = SamplePair { t: 0.4, u: state(&a), ubar: state(&b) };
        let standard = monotonicity_margin(&sys, &pair, false).unwrap();
        let primed = monotonicity_margin(&sys.negated(), &pair, true).unwrap();
        prop_assert!(close(standard, primed), "{} vs {}", standard, primed);
    }
}

#[test]
fn checker_reports_are_reproducible_and_dual() {
    let cfg = SamplerConfig { samples: 400, ..SamplerConfig::default() };
    let sys = linear_system(&[0.3, -1.1, 0.7, 0.2, -0.4, 1.3, 0.05]);
    let a = check_monotonicity(&sys, &cfg, false).unwrap();
    let b = check_monotonicity(&sys, &cfg, false).unwrap();
    assert_eq!(a, b);
    let dual = check_monotonicity(&sys.negated(), &cfg, true).unwrap();
    assert!((a.min_margin - dual.min_margin).abs() < 1e-10);
    assert_eq!(a.violation_count, dual.violation_count);
    assert_eq!(a.samples_tested, 400);
}

#[test]
fn violation_count_matches_negative_margins() {
    let cfg = SamplerConfig { samples: 300, ..SamplerConfig::default() };
    let sys = linear_system(&[0.9, -0.3, 0.4, 1.2, -0.8]);
    let r = check_monotonicity(&sys, &cfg, false).unwrap();
    assert!(r.violation_count > 0);
    let worst = r.worst_case.clone().unwrap();
    let m = monotonicity_margin(&sys, &worst, false).unwrap();
    assert!((m - r.min_margin).abs() < 1e-12);
    assert!(r.min_margin < 0.0);
}

#[test]
fn stochastic_monotone_system_passes_every_checker() {
    let cfg = SamplerConfig { samples: 600, ..SamplerConfig::default() };
    let sys = monotone_linear(1.5, 0.25).build().unwrap();
    assert_eq!(check_monotonicity(&sys, &cfg, false).unwrap().violation_count, 0);
    assert!(check_boundary_monotonicity(&sys, &cfg, false).unwrap().passed());
    assert!(check_lipschitz(&sys, &cfg).unwrap().passed());
}
