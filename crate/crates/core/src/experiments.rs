//! Numerical studies: continuity of the solution in a parameter of the
//! coefficients, and a quadratic doubly stochastic Hamiltonian system.

use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::bdsdep::RegressionConfig;
use crate::coeffs::{
    check_boundary_monotonicity, check_lipschitz, check_monotonicity, AffineBlock, AffineMap, BoundaryReport,
    CoefficientSystem, Constants, LinearSpec, LipschitzReport, MarginReport, SamplerConfig,
};
use crate::error::{DsdeError, Result};
use crate::fbdsdep::{
    solution_distance, ConvergenceTrace, FbdsdepSolver, HomotopyConfig, QuintupleSolution, SolveFailure,
};
use crate::randomness::NoiseEnsemble;

pub type Perturbation = Arc<dyn Fn(f64) -> Result<CoefficientSystem> + Send + Sync>;

/// Coefficient systems indexed by a parameter; `member(0)` is the baseline.
#[derive(Clone)]
pub struct ParameterFamily {
    pub baseline: CoefficientSystem,
    pub perturb: Perturbation,
    /// Decreasing positive parameters.
    pub alphas: Vec<f64>,
}

impl std::fmt::Debug for ParameterFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParameterFamily").field("alphas", &self.alphas).finish()
    }
}

impl ParameterFamily {
    pub fn new(perturb: Perturbation, alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0)) || alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(DsdeError::InvalidArgument(
                "alphas must be positive and strictly decreasing".into(),
            ));
        }
        let baseline = perturb(0.0)?;
        Ok(Self {
            baseline,
            perturb,
            alphas,
        })
    }

    /// `f_α = f + α` in every component of the forward drift.
    pub fn additive_drift(spec: LinearSpec, alphas: Vec<f64>) -> Result<Self> {
        let perturb: Perturbation = Arc::new(move |alpha| {
            let mut s = spec.clone();
            let base = s.f.constant.take().unwrap_or_else(|| vec![0.0; s.n]);
            s.f.constant = Some(base.iter().map(|v| v + alpha).collect());
            s.build()
        });
        Self::new(perturb, alphas)
    }

    /// Every member equals the baseline.
    pub fn constant(spec: LinearSpec, alphas: Vec<f64>) -> Result<Self> {
        Self::new(Arc::new(move |_| spec.build()), alphas)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityRow {
    pub alpha: f64,
    /// `solution_distance(U^α, U^0)`, absent when the member failed.
    pub distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContinuityTable {
    pub rows: Vec<ContinuityRow>,
}

impl ContinuityTable {
    pub fn distances(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.distance).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        let d: Option<Vec<f64>> = self.distances().into_iter().collect();
        d.is_some_and(|d| d.windows(2).all(|w| w[1] < w[0]))
    }

    /// `max / min` of `distance / α²` over the rows, when all succeeded.
    pub fn quadratic_ratio_spread(&self) -> Option<f64> {
        let ratios: Option<Vec<f64>> = self.rows.iter().map(|r| r.distance.map(|d| d / (r.alpha * r.alpha))).collect();
        let ratios = ratios?;
        let max = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        (min > 0.0).then(|| max / min)
    }
}

/// Solves every member on the same noise and reports its distance to the
/// baseline solution. A failing member is recorded and the study continues;
/// a failing baseline is an error.
pub fn continuity_study(
    family: &ParameterFamily,
    noise: &NoiseEnsemble,
    homotopy: &HomotopyConfig,
    regression: &RegressionConfig,
) -> Result<ContinuityTable> {
    let solve = |sys: &CoefficientSystem| -> Result<QuintupleSolution> {
        let solver = FbdsdepSolver::new(sys, noise, regression)?;
        solver.solve(homotopy).map(|(u, _)| u).map_err(|f| f.error)
    };
    let base = solve(&family.baseline)?;
    let rows = family
        .alphas
        .iter()
        .map(|&alpha| {
            let outcome = (family.perturb)(alpha)
                .and_then(|sys| solve(&sys))
                .and_then(|u| solution_distance(&u, &base));
            match outcome {
                Ok(d) => ContinuityRow {
                    alpha,
                    distance: Some(d),
                    error: None,
                },
                Err(e) => ContinuityRow {
                    alpha,
                    distance: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(ContinuityTable { rows })
}

/// Coefficients of the affine part of the Hamiltonian.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearTerms {
    pub x: f64,
    pub p: f64,
    pub y: f64,
    pub q: f64,
    pub k: f64,
}

/// Scalar quadratic Hamiltonian
/// `H = b/2 (X² + Y²) − a/2 (P² + Q² + K²) + e·(X, P, Y, Q, K)`
/// with boundary potentials `φ(X) = X²/2 + φ₁X` and `ψ(P) = −P²/2 + ψ₁P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticHamiltonian {
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub linear: LinearTerms,
    #[serde(default)]
    pub psi1: f64,
    #[serde(default)]
    pub phi1: f64,
}

/// Driving noise of the Hamiltonian system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HamiltonianNoise {
    /// No `W`, `B` or jumps.
    None,
    /// One `W`, one `B` and one mark with the given rate.
    Full { rate: f64 },
}

impl QuadraticHamiltonian {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let ham = Self {
            a,
            b,
            linear: LinearTerms::default(),
            psi1: 0.0,
            phi1: 0.0,
        };
        ham.validate()?;
        Ok(ham)
    }

    /// Concavity in `(P, Q, K)` needs `a > 0`, convexity in `(X, Y)` needs
    /// `b > 0`, and the contraction constant on `g`'s `Q`-dependence needs `a < 1`.
    pub fn validate(&self) -> Result<()> {
        let e = self.linear;
        let all = [self.a, self.b, e.x, e.p, e.y, e.q, e.k, self.psi1, self.phi1];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DsdeError::InvalidHamiltonian("parameters must be finite".into()));
        }
        if !(self.a > 0.0) {
            return Err(DsdeError::InvalidHamiltonian(format!("H must be concave in (P, Q, K): a = {}", self.a)));
        }
        if !(self.b > 0.0) {
            return Err(DsdeError::InvalidHamiltonian(format!("H must be convex in (X, Y): b = {}", self.b)));
        }
        if self.a >= 1.0 {
            return Err(DsdeError::InvalidHamiltonian(format!("need a < 1, got {}", self.a)));
        }
        Ok(())
    }

    pub fn value(&self, x: f64, p: f64, y: f64, q: f64, k: f64) -> f64 {
        let e = self.linear;
        0.5 * self.b * (x * x + y * y) - 0.5 * self.a * (p * p + q * q + k * k)
            + e.x * x
            + e.p * p
            + e.y * y
            + e.q * q
            + e.k * k
    }

    /// Declared monotonicity and Lipschitz constants.
    pub fn constants(&self) -> Constants {
        Constants {
            mu1: self.b,
            mu2: self.a,
            beta1: 1.0,
            beta2: 1.0,
            c: (self.a * self.a).max(self.b * self.b).max(1.0),
            gamma: self.a,
        }
    }
}

/// `f = H_P`, `g = H_Q`, `h = H_K`, `F = −H_X`, `G = −H_Y`, `Ψ = ψ'(P)`,
/// `Φ = φ'(X)`, coupling 1.
pub fn hamiltonian_spec(ham: &QuadraticHamiltonian, noise: HamiltonianNoise) -> Result<LinearSpec> {
    ham.validate()?;
    let (a, b, e) = (ham.a, ham.b, ham.linear);
    let mut s = LinearSpec::scalar(ham.constants());
    s.f = AffineBlock::zero().with_p(vec![vec![-a]]).with_constant(vec![e.p]);
    s.drift_p = AffineBlock::zero().with_x(vec![vec![-b]]).with_constant(vec![-e.x]);
    s.psi = AffineMap::new(vec![vec![-1.0]], vec![ham.psi1]);
    s.phi = AffineMap::new(vec![vec![1.0]], vec![ham.phi1]);
    if let HamiltonianNoise::Full { rate } = noise {
        if !(rate > 0.0) {
            return Err(DsdeError::InvalidArgument(format!("mark rate must be positive, got {rate}")));
        }
        s.d = 1;
        s.l = 1;
        s.mark_labels = vec![1.0];
        s.mark_rates = vec![rate];
        s.g = AffineBlock::zero().with_q(vec![vec![-a]]).with_constant(vec![e.q]);
        s.h = AffineBlock::zero().with_k(vec![vec![-a]]).with_constant(vec![e.k]);
        s.diffusion_p = AffineBlock::zero().with_y(vec![vec![-b]]).with_constant(vec![-e.y]);
    }
    Ok(s)
}

pub fn build_hamiltonian_system(ham: &QuadraticHamiltonian, noise: HamiltonianNoise) -> Result<CoefficientSystem> {
    hamiltonian_spec(ham, noise)?.build()
}

/// Solution of the deterministic reduction `X' = −aP + e_p`,
/// `P' = −bX − e_x`, `X(0) = −P(0) + ψ₁`, `P(T) = X(T) + φ₁`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianBvp {
    ham: QuadraticHamiltonian,
    start: Vector2<f64>,
}

impl HamiltonianBvp {
    fn propagator(ham: &QuadraticHamiltonian, t: f64) -> Matrix3<f64> {
        let gen = Matrix3::new(
            0.0, -ham.a, ham.linear.p,
            -ham.b, 0.0, -ham.linear.x,
            0.0, 0.0, 0.0,
        );
        (gen * t).exp()
    }

    pub fn solve(ham: &QuadraticHamiltonian, horizon: f64) -> Result<Self> {
        let m = Self::propagator(ham, horizon);
        // unknown P0 with X0 = ψ₁ − P0; terminal row: P_T − X_T = φ₁
        let row = |v: Vector3<f64>| (m.row(1) - m.row(0)).dot(&v.transpose());
        let slope = row(Vector3::new(-1.0, 1.0, 0.0));
        let offset = row(Vector3::new(ham.psi1, 0.0, 1.0));
        if slope.abs() < 1e-14 {
            return Err(DsdeError::InvalidHamiltonian("boundary value problem is singular".into()));
        }
        let p0 = (ham.phi1 - offset) / slope;
        Ok(Self {
            ham: *ham,
            start: Vector2::new(ham.psi1 - p0, p0),
        })
    }

    /// `(X(t), P(t))`.
    pub fn at(&self, t: f64) -> (f64, f64) {
        let z = Self::propagator(&self.ham, t) * Vector3::new(self.start[0], self.start[1], 1.0);
        (z[0], z[1])
    }

    /// Linear part of the ODE, for reference.
    pub fn generator(&self) -> Matrix2<f64> {
        Matrix2::new(0.0, -self.ham.a, -self.ham.b, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanPathRow {
    pub t: f64,
    pub mean_x: f64,
    pub stderr_x: f64,
    pub mean_p: f64,
    pub stderr_p: f64,
    pub bvp_x: f64,
    pub bvp_p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HamiltonianReport {
    pub monotonicity: MarginReport,
    pub boundary: BoundaryReport,
    pub lipschitz: LipschitzReport,
    pub boundary_residuals: (f64, f64),
    pub trace: ConvergenceTrace,
    pub mean_path: Vec<MeanPathRow>,
    /// Largest `|mean − BVP|` over nodes and both components.
    pub max_bvp_error: f64,
    /// Largest `|mean − BVP| / stderr` over nodes whose stderr is above rounding.
    pub max_standardised_error: f64,
}

impl HamiltonianReport {
    pub fn checks_passed(&self) -> bool {
        self.monotonicity.passed() && self.boundary.psi.passed() && self.boundary.phi.passed() && self.lipschitz.passed()
    }
}

/// Failure of [`hamiltonian_demo`]; a failed solve keeps its trace.
#[derive(Debug, Clone, thiserror::Error)]
pub enum DemoFailure {
    #[error(transparent)]
    Setup(#[from] DsdeError),
    #[error(transparent)]
    Solve(#[from] SolveFailure),
}

impl DemoFailure {
    pub fn error(&self) -> &DsdeError {
        match self {
            Self::Setup(e) => e,
            Self::Solve(f) => &f.error,
        }
    }
}

/// Builds the system for `ham` on the noise of `noise`, checks it, solves it
/// by continuation and compares the ensemble mean with the deterministic
/// reduction.
pub fn hamiltonian_demo(
    ham: &QuadraticHamiltonian,
    noise: &NoiseEnsemble,
    homotopy: &HomotopyConfig,
    regression: &RegressionConfig,
    sampler: &SamplerConfig,
) -> std::result::Result<(QuintupleSolution, HamiltonianReport), DemoFailure> {
    let shape = if noise.d == 0 && noise.l == 0 && noise.j() == 0 {
        HamiltonianNoise::None
    } else if noise.d == 1 && noise.l == 1 && noise.j() == 1 {
        HamiltonianNoise::Full { rate: noise.marks.rate(0) }
    } else {
        return Err(DsdeError::ShapeMismatch(
            "Hamiltonian noise must be empty or one W, one B and one mark".into(),
        )
        .into());
    };
    let sys = build_hamiltonian_system(ham, shape)?;
    let monotonicity = check_monotonicity(&sys, sampler, false)?;
    let boundary = check_boundary_monotonicity(&sys, sampler, false)?;
    let lipschitz = check_lipschitz(&sys, sampler)?;
    let solver = FbdsdepSolver::new(&sys, noise, regression)?;
    let (sol, trace) = solver.solve(homotopy)?;
    let bvp = HamiltonianBvp::solve(ham, noise.grid.horizon())?;
    let mx = sol.x.mean_over_paths();
    let sx = sol.x.stderr_over_paths();
    let mp = sol.p.mean_over_paths();
    let sp = sol.p.stderr_over_paths();
    let mut max_err: f64 = 0.0;
    let mut max_std: f64 = 0.0;
    let mean_path = (0..noise.grid.nodes())
        .map(|i| {
            let t = noise.grid.node(i);
            let (bx, bp) = bvp.at(t);
            for (m, s, b) in [(mx[i], sx[i], bx), (mp[i], sp[i], bp)] {
                max_err = max_err.max((m - b).abs());
                // Identical paths leave a rounding-level stderr.
                if s > 1e-12 * (1.0 + m.abs()) {
                    max_std = max_std.max((m - b).abs() / s);
                }
            }
            MeanPathRow {
                t,
                mean_x: mx[i],
                stderr_x: sx[i],
                mean_p: mp[i],
                stderr_p: sp[i],
                bvp_x: bx,
                bvp_p: bp,
            }
        })
        .collect();
    let report = HamiltonianReport {
        monotonicity,
        boundary,
        lipschitz,
        boundary_residuals: sol.boundary_residuals(&sys),
        trace,
        mean_path,
        max_bvp_error: max_err,
        max_standardised_error: max_std,
    };
    Ok((sol, report))
}
