//! Continuation solver for the fully coupled forward-backward doubly
//! stochastic system with jumps.
//!
//! The homotopy parameter α moves from a decoupled system (α = 0) to the
//! target system (α = 1). Each step iterates the map `I_{α0+δ}` to its fixed
//! point; δ is halved whenever the measured contraction ratio is too large.
//!
//! The forward equation is solved by time reversal on the same backward
//! engine: reversing time turns `B` into the forward driver and `W`, `Ñ` into
//! backward drivers, and the initial condition into a terminal one.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bdsdep::{build_projectors, solve_backward, BackwardProblem, BackwardSolution, Projector, RegressionConfig, StepArgs};
use crate::coeffs::{CoefficientSystem, Dims, StateRef};
use crate::error::{DsdeError, Result};
use crate::paths::PathArray;
use crate::randomness::{NoiseEnsemble, TimeGrid};

/// Ensemble solution `(X, P, Y, Q, K)`.
///
/// `y` is `n × l` and `q` is `m × d` row-major per node; `k` is `J × m`
/// mark-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QuintupleSolution {
    pub grid: TimeGrid,
    pub dims: Dims,
    pub rates: Vec<f64>,
    pub x: PathArray,
    pub p: PathArray,
    pub y: PathArray,
    pub q: PathArray,
    pub k: PathArray,
}

impl QuintupleSolution {
    pub fn zeros(grid: TimeGrid, dims: Dims, rates: &[f64], paths: usize) -> Self {
        let nodes = grid.nodes();
        Self {
            grid,
            dims,
            rates: rates.to_vec(),
            x: PathArray::zeros(paths, nodes, dims.n),
            p: PathArray::zeros(paths, nodes, dims.m),
            y: PathArray::zeros(paths, nodes, dims.n * dims.l),
            q: PathArray::zeros(paths, nodes, dims.m * dims.d),
            k: PathArray::zeros(paths, nodes, dims.j * dims.m),
        }
    }

    pub fn paths(&self) -> usize {
        self.x.paths()
    }

    pub fn state(&self, path: usize, node: usize) -> StateRef<'_> {
        StateRef {
            x: self.x.get(path, node),
            p: self.p.get(path, node),
            y: self.y.get(path, node),
            q: self.q.get(path, node),
            k: self.k.get(path, node),
        }
    }

    fn components(&self) -> [&PathArray; 5] {
        [&self.x, &self.p, &self.y, &self.q, &self.k]
    }

    /// `(1 − w)·self + w·other`.
    pub fn blend(&self, other: &Self, w: f64) -> Self {
        Self {
            grid: self.grid,
            dims: self.dims,
            rates: self.rates.clone(),
            x: self.x.axpby(1.0 - w, &other.x, w),
            p: self.p.axpby(1.0 - w, &other.p, w),
            y: self.y.axpby(1.0 - w, &other.y, w),
            q: self.q.axpby(1.0 - w, &other.q, w),
            k: self.k.axpby(1.0 - w, &other.k, w),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.components().iter().all(|a| a.all_finite())
    }

    fn to_flat(&self) -> Vec<f64> {
        self.components().iter().flat_map(|a| a.as_slice().iter().copied()).collect()
    }

    fn with_flat(&self, data: &[f64]) -> Self {
        let mut out = self.clone();
        let mut rest = data;
        for arr in [&mut out.x, &mut out.p, &mut out.y, &mut out.q, &mut out.k] {
            let (head, tail) = rest.split_at(arr.as_slice().len());
            arr.as_mut_slice().copy_from_slice(head);
            rest = tail;
        }
        out
    }

    /// Per-path RMS of `X_0 − Ψ(P_0)` and `P_T − Φ(X_T)`.
    pub fn boundary_residuals(&self, sys: &CoefficientSystem) -> (f64, f64) {
        let n = self.grid.steps();
        let paths = self.paths();
        let (mut a, mut b) = (0.0, 0.0);
        for path in 0..paths {
            let psi = (sys.psi)(self.p.get(path, 0));
            a += sq_diff(self.x.get(path, 0), &psi);
            let phi = (sys.phi)(self.x.get(path, n));
            b += sq_diff(self.p.get(path, n), &phi);
        }
        ((a / paths as f64).sqrt(), (b / paths as f64).sqrt())
    }
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `E Σ_{i<N} Δt(|X̂|²+|P̂|²+|Ŷ|²+|Q̂|²+‖K̂‖²) + E|X̂_T|² + E|P̂_0|²`.
pub fn solution_distance(u: &QuintupleSolution, v: &QuintupleSolution) -> Result<f64> {
    if u.grid != v.grid
        || u.dims != v.dims
        || u.components()
            .iter()
            .zip(v.components())
            .any(|(a, b)| a.shape() != b.shape())
    {
        return Err(DsdeError::ShapeMismatch("solutions live on different grids or ensembles".into()));
    }
    let n = u.grid.steps();
    let dt = u.grid.dt();
    let m = u.dims.m;
    let paths = u.paths();
    let mut total = 0.0;
    for path in 0..paths {
        let mut acc = 0.0;
        for i in 0..n {
            let mut s = sq_diff(u.x.get(path, i), v.x.get(path, i))
                + sq_diff(u.p.get(path, i), v.p.get(path, i))
                + sq_diff(u.y.get(path, i), v.y.get(path, i))
                + sq_diff(u.q.get(path, i), v.q.get(path, i));
            let (ka, kb) = (u.k.get(path, i), v.k.get(path, i));
            for (j, rate) in u.rates.iter().enumerate() {
                s += rate * sq_diff(&ka[j * m..(j + 1) * m], &kb[j * m..(j + 1) * m]);
            }
            acc += s * dt;
        }
        acc += sq_diff(u.x.get(path, n), v.x.get(path, n));
        acc += sq_diff(u.p.get(path, 0), v.p.get(path, 0));
        total += acc;
    }
    Ok(total / paths as f64)
}

/// Source terms of the homotopy system.
///
/// Node arrays cover all `N+1` nodes: `f0` (n), `g0` (n×d), `h0` (J×n
/// mark-major), `big_f0` (m), `big_g0` (m×l); `psi` and `phi` are
/// `paths × 1 × n` and `paths × 1 × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceTerms {
    pub f0: PathArray,
    pub g0: PathArray,
    pub h0: PathArray,
    pub big_f0: PathArray,
    pub big_g0: PathArray,
    pub psi: PathArray,
    pub phi: PathArray,
}

impl SourceTerms {
    pub fn zeros(grid: TimeGrid, dims: Dims, paths: usize) -> Self {
        let nodes = grid.nodes();
        let Dims { n, m, d, l, j } = dims;
        Self {
            f0: PathArray::zeros(paths, nodes, n),
            g0: PathArray::zeros(paths, nodes, n * d),
            h0: PathArray::zeros(paths, nodes, j * n),
            big_f0: PathArray::zeros(paths, nodes, m),
            big_g0: PathArray::zeros(paths, nodes, m * l),
            psi: PathArray::zeros(paths, 1, n),
            phi: PathArray::zeros(paths, 1, m),
        }
    }

    fn check(&self, grid: TimeGrid, dims: Dims, paths: usize) -> Result<()> {
        let z = Self::zeros(grid, dims, paths);
        let mine = [&self.f0, &self.g0, &self.h0, &self.big_f0, &self.big_g0, &self.psi, &self.phi];
        let want = [&z.f0, &z.g0, &z.h0, &z.big_f0, &z.big_g0, &z.psi, &z.phi];
        for (a, b) in mine.iter().zip(want) {
            if a.shape() != b.shape() {
                return Err(DsdeError::ShapeMismatch(format!(
                    "source term shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            if !a.all_finite() {
                return Err(DsdeError::InvalidData("non-finite source term".into()));
            }
        }
        Ok(())
    }
}

/// Which homotopy family is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `m > n` (or `m = n` with `μ1, β1 > 0`): the `P` equation carries the
    /// `μ1 H X` coupling and the forward equation is solved first.
    MGreaterN,
    /// `m < n` (or `m = n` with `μ2, β2 > 0`): the forward equation carries
    /// the `μ2 Hᵀ P` coupling and the backward equation is solved first.
    MLessN,
}

/// Picks the homotopy family from the dimensions and constants.
pub fn select_branch(sys: &CoefficientSystem) -> Result<Branch> {
    let Dims { n, m, .. } = sys.dims;
    let c = sys.constants;
    if m > n || (m == n && c.mu1 > 0.0 && c.beta1 > 0.0) {
        Ok(Branch::MGreaterN)
    } else if m < n || (m == n && c.mu2 > 0.0 && c.beta2 > 0.0) {
        Ok(Branch::MLessN)
    } else {
        Err(DsdeError::InvalidSystem(
            "m = n needs mu1, beta1 > 0 or mu2, beta2 > 0".into(),
        ))
    }
}

/// Sign of the `(1 − α) Hᵀ P_0` term in the initial condition of the
/// `m < n` family.
const MLESSN_INITIAL_SIGN: f64 = 1.0;

/// Step-size control for the continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomotopyConfig {
    pub delta_init: f64,
    pub contraction_threshold: f64,
    pub max_inner: usize,
    pub inner_tol: f64,
    pub min_delta: f64,
    /// Sweep cap of the fixed-point solve inside one map evaluation.
    pub picard_max: usize,
}

impl Default for HomotopyConfig {
    fn default() -> Self {
        Self {
            delta_init: 0.25,
            contraction_threshold: 0.9,
            max_inner: 200,
            inner_tol: 1e-6,
            min_delta: 1.0 / 64.0,
            picard_max: 2000,
        }
    }
}

impl HomotopyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_delta > 0.0
            && self.min_delta <= self.delta_init
            && self.delta_init <= 1.0
            && self.contraction_threshold > 0.0
            && self.contraction_threshold < 1.0
            && self.inner_tol > 0.0
            && self.max_inner >= 1
            && self.picard_max >= 1;
        if ok {
            Ok(())
        } else {
            Err(DsdeError::InvalidArgument(format!("invalid homotopy configuration {self:?}")))
        }
    }

    fn picard_tol(&self) -> f64 {
        self.inner_tol * 1e-3
    }
}

/// One accepted homotopy step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub step: usize,
    /// α reached by this step.
    pub alpha: f64,
    pub delta: f64,
    pub inner_iters: usize,
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl TraceStep {
    pub fn last_distance(&self) -> f64 {
        self.distances.last().copied().unwrap_or(0.0)
    }

    /// Largest measured contraction ratio (0 when fewer than two distances).
    pub fn max_ratio(&self) -> f64 {
        self.ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// An attempted step that was rejected and retried with a smaller δ.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectedStep {
    pub alpha_from: f64,
    pub delta: f64,
    pub reason: String,
    pub distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub branch: Branch,
    pub steps: Vec<TraceStep>,
    pub rejected: Vec<RejectedStep>,
}

impl ConvergenceTrace {
    pub fn final_alpha(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.alpha)
    }
}

/// Solver error carrying the trace gathered so far.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct SolveFailure {
    pub error: DsdeError,
    pub trace: ConvergenceTrace,
}

fn mat_vec(a: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|r| (0..a.ncols()).map(|c| a[(r, c)] * v[c]).sum())
        .collect()
}

/// `A · B` for a row-major block `B` with `cols` columns.
fn mat_block(a: &DMatrix<f64>, block: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.nrows() * cols];
    for r in 0..a.nrows() {
        for c in 0..cols {
            out[r * cols + c] = (0..a.ncols()).map(|i| a[(r, i)] * block[i * cols + c]).sum();
        }
    }
    out
}

fn axpy(out: &mut [f64], a: f64, v: &[f64]) {
    for (o, x) in out.iter_mut().zip(v) {
        *o += a * x;
    }
}

/// Noise, projectors and reversed drivers shared by every solve on one ensemble.
pub struct FbdsdepSolver<'a> {
    sys: &'a CoefficientSystem,
    noise: &'a NoiseEnsemble,
    projectors: Vec<Projector>,
    compensated: PathArray,
    reversed_forward: PathArray,
    reversed_backward: PathArray,
    ht: DMatrix<f64>,
}

impl<'a> FbdsdepSolver<'a> {
    pub fn new(sys: &'a CoefficientSystem, noise: &'a NoiseEnsemble, cfg: &RegressionConfig) -> Result<Self> {
        sys.validate()?;
        cfg.validate()?;
        let Dims { d, l, j, .. } = sys.dims;
        if noise.d != d || noise.l != l || noise.j() != j {
            return Err(DsdeError::ShapeMismatch(format!(
                "noise has (d, l, J) = ({}, {}, {}), system needs ({d}, {l}, {j})",
                noise.d,
                noise.l,
                noise.j()
            )));
        }
        let compensated = noise.compensated();
        let features = noise
            .w_paths()
            .hstack(&noise.compensated_paths())?
            .hstack(&noise.b_future())?;
        let projectors = build_projectors(&features, cfg)?;
        Ok(Self {
            sys,
            noise,
            projectors,
            reversed_forward: noise.db.reversed_nodes(),
            reversed_backward: noise.dw.hstack(&compensated)?.reversed_nodes(),
            compensated,
            ht: sys.coupling.transpose(),
        })
    }

    pub fn grid(&self) -> TimeGrid {
        self.noise.grid
    }

    pub fn paths(&self) -> usize {
        self.noise.paths()
    }

    pub fn zero_solution(&self) -> QuintupleSolution {
        QuintupleSolution::zeros(self.grid(), self.sys.dims, self.noise.marks.rates(), self.paths())
    }

    pub fn zero_sources(&self) -> SourceTerms {
        SourceTerms::zeros(self.grid(), self.sys.dims, self.paths())
    }

    /// Solves `X_{i+1} = X_i + f_{i+1}Δt + g_iΔW_i + h_iΔÑ_i − Y_{i+1}ΔB_i`
    /// from `X_0 = initial` (`paths × n`) by time reversal; returns `(X, Y)`.
    ///
    /// The closures take `(node, path)`; `drift` is only queried at nodes
    /// `1..=N`, `diffusion` (n×d) and `jump` (J×n) at nodes `0..N`. Reversed
    /// node `k` corresponds to original node `N − k`, see [`reversed_node`].
    pub fn solve_forward<D, S, J>(&self, initial: Vec<f64>, drift: D, diffusion: S, jump: J) -> Result<(PathArray, PathArray)>
    where
        D: Fn(usize, usize) -> Vec<f64> + Sync,
        S: Fn(usize, usize) -> Vec<f64> + Sync,
        J: Fn(usize, usize) -> Vec<f64> + Sync,
    {
        let grid = self.grid();
        let steps = grid.steps();
        let Dims { n, d, j, .. } = self.sys.dims;
        let width = d + j;
        let reversed_drift = |a: &StepArgs<'_>| -> Vec<f64> { drift(reversed_node(steps, a.node), a.path).iter().map(|v| -v).collect() };
        let reversed_integrand = |a: &StepArgs<'_>| -> Vec<f64> {
            let node = reversed_node(steps, a.node);
            let g = diffusion(node, a.path);
            let h = jump(node, a.path);
            let mut out = vec![0.0; n * width];
            for r in 0..n {
                for c in 0..d {
                    out[r * width + c] = -g[r * d + c];
                }
                for jj in 0..j {
                    out[r * width + d + jj] = -h[jj * n + r];
                }
            }
            out
        };
        let problem = BackwardProblem {
            grid,
            m: n,
            terminal: initial,
            forward_noise: &self.reversed_forward,
            jumps: None,
            backward_noise: &self.reversed_backward,
            projectors: self.projectors.iter().rev().collect(),
            driver: &reversed_drift,
            backward_integrand: &reversed_integrand,
        };
        let sol = solve_backward(&problem)?;
        Ok((sol.p.reversed_nodes(), sol.q.reversed_nodes()))
    }

    /// Solves `P_i = P_T − Σ F Δt − Σ G_{+}ΔB − Σ Q ΔW − Σ K ΔÑ`.
    fn solve_back<F, G>(&self, terminal: Vec<f64>, drift: F, integrand: G) -> Result<BackwardSolution>
    where
        F: Fn(&StepArgs<'_>) -> Vec<f64> + Sync,
        G: Fn(&StepArgs<'_>) -> Vec<f64> + Sync,
    {
        let problem = BackwardProblem {
            grid: self.grid(),
            m: self.sys.dims.m,
            terminal,
            forward_noise: &self.noise.dw,
            jumps: if self.noise.j() > 0 {
                Some((&self.compensated, self.noise.marks.rates()))
            } else {
                None
            },
            backward_noise: &self.noise.db,
            projectors: self.projectors.iter().collect(),
            driver: &drift,
            backward_integrand: &integrand,
        };
        solve_backward(&problem)
    }

    /// Folds the δ-scaled terms evaluated at `ubar` into the sources.
    fn effective_sources(&self, branch: Branch, delta: f64, ubar: &QuintupleSolution, src: &SourceTerms) -> SourceTerms {
        let mut out = src.clone();
        if delta == 0.0 {
            return out;
        }
        let sys = self.sys;
        let Dims { n, m, d, l, j } = sys.dims;
        let grid = self.grid();
        let steps = grid.steps();
        let (mu1, mu2) = (sys.constants.mu1, sys.constants.mu2);
        let h = &sys.coupling;
        for path in 0..self.paths() {
            for i in 0..=steps {
                let t = grid.node(i);
                let u = ubar.state(path, i);
                let mut f = (sys.f)(t, &u);
                let mut g = (sys.g)(t, &u);
                let mut hj: Vec<f64> = (0..j).flat_map(|jj| (sys.h)(t, &u, jj)).collect();
                let mut bf = (sys.drift_p)(t, &u);
                let mut bg = (sys.diffusion_p)(t, &u);
                match branch {
                    Branch::MGreaterN => {
                        axpy(&mut bf, mu1, &mat_vec(h, u.x));
                        if l > 0 {
                            axpy(&mut bg, mu1, &mat_block(h, u.y, l));
                        }
                    }
                    Branch::MLessN => {
                        axpy(&mut f, mu2, &mat_vec(&self.ht, u.p));
                        if d > 0 {
                            axpy(&mut g, mu2, &mat_block(&self.ht, u.q, d));
                        }
                        for jj in 0..j {
                            let v = mat_vec(&self.ht, &u.k[jj * m..(jj + 1) * m]);
                            axpy(&mut hj[jj * n..(jj + 1) * n], mu2, &v);
                        }
                    }
                }
                axpy(out.f0.get_mut(path, i), delta, &f);
                axpy(out.g0.get_mut(path, i), delta, &g);
                axpy(out.h0.get_mut(path, i), delta, &hj);
                axpy(out.big_f0.get_mut(path, i), delta, &bf);
                axpy(out.big_g0.get_mut(path, i), delta, &bg);
            }
            let p0 = ubar.p.get(path, 0);
            let xt = ubar.x.get(path, steps);
            let mut psi = (sys.psi)(p0);
            let mut phi = (sys.phi)(xt);
            match branch {
                Branch::MGreaterN => axpy(&mut phi, -1.0, &mat_vec(h, xt)),
                Branch::MLessN => axpy(&mut psi, -MLESSN_INITIAL_SIGN, &mat_vec(&self.ht, p0)),
            }
            axpy(out.psi.get_mut(path, 0), delta, &psi);
            axpy(out.phi.get_mut(path, 0), delta, &phi);
        }
        out
    }

    /// One Gauss-Seidel sweep of the α0-system with own-coefficient terms
    /// lagged at `v`.
    fn sweep(&self, branch: Branch, alpha0: f64, v: &QuintupleSolution, src: &SourceTerms) -> Result<QuintupleSolution> {
        match branch {
            Branch::MGreaterN => self.sweep_forward_first(alpha0, v, src),
            Branch::MLessN => self.sweep_backward_first(alpha0, v, src),
        }
    }

    fn sweep_forward_first(&self, a0: f64, v: &QuintupleSolution, src: &SourceTerms) -> Result<QuintupleSolution> {
        let sys = self.sys;
        let Dims { n, l, j, .. } = sys.dims;
        let grid = self.grid();
        let steps = grid.steps();
        let mu1 = sys.constants.mu1;
        let h = &sys.coupling;
        let paths = self.paths();
        let initial: Vec<f64> = (0..paths)
            .flat_map(|path| {
                let mut x0 = src.psi.get(path, 0).to_vec();
                if a0 != 0.0 {
                    axpy(&mut x0, a0, &(sys.psi)(v.p.get(path, 0)));
                }
                x0
            })
            .collect();
        let own = |node: usize, path: usize, func: &dyn Fn(f64, &StateRef<'_>) -> Vec<f64>, base: &[f64]| {
            let mut out = base.to_vec();
            if a0 != 0.0 {
                axpy(&mut out, a0, &func(grid.node(node), &v.state(path, node)));
            }
            out
        };
        let (x, y) = self.solve_forward(
            initial,
            |node, path| own(node, path, &*sys.f, src.f0.get(path, node)),
            |node, path| own(node, path, &*sys.g, src.g0.get(path, node)),
            |node, path| {
                let mut out = src.h0.get(path, node).to_vec();
                if a0 != 0.0 {
                    let u = v.state(path, node);
                    for jj in 0..j {
                        axpy(&mut out[jj * n..(jj + 1) * n], a0, &(sys.h)(grid.node(node), &u, jj));
                    }
                }
                out
            },
        )?;
        let terminal: Vec<f64> = (0..paths)
            .flat_map(|path| {
                let xt = x.get(path, steps);
                let mut pt = src.phi.get(path, 0).to_vec();
                axpy(&mut pt, 1.0 - a0, &mat_vec(h, xt));
                if a0 != 0.0 {
                    axpy(&mut pt, a0, &(sys.phi)(xt));
                }
                pt
            })
            .collect();
        let (xr, yr) = (&x, &y);
        let drift = |s: &StepArgs<'_>| {
            let mut out = src.big_f0.get(s.path, s.node).to_vec();
            let xi = xr.get(s.path, s.node);
            axpy(&mut out, -(1.0 - a0) * mu1, &mat_vec(h, xi));
            if a0 != 0.0 {
                let u = StateRef {
                    x: xi,
                    p: s.p,
                    y: yr.get(s.path, s.node),
                    q: s.q,
                    k: s.k,
                };
                axpy(&mut out, a0, &(sys.drift_p)(s.t, &u));
            }
            out
        };
        let integrand = |s: &StepArgs<'_>| {
            let mut out = src.big_g0.get(s.path, s.node).to_vec();
            if l == 0 {
                return out;
            }
            let yi = yr.get(s.path, s.node);
            axpy(&mut out, -(1.0 - a0) * mu1, &mat_block(h, yi, l));
            if a0 != 0.0 {
                let u = StateRef {
                    x: xr.get(s.path, s.node),
                    p: s.p,
                    y: yi,
                    q: s.q,
                    k: s.k,
                };
                axpy(&mut out, a0, &(sys.diffusion_p)(s.t, &u));
            }
            out
        };
        let back = self.solve_back(terminal, drift, integrand)?;
        Ok(QuintupleSolution {
            grid,
            dims: sys.dims,
            rates: self.noise.marks.rates().to_vec(),
            x,
            p: back.p,
            y,
            q: back.q,
            k: back.k,
        })
    }

    fn sweep_backward_first(&self, a0: f64, v: &QuintupleSolution, src: &SourceTerms) -> Result<QuintupleSolution> {
        let sys = self.sys;
        let Dims { n, m, d, j, .. } = sys.dims;
        let grid = self.grid();
        let steps = grid.steps();
        let mu2 = sys.constants.mu2;
        let ht = &self.ht;
        let paths = self.paths();
        let terminal: Vec<f64> = (0..paths)
            .flat_map(|path| {
                let mut pt = src.phi.get(path, 0).to_vec();
                if a0 != 0.0 {
                    axpy(&mut pt, a0, &(sys.phi)(v.x.get(path, steps)));
                }
                pt
            })
            .collect();
        let lagged = |s: &StepArgs<'_>, func: &dyn Fn(f64, &StateRef<'_>) -> Vec<f64>, base: &[f64]| {
            let mut out = base.to_vec();
            if a0 != 0.0 {
                let u = StateRef {
                    x: v.x.get(s.path, s.node),
                    p: s.p,
                    y: v.y.get(s.path, s.node),
                    q: s.q,
                    k: s.k,
                };
                axpy(&mut out, a0, &func(s.t, &u));
            }
            out
        };
        let back = self.solve_back(
            terminal,
            |s| lagged(s, &*sys.drift_p, src.big_f0.get(s.path, s.node)),
            |s| lagged(s, &*sys.diffusion_p, src.big_g0.get(s.path, s.node)),
        )?;
        let (p, q, k) = (&back.p, &back.q, &back.k);
        let state = |path: usize, node: usize| StateRef {
            x: v.x.get(path, node),
            p: p.get(path, node),
            y: v.y.get(path, node),
            q: q.get(path, node),
            k: k.get(path, node),
        };
        let initial: Vec<f64> = (0..paths)
            .flat_map(|path| {
                let p0 = p.get(path, 0);
                let mut x0 = src.psi.get(path, 0).to_vec();
                axpy(&mut x0, MLESSN_INITIAL_SIGN * (1.0 - a0), &mat_vec(ht, p0));
                if a0 != 0.0 {
                    axpy(&mut x0, a0, &(sys.psi)(p0));
                }
                x0
            })
            .collect();
        let (x, y) = self.solve_forward(
            initial,
            |node, path| {
                let mut out = src.f0.get(path, node).to_vec();
                axpy(&mut out, -(1.0 - a0) * mu2, &mat_vec(ht, p.get(path, node)));
                if a0 != 0.0 {
                    axpy(&mut out, a0, &(sys.f)(grid.node(node), &state(path, node)));
                }
                out
            },
            |node, path| {
                let mut out = src.g0.get(path, node).to_vec();
                if d > 0 {
                    axpy(&mut out, -(1.0 - a0) * mu2, &mat_block(ht, q.get(path, node), d));
                }
                if a0 != 0.0 {
                    axpy(&mut out, a0, &(sys.g)(grid.node(node), &state(path, node)));
                }
                out
            },
            |node, path| {
                let mut out = src.h0.get(path, node).to_vec();
                let kk = k.get(path, node);
                for jj in 0..j {
                    let seg = &mut out[jj * n..(jj + 1) * n];
                    axpy(seg, -(1.0 - a0) * mu2, &mat_vec(ht, &kk[jj * m..(jj + 1) * m]));
                    if a0 != 0.0 {
                        axpy(seg, a0, &(sys.h)(grid.node(node), &state(path, node), jj));
                    }
                }
                out
            },
        )?;
        Ok(QuintupleSolution {
            grid,
            dims: sys.dims,
            rates: self.noise.marks.rates().to_vec(),
            x,
            p: back.p,
            y,
            q: back.q,
            k: back.k,
        })
    }

    /// Solves the α0-system with the given sources by fixed-point iteration
    /// of the Gauss-Seidel sweep started at `start`, accelerated with Anderson
    /// mixing; falls back to damped Picard steps after a residual blow-up.
    /// Returns the solution and the number of sweeps.
    fn solve_system(
        &self,
        branch: Branch,
        alpha0: f64,
        src: &SourceTerms,
        start: &QuintupleSolution,
        cfg: &HomotopyConfig,
    ) -> Result<(QuintupleSolution, usize)> {
        let mut v = start.clone();
        let mut out = self.sweep(branch, alpha0, &v, src)?;
        if alpha0 == 0.0 {
            return Ok((out, 1));
        }
        let tol = cfg.picard_tol();
        let mut omega: f64 = 1.0;
        let mut best = f64::INFINITY;
        let mut mixer = Anderson::new(ANDERSON_DEPTH);
        let mut residual = f64::INFINITY;
        for it in 1..=cfg.picard_max {
            residual = solution_distance(&out, &v)?;
            if !residual.is_finite() || !out.all_finite() {
                return Err(DsdeError::NumericalBlowup {
                    step: it,
                    detail: "fixed-point iterate is not finite".into(),
                });
            }
            if residual < tol {
                return Ok((out, it));
            }
            let (vf, gf) = (v.to_flat(), out.to_flat());
            let next = if residual > 100.0 * best {
                mixer.clear();
                omega = (omega * 0.5).max(1.0 / 256.0);
                blend_flat(&vf, &gf, omega)
            } else {
                mixer.step(&vf, &gf).unwrap_or_else(|| blend_flat(&vf, &gf, omega))
            };
            best = best.min(residual);
            v = v.with_flat(&next);
            out = self.sweep(branch, alpha0, &v, src)?;
        }
        Err(DsdeError::MapDivergence {
            iterations: cfg.picard_max,
            last_distance: residual,
        })
    }

    pub fn solve_alpha_zero(&self, branch: Branch, sources: &SourceTerms) -> Result<QuintupleSolution> {
        sources.check(self.grid(), self.sys.dims, self.paths())?;
        let zero = self.zero_solution();
        self.sweep(branch, 0.0, &zero, sources)
    }

    /// `I_{α0+δ}(Ū)`: the solution of the α0-system whose sources carry the
    /// δ-scaled coefficients evaluated at `ubar`.
    pub fn continuation_map(
        &self,
        branch: Branch,
        alpha0: f64,
        delta: f64,
        ubar: &QuintupleSolution,
        sources: &SourceTerms,
        cfg: &HomotopyConfig,
    ) -> Result<QuintupleSolution> {
        Ok(self.map_with_count(branch, alpha0, delta, ubar, ubar, sources, cfg)?.0)
    }

    #[allow(clippy::too_many_arguments)]
    fn map_with_count(
        &self,
        branch: Branch,
        alpha0: f64,
        delta: f64,
        ubar: &QuintupleSolution,
        warm: &QuintupleSolution,
        sources: &SourceTerms,
        cfg: &HomotopyConfig,
    ) -> Result<(QuintupleSolution, usize)> {
        if !(0.0..=1.0).contains(&alpha0) || delta < 0.0 || alpha0 + delta > 1.0 + 1e-12 {
            return Err(DsdeError::InvalidArgument(format!(
                "need 0 <= alpha0 and alpha0 + delta <= 1, got {alpha0} + {delta}"
            )));
        }
        sources.check(self.grid(), self.sys.dims, self.paths())?;
        let eff = self.effective_sources(branch, delta, ubar, sources);
        self.solve_system(branch, alpha0, &eff, warm, cfg)
    }

    /// Runs the continuation from α = 0 to α = 1 with zero sources.
    pub fn solve(&self, cfg: &HomotopyConfig) -> std::result::Result<(QuintupleSolution, ConvergenceTrace), SolveFailure> {
        let branch = select_branch(self.sys).map_err(|error| SolveFailure {
            error,
            trace: ConvergenceTrace {
                branch: Branch::MGreaterN,
                steps: vec![],
                rejected: vec![],
            },
        })?;
        self.solve_from(branch, &self.zero_sources(), cfg)
    }

    pub fn solve_from(
        &self,
        branch: Branch,
        sources: &SourceTerms,
        cfg: &HomotopyConfig,
    ) -> std::result::Result<(QuintupleSolution, ConvergenceTrace), SolveFailure> {
        let mut trace = ConvergenceTrace {
            branch,
            steps: vec![],
            rejected: vec![],
        };
        let fail = |error: DsdeError, trace: &ConvergenceTrace| SolveFailure {
            error,
            trace: trace.clone(),
        };
        if let Err(e) = cfg.validate() {
            return Err(fail(e, &trace));
        }
        let mut current = match self.solve_alpha_zero(branch, sources) {
            Ok(u) => u,
            Err(e) => return Err(fail(e, &trace)),
        };
        let mut alpha = 0.0;
        let mut delta = cfg.delta_init;
        while alpha < 1.0 - 1e-12 {
            let step_delta = delta.min(1.0 - alpha);
            match self.advance(branch, alpha, step_delta, &current, sources, cfg) {
                Ok((next, distances, ratios, inner)) => {
                    alpha = if step_delta >= 1.0 - alpha { 1.0 } else { alpha + step_delta };
                    trace.steps.push(TraceStep {
                        step: trace.steps.len() + 1,
                        alpha,
                        delta: step_delta,
                        inner_iters: inner,
                        distances,
                        ratios,
                    });
                    current = next;
                }
                Err(StepError::Reject(reason, distances)) => {
                    trace.rejected.push(RejectedStep {
                        alpha_from: alpha,
                        delta: step_delta,
                        reason,
                        distances,
                    });
                    delta = step_delta * 0.5;
                    if delta < cfg.min_delta {
                        return Err(fail(
                            DsdeError::ContinuationFailure {
                                alpha,
                                min_delta: cfg.min_delta,
                            },
                            &trace,
                        ));
                    }
                }
                Err(StepError::Fatal(e)) => return Err(fail(e, &trace)),
            }
        }
        Ok((current, trace))
    }

    /// Iterates `Ū ← I_{α+δ}(Ū)` from `start` until successive distances
    /// fall below the tolerance.
    fn advance(
        &self,
        branch: Branch,
        alpha: f64,
        delta: f64,
        start: &QuintupleSolution,
        sources: &SourceTerms,
        cfg: &HomotopyConfig,
    ) -> std::result::Result<(QuintupleSolution, Vec<f64>, Vec<f64>, usize), StepError> {
        let mut ubar = start.clone();
        let mut distances = Vec::new();
        let mut ratios = Vec::new();
        for it in 1..=cfg.max_inner {
            let next = match self.map_with_count(branch, alpha, delta, &ubar, &ubar, sources, cfg) {
                Ok((u, _)) => u,
                Err(DsdeError::MapDivergence { iterations, last_distance }) => {
                    return Err(StepError::Reject(
                        format!("inner solve did not converge in {iterations} sweeps (residual {last_distance:e})"),
                        distances,
                    ))
                }
                Err(DsdeError::NumericalBlowup { detail, .. }) => {
                    return Err(StepError::Reject(format!("numerical blow-up: {detail}"), distances))
                }
                Err(e) => return Err(StepError::Fatal(e)),
            };
            let dist = solution_distance(&next, &ubar).map_err(StepError::Fatal)?;
            if let Some(&prev) = distances.last() {
                let ratio = if prev > 0.0 { dist / prev } else { 0.0 };
                ratios.push(ratio);
                if ratio >= cfg.contraction_threshold && dist >= cfg.inner_tol {
                    distances.push(dist);
                    return Err(StepError::Reject(
                        format!("measured contraction ratio {ratio:.4} >= threshold"),
                        distances,
                    ));
                }
            }
            distances.push(dist);
            ubar = next;
            if dist < cfg.inner_tol {
                return Ok((ubar, distances, ratios, it));
            }
        }
        Err(StepError::Reject(
            format!("no convergence within {} iterations", cfg.max_inner),
            distances,
        ))
    }
}

const ANDERSON_DEPTH: usize = 5;

fn blend_flat(v: &[f64], g: &[f64], omega: f64) -> Vec<f64> {
    v.iter().zip(g).map(|(a, b)| (1.0 - omega) * a + omega * b).collect()
}

/// Anderson mixing for the fixed point `v = S(v)` from the last few
/// residual and image differences.
struct Anderson {
    depth: usize,
    last: Option<(Vec<f64>, Vec<f64>)>,
    residual_diffs: std::collections::VecDeque<Vec<f64>>,
    image_diffs: std::collections::VecDeque<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self {
            depth,
            last: None,
            residual_diffs: Default::default(),
            image_diffs: Default::default(),
        }
    }

    fn clear(&mut self) {
        self.last = None;
        self.residual_diffs.clear();
        self.image_diffs.clear();
    }

    /// Takes the iterate `v` and its image `g = S(v)`; returns the mixed next
    /// iterate, or `None` when no history is available yet.
    fn step(&mut self, v: &[f64], g: &[f64]) -> Option<Vec<f64>> {
        let f: Vec<f64> = g.iter().zip(v).map(|(a, b)| a - b).collect();
        if let Some((pf, pg)) = self.last.take() {
            self.residual_diffs.push_back(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
            self.image_diffs.push_back(g.iter().zip(&pg).map(|(a, b)| a - b).collect());
            if self.residual_diffs.len() > self.depth {
                self.residual_diffs.pop_front();
                self.image_diffs.pop_front();
            }
        }
        self.last = Some((f.clone(), g.to_vec()));
        let k = self.residual_diffs.len();
        if k == 0 {
            return None;
        }
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut rhs = nalgebra::DVector::<f64>::zeros(k);
        for a in 0..k {
            rhs[a] = dot(&self.residual_diffs[a], &f);
            for b in a..k {
                let v = dot(&self.residual_diffs[a], &self.residual_diffs[b]);
                gram[(a, b)] = v;
                gram[(b, a)] = v;
            }
        }
        let scale = gram.trace() / k as f64;
        if !(scale > 0.0) || !scale.is_finite() {
            self.clear();
            return None;
        }
        for a in 0..k {
            gram[(a, a)] += 1e-10 * scale;
        }
        let gamma = match gram.cholesky() {
            Some(c) => c.solve(&rhs),
            None => {
                self.clear();
                return None;
            }
        };
        let mut next = g.to_vec();
        for (a, dg) in self.image_diffs.iter().enumerate() {
            for (n, d) in next.iter_mut().zip(dg) {
                *n -= gamma[a] * d;
            }
        }
        Some(next)
    }
}

/// Node of the reversed grid that corresponds to `node`; an involution.
pub fn reversed_node(steps: usize, node: usize) -> usize {
    steps - node
}

enum StepError {
    Reject(String, Vec<f64>),
    Fatal(DsdeError),
}

pub fn solve_alpha_zero(
    branch: Branch,
    sys: &CoefficientSystem,
    sources: &SourceTerms,
    noise: &NoiseEnsemble,
    cfg: &RegressionConfig,
) -> Result<QuintupleSolution> {
    FbdsdepSolver::new(sys, noise, cfg)?.solve_alpha_zero(branch, sources)
}

#[allow(clippy::too_many_arguments)]
pub fn continuation_map(
    branch: Branch,
    sys: &CoefficientSystem,
    alpha0: f64,
    delta: f64,
    ubar: &QuintupleSolution,
    sources: &SourceTerms,
    noise: &NoiseEnsemble,
    homotopy: &HomotopyConfig,
    regression: &RegressionConfig,
) -> Result<QuintupleSolution> {
    FbdsdepSolver::new(sys, noise, regression)?.continuation_map(branch, alpha0, delta, ubar, sources, homotopy)
}

pub fn solve_fbdsdep(
    sys: &CoefficientSystem,
    noise: &NoiseEnsemble,
    homotopy: &HomotopyConfig,
    regression: &RegressionConfig,
) -> std::result::Result<(QuintupleSolution, ConvergenceTrace), SolveFailure> {
    let solver = FbdsdepSolver::new(sys, noise, regression).map_err(|error| SolveFailure {
        error,
        trace: ConvergenceTrace {
            branch: Branch::MGreaterN,
            steps: vec![],
            rejected: vec![],
        },
    })?;
    solver.solve(homotopy)
}
