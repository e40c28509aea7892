//! Feynman-Kac evaluation of the quasilinear stochastic PIDE: `u(t, x)` is the
//! `P`-component at time `t` of the decoupled-structure system started from
//! `X_t = x`. For `G ≡ 0` in one dimension an explicit finite-difference
//! solver provides an independent check.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdsdep::{build_projectors, solve_backward, BackwardProblem, RegressionConfig, StepArgs};
use crate::coeffs::{CoefficientSystem, Constants, Dims, StateRef};
use crate::error::{DsdeError, Result};
use crate::paths::PathArray;
use crate::randomness::{make_grid, stream_rng, BMode, MarkSpace, NoiseEnsemble, TimeGrid};

const PROBES: usize = 24;
const PROBE_TOL: f64 = 1e-12;

/// A deterministic coefficient system whose forward equation has no `dB`
/// term, `g` depends on `(t, X, P)` only and `h` on `(t, X, z)` only.
#[derive(Clone)]
pub struct MarkovianSystem {
    sys: CoefficientSystem,
}

impl std::fmt::Debug for MarkovianSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MarkovianSystem").field("dims", &self.sys.dims).finish()
    }
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(u, v)| (u - v).abs() <= PROBE_TOL * (1.0 + u.abs().max(v.abs())))
}

impl MarkovianSystem {
    /// Checks the structural restrictions by probing the coefficients at
    /// random states and perturbing the arguments they must ignore.
    pub fn new(sys: CoefficientSystem) -> Result<Self> {
        if !sys.deterministic {
            return Err(DsdeError::InvalidSystem("coefficients must be deterministic".into()));
        }
        let Dims { n, m, d, l, j } = sys.dims;
        if n == 0 || m == 0 || j != sys.marks.len() {
            return Err(DsdeError::InvalidSystem("inconsistent dimensions".into()));
        }
        let mut rng = stream_rng(0x5eed, 7);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        for _ in 0..PROBES {
            let t: f64 = draw(1)[0].abs();
            let (x, p, y, q, k) = (draw(n), draw(m), draw(n * l), draw(m * d), draw(j * m));
            let (p2, y2, q2, k2) = (draw(m), draw(n * l), draw(m * d), draw(j * m));
            let base = StateRef { x: &x, p: &p, y: &y, q: &q, k: &k };
            let other_y = StateRef { y: &y2, ..base };
            let ignore_qk = StateRef { y: &y2, q: &q2, k: &k2, ..base };
            let only_x = StateRef { p: &p2, y: &y2, q: &q2, k: &k2, ..base };
            let fail = |what: &str| Err(DsdeError::InvalidSystem(what.to_string()));
            if !close(&(sys.f)(t, &base), &(sys.f)(t, &other_y)) {
                return fail("f depends on Y");
            }
            if !close(&(sys.g)(t, &base), &(sys.g)(t, &ignore_qk)) {
                return fail("g depends on (Y, Q, K)");
            }
            for mark in 0..j {
                if !close(&(sys.h)(t, &base, mark), &(sys.h)(t, &only_x, mark)) {
                    return fail("h depends on (P, Y, Q, K)");
                }
            }
            if !close(&(sys.drift_p)(t, &base), &(sys.drift_p)(t, &other_y)) {
                return fail("F depends on Y");
            }
            if !close(&(sys.diffusion_p)(t, &base), &(sys.diffusion_p)(t, &other_y)) {
                return fail("G depends on Y");
            }
        }
        Ok(Self { sys })
    }

    pub fn system(&self) -> &CoefficientSystem {
        &self.sys
    }

    /// True when `G` vanished at every probe.
    pub fn backward_forcing_vanishes(&self) -> bool {
        let Dims { n, m, d, l, j } = self.sys.dims;
        let mut rng = stream_rng(0x5eed, 8);
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        (0..PROBES).all(|_| {
            let t: f64 = draw(1)[0].abs();
            let (x, p, y, q, k) = (draw(n), draw(m), vec![0.0; n * l], draw(m * d), draw(j * m));
            let s = StateRef { x: &x, p: &p, y: &y, q: &q, k: &k };
            (self.sys.diffusion_p)(t, &s).iter().all(|v| v.abs() <= PROBE_TOL)
        })
    }
}

/// Terminal data `Φ` of a [`ScalarCase`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalData {
    Constant { value: f64 },
    Linear { slope: f64, intercept: f64 },
    /// `x²`
    Square,
    /// `sin x`
    Sine,
}

impl TerminalData {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Linear { slope, intercept } => slope * x + intercept,
            Self::Square => x * x,
            Self::Sine => x.sin(),
        }
    }
}

/// One-dimensional PIDE with constant coefficients
/// `∂u + b ∂u + ½σ² ∂²u + λ(u(x + c) − u − c ∂u) = 0`, `u(T) = Φ`,
/// optionally forced by `G ≡ backward` against `dB`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalarCase {
    #[serde(default)]
    pub drift: f64,
    #[serde(default)]
    pub volatility: f64,
    #[serde(default)]
    pub jump: f64,
    /// Jump intensity; no mark is created when zero.
    #[serde(default)]
    pub rate: f64,
    #[serde(default)]
    pub backward: f64,
    pub terminal: TerminalData,
}

impl ScalarCase {
    /// `σ = 1`, `Φ(x) = x²`: `u = x² + T − t`.
    pub fn heat() -> Self {
        Self { drift: 0.0, volatility: 1.0, jump: 0.0, rate: 0.0, backward: 0.0, terminal: TerminalData::Square }
    }

    /// `b = 1`, `Φ = sin`: `u = sin(x + T − t)`.
    pub fn transport() -> Self {
        Self { drift: 1.0, volatility: 0.0, jump: 0.0, rate: 0.0, backward: 0.0, terminal: TerminalData::Sine }
    }

    /// Jumps of size `0.5` at rate `2`, `Φ(x) = x²`: `u = x² + 0.5(T − t)`.
    pub fn jump_only() -> Self {
        Self { drift: 0.0, volatility: 0.0, jump: 0.5, rate: 2.0, backward: 0.0, terminal: TerminalData::Square }
    }

    pub fn build(&self) -> Result<MarkovianSystem> {
        let vals = [self.drift, self.volatility, self.jump, self.rate, self.backward];
        if vals.iter().any(|v| !v.is_finite()) || self.rate < 0.0 {
            return Err(DsdeError::InvalidSystem(format!("invalid scalar case {self:?}")));
        }
        let marks = if self.rate > 0.0 { MarkSpace::single(self.rate)? } else { MarkSpace::empty() };
        let Self { drift, volatility, jump, backward, terminal, .. } = *self;
        let sys = CoefficientSystem {
            dims: Dims { n: 1, m: 1, d: 1, l: 1, j: marks.len() },
            marks,
            f: Arc::new(move |_, _| vec![drift]),
            g: Arc::new(move |_, _| vec![volatility]),
            h: Arc::new(move |_, _, _| vec![jump]),
            drift_p: Arc::new(|_, _| vec![0.0]),
            diffusion_p: Arc::new(move |_, _| vec![backward]),
            psi: Arc::new(|p| p.to_vec()),
            phi: Arc::new(move |x| vec![terminal.eval(x[0])]),
            coupling: DMatrix::from_element(1, 1, 1.0),
            constants: Constants { mu1: 1.0, mu2: 0.0, beta1: 1.0, beta2: 0.0, c: 1.0, gamma: 0.5 },
            deterministic: true,
        };
        MarkovianSystem::new(sys)
    }
}

/// Monte Carlo settings for [`evaluate_u`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub paths: usize,
    /// Number of frozen `B` realisations.
    pub replicates: usize,
    pub seed: u64,
    /// Mean-square change of `(X, P)` between coupling sweeps at which the
    /// loop stops.
    pub coupling_tol: f64,
    pub coupling_max: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            paths: 4000,
            replicates: 1,
            seed: 0,
            coupling_tol: 1e-12,
            coupling_max: 100,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < 2 || self.replicates == 0 || self.coupling_max == 0 {
            return Err(DsdeError::InvalidArgument(
                "need at least 2 paths, 1 replicate and 1 coupling sweep".into(),
            ));
        }
        if !(self.coupling_tol > 0.0) {
            return Err(DsdeError::InvalidArgument("coupling_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Estimate of `u(t, x)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UEstimate {
    /// Mean over replicates.
    pub value: Vec<f64>,
    /// Monte Carlo standard error of `value` given the `B` realisations.
    pub stderr: Vec<f64>,
    /// One value per frozen `B`; each is a sample of the random field.
    pub replicate_values: Vec<Vec<f64>>,
    pub replicate_stderr: Vec<Vec<f64>>,
    pub paths: usize,
    pub coupling_sweeps: usize,
}

impl UEstimate {
    /// Sample standard deviation of the replicate values per component.
    pub fn replicate_spread(&self) -> Vec<f64> {
        let r = self.replicate_values.len();
        if r < 2 {
            return vec![0.0; self.value.len()];
        }
        (0..self.value.len())
            .map(|c| {
                let ss: f64 = self.replicate_values.iter().map(|v| (v[c] - self.value[c]).powi(2)).sum();
                (ss / (r - 1) as f64).sqrt()
            })
            .collect()
    }
}

fn node_of(grid: TimeGrid, t: f64) -> Result<usize> {
    let i = (t / grid.dt()).round();
    if !(t >= 0.0) || i > grid.steps() as f64 || (grid.node(i as usize) - t).abs() > 1e-9 * grid.horizon().max(1.0) {
        return Err(DsdeError::InvalidArgument(format!("t = {t} is not a node of the time grid")));
    }
    Ok(i as usize)
}

/// Estimates `u(t, x) = P_t` for the system started at `X_t = x`; `t` must be a
/// node of `grid`, whose horizon is the terminal time.
pub fn evaluate_u(
    sys: &MarkovianSystem,
    t: f64,
    x: &[f64],
    grid: TimeGrid,
    ens: &EnsembleConfig,
    reg: &RegressionConfig,
) -> Result<UEstimate> {
    ens.validate()?;
    reg.validate()?;
    let dims = sys.sys.dims;
    if x.len() != dims.n {
        return Err(DsdeError::ShapeMismatch(format!("x has {} entries, expected {}", x.len(), dims.n)));
    }
    let start = node_of(grid, t)?;
    let remaining = grid.steps() - start;
    if remaining == 0 {
        let value = (sys.sys.phi)(x);
        return Ok(UEstimate {
            stderr: vec![0.0; dims.m],
            replicate_values: vec![value.clone(); ens.replicates],
            replicate_stderr: vec![vec![0.0; dims.m]; ens.replicates],
            value,
            paths: ens.paths,
            coupling_sweeps: 0,
        });
    }
    let sub = make_grid(grid.horizon() - grid.node(start), remaining)?;
    let mut values = Vec::with_capacity(ens.replicates);
    let mut errs = Vec::with_capacity(ens.replicates);
    let mut sweeps = 0;
    for r in 0..ens.replicates {
        let noise = NoiseEnsemble::sample(
            sub,
            dims.d,
            dims.l,
            &sys.sys.marks,
            ens.seed,
            ens.paths,
            BMode::Frozen { replicate: r as u64 },
        )?;
        let (v, e, s) = replicate(&sys.sys, t, x, &noise, ens, reg)?;
        values.push(v);
        errs.push(e);
        sweeps = sweeps.max(s);
    }
    let rn = ens.replicates as f64;
    let value = (0..dims.m).map(|c| values.iter().map(|v| v[c]).sum::<f64>() / rn).collect();
    let stderr = (0..dims.m)
        .map(|c| errs.iter().map(|e| e[c] * e[c]).sum::<f64>().sqrt() / rn)
        .collect();
    Ok(UEstimate {
        value,
        stderr,
        replicate_values: values,
        replicate_stderr: errs,
        paths: ens.paths,
        coupling_sweeps: sweeps,
    })
}

fn replicate(
    sys: &CoefficientSystem,
    t0: f64,
    x0: &[f64],
    noise: &NoiseEnsemble,
    ens: &EnsembleConfig,
    reg: &RegressionConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let Dims { n, m, d, l, j } = sys.dims;
    let grid = noise.grid;
    let (steps, dt, paths) = (grid.steps(), grid.dt(), noise.paths());
    let compensated = noise.compensated();
    let zeros_y = vec![0.0; n * l];
    let mut p = PathArray::zeros(paths, steps + 1, m);
    let mut q = PathArray::zeros(paths, steps + 1, m * d);
    let mut k = PathArray::zeros(paths, steps + 1, j * m);
    let mut x = PathArray::zeros(paths, steps + 1, n);
    let mut change = f64::INFINITY;
    for sweep in 1..=ens.coupling_max {
        let mut next_x = PathArray::zeros(paths, steps + 1, n);
        next_x
            .as_mut_slice()
            .par_chunks_mut((steps + 1) * n)
            .enumerate()
            .for_each(|(path, row)| {
                row[..n].copy_from_slice(x0);
                for i in 0..steps {
                    let (done, rest) = row.split_at_mut((i + 1) * n);
                    let xi = &done[i * n..];
                    let s = StateRef {
                        x: xi,
                        p: p.get(path, i),
                        y: &zeros_y,
                        q: q.get(path, i),
                        k: k.get(path, i),
                    };
                    let ti = t0 + grid.node(i);
                    let f = (sys.f)(ti, &s);
                    let g = (sys.g)(ti, &s);
                    let dw = noise.dw.get(path, i);
                    let dn = compensated.get(path, i);
                    let out = &mut rest[..n];
                    for r in 0..n {
                        out[r] = xi[r] + f[r] * dt + (0..d).map(|c| g[r * d + c] * dw[c]).sum::<f64>();
                    }
                    for (mark, dnj) in dn.iter().enumerate() {
                        let h = (sys.h)(ti, &s, mark);
                        for r in 0..n {
                            out[r] += h[r] * dnj;
                        }
                    }
                }
            });
        if !next_x.all_finite() {
            return Err(DsdeError::NumericalBlowup {
                step: steps,
                detail: "forward simulation produced non-finite values".into(),
            });
        }
        let projectors = build_projectors(&next_x, reg)?;
        let terminal: Vec<f64> = (0..paths).flat_map(|path| (sys.phi)(next_x.get(path, steps))).collect();
        let xs = &next_x;
        let driver = |a: &StepArgs<'_>| {
            let s = StateRef {
                x: xs.get(a.path, a.node),
                p: a.p,
                y: &zeros_y,
                q: a.q,
                k: a.k,
            };
            (sys.drift_p)(t0 + a.t, &s)
        };
        let integrand = |a: &StepArgs<'_>| {
            let s = StateRef {
                x: xs.get(a.path, a.node),
                p: a.p,
                y: &zeros_y,
                q: a.q,
                k: a.k,
            };
            (sys.diffusion_p)(t0 + a.t, &s)
        };
        let problem = BackwardProblem {
            grid,
            m,
            terminal,
            forward_noise: &noise.dw,
            jumps: if j > 0 { Some((&compensated, noise.marks.rates())) } else { None },
            backward_noise: &noise.db,
            projectors: projectors.iter().collect(),
            driver: &driver,
            backward_integrand: &integrand,
        };
        let sol = solve_backward(&problem)?;
        change = mean_square_change(&next_x, &x) + mean_square_change(&sol.p, &p);
        x = next_x;
        p = sol.p;
        q = sol.q;
        k = sol.k;
        if sweep > 1 && change < ens.coupling_tol {
            let value = p.mean_over_paths()[..m].to_vec();
            let err = sol.initial_samples.stderr_over_paths();
            return Ok((value, err, sweep));
        }
    }
    Err(DsdeError::MapDivergence {
        iterations: ens.coupling_max,
        last_distance: change,
    })
}

fn mean_square_change(a: &PathArray, b: &PathArray) -> f64 {
    let paths = a.paths() as f64;
    a.as_slice().iter().zip(b.as_slice()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / paths / a.nodes() as f64
}

/// Spatial domain and resolution of the finite-difference solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub lower: f64,
    pub upper: f64,
    pub space_nodes: usize,
    /// Time steps over `[0, T]`; chosen from the stability bound when absent.
    #[serde(default)]
    pub time_steps: Option<usize>,
    /// Extension of the domain on each side; defaults to `max |h|`.
    #[serde(default)]
    pub padding: Option<f64>,
}

impl FdConfig {
    pub fn new(lower: f64, upper: f64, space_nodes: usize) -> Self {
        Self {
            lower,
            upper,
            space_nodes,
            time_steps: None,
            padding: None,
        }
    }

    /// Same domain with twice the spatial resolution and no fixed step count.
    pub fn refined_space(&self) -> Self {
        Self {
            space_nodes: 2 * self.space_nodes - 1,
            time_steps: None,
            ..*self
        }
    }

    /// Same domain with both spacings halved.
    pub fn refined(&self, coarse_steps: usize) -> Self {
        Self {
            time_steps: Some(2 * coarse_steps),
            ..self.refined_space()
        }
    }
}

/// Finite-difference solution on the padded grid, `values[k * xs.len() + i]`
/// at `(times[k], xs[i])`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdField {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub values: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl FdField {
    pub fn layer(&self, k: usize) -> &[f64] {
        let w = self.xs.len();
        &self.values[k * w..(k + 1) * w]
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Linear interpolation in `x` and `t` inside `[lower, upper]`.
    pub fn value(&self, t: f64, x: f64) -> Result<f64> {
        if !(self.lower - 1e-12..=self.upper + 1e-12).contains(&x) {
            return Err(DsdeError::DomainTooSmall {
                point: x,
                lower: self.lower,
                upper: self.upper,
            });
        }
        let horizon = *self.times.last().unwrap_or(&0.0);
        if !(0.0..=horizon + 1e-12).contains(&t) {
            return Err(DsdeError::InvalidArgument(format!("t = {t} outside [0, {horizon}]")));
        }
        let dt = horizon / self.steps() as f64;
        let s = (t / dt).min(self.steps() as f64);
        let k = (s.floor() as usize).min(self.steps().saturating_sub(1));
        let w = s - k as f64;
        let a = interpolate(&self.xs, self.layer(k), x);
        let b = interpolate(&self.xs, self.layer(k + 1), x);
        Ok((1.0 - w) * a + w * b)
    }
}

/// Piecewise-linear interpolation on a uniform grid, extended linearly
/// beyond the ends.
fn interpolate(xs: &[f64], u: &[f64], x: f64) -> f64 {
    let n = xs.len();
    let dx = xs[1] - xs[0];
    let s = (x - xs[0]) / dx;
    let i = (s.floor().max(0.0) as usize).min(n - 2);
    let w = s - i as f64;
    (1.0 - w) * u[i] + w * u[i + 1]
}

/// Explicit backward-in-time scheme for the scalar PIDE with `G ≡ 0`:
/// central second differences, upwind first differences for the effective
/// drift `f − Σ λ_j h_j`, and the mark sum evaluated by linear interpolation.
/// The first and last nodes are filled by quadratic extrapolation.
/// Padded spatial grid shared by the step-count rule and the solver.
struct FdLayout {
    xs: Vec<f64>,
    dx: f64,
    /// Pad nodes on each side.
    extra: usize,
}

impl FdLayout {
    fn new(sys: &MarkovianSystem, horizon: f64, cfg: &FdConfig) -> Result<Self> {
        let s = &sys.sys;
        let Dims { n, m, .. } = s.dims;
        if n != 1 || m != 1 {
            return Err(DsdeError::InvalidSystem("finite differences need n = m = 1".into()));
        }
        if !sys.backward_forcing_vanishes() {
            return Err(DsdeError::InvalidSystem("finite differences need G = 0".into()));
        }
        if !(cfg.upper > cfg.lower) || cfg.space_nodes < 4 || !(horizon > 0.0) {
            return Err(DsdeError::InvalidArgument(
                "need lower < upper, at least 4 space nodes and a positive horizon".into(),
            ));
        }
        let dx = (cfg.upper - cfg.lower) / (cfg.space_nodes - 1) as f64;
        let pad = match cfg.padding {
            Some(p) if p >= 0.0 => p,
            Some(p) => return Err(DsdeError::InvalidArgument(format!("padding must be nonnegative, got {p}"))),
            None => {
                let mut worst: f64 = 0.0;
                for q in 0..=16 {
                    let t = horizon * q as f64 / 16.0;
                    for i in 0..cfg.space_nodes {
                        for mark in 0..s.dims.j {
                            worst = worst.max(jump_size(s, t, cfg.lower + i as f64 * dx, mark).abs());
                        }
                    }
                }
                worst
            }
        };
        let extra = (pad / dx - 1e-9).ceil().max(0.0) as usize;
        let width = cfg.space_nodes + 2 * extra;
        let x_min = cfg.lower - extra as f64 * dx;
        Ok(Self { xs: (0..width).map(|i| x_min + i as f64 * dx).collect(), dx, extra })
    }

    /// Explicit stability rate `max |g|²/Δx² + |b|/Δx + Σλ` at one time layer.
    fn rate(&self, s: &CoefficientSystem, t: f64, u: &[f64]) -> f64 {
        let rates = s.marks.rates();
        let zeros_y = vec![0.0; s.dims.l];
        let mut worst: f64 = 0.0;
        for i in 1..self.xs.len() - 1 {
            let (a, b) = local_coefficients(s, t, self.xs[i], u, &self.xs, self.dx, rates, i, &zeros_y);
            worst = worst.max(a / (self.dx * self.dx) + b.abs() / self.dx);
        }
        worst + rates.iter().sum::<f64>()
    }

    fn terminal(&self, s: &CoefficientSystem) -> Vec<f64> {
        self.xs.iter().map(|&x| (s.phi)(&[x])[0]).collect()
    }

    fn auto_steps(&self, s: &CoefficientSystem, horizon: f64) -> usize {
        ((horizon * self.rate(s, horizon, &self.terminal(s)) / 0.9).ceil() as usize).max(1)
    }
}

fn jump_size(s: &CoefficientSystem, t: f64, x: f64, mark: usize) -> f64 {
    let Dims { d, l, j, .. } = s.dims;
    let xv = [x];
    let (zy, zq, zk) = (vec![0.0; l], vec![0.0; d], vec![0.0; j]);
    let st = StateRef { x: &xv, p: &[0.0], y: &zy, q: &zq, k: &zk };
    (s.h)(t, &st, mark)[0]
}

/// Time steps the solver picks for `cfg` when none are given: 0.9 of the
/// explicit stability bound at the terminal layer.
pub fn fd_auto_steps(sys: &MarkovianSystem, horizon: f64, cfg: &FdConfig) -> Result<usize> {
    Ok(FdLayout::new(sys, horizon, cfg)?.auto_steps(&sys.sys, horizon))
}

pub fn solve_pide_fd(sys: &MarkovianSystem, horizon: f64, cfg: &FdConfig) -> Result<FdField> {
    let s = &sys.sys;
    let Dims { l, d, j, .. } = s.dims;
    let layout = FdLayout::new(sys, horizon, cfg)?;
    let FdLayout { ref xs, dx, extra } = layout;
    let width = xs.len();
    let rates = s.marks.rates().to_vec();
    let zeros_y = vec![0.0; l];
    let zeros_q = vec![0.0; d];
    let zeros_k = vec![0.0; j];
    let (pad_lo, pad_hi) = (xs[0], xs[width - 1]);
    let terminal = layout.terminal(s);
    let steps = match cfg.time_steps {
        Some(k) if k > 0 => k,
        Some(_) => return Err(DsdeError::InvalidArgument("time_steps must be positive".into())),
        None => layout.auto_steps(s, horizon),
    };
    let dt = horizon / steps as f64;

    let mut values = vec![0.0; (steps + 1) * width];
    values[steps * width..].copy_from_slice(&terminal);
    for k in (0..steps).rev() {
        let t = (k + 1) as f64 * dt;
        let (head, tail) = values.split_at_mut((k + 1) * width);
        let cur = &tail[..width];
        let next = &mut head[k * width..];
        let rate = layout.rate(s, t, cur);
        if dt * rate > 1.0 + 1e-12 {
            return Err(DsdeError::CflViolation {
                required_steps: (horizon * rate).ceil() as usize,
                max_dt: 1.0 / rate,
            });
        }
        for i in 1..width - 1 {
            let x = xs[i];
            let u = cur[i];
            let ux = (cur[i + 1] - cur[i - 1]) / (2.0 * dx);
            let uxx = (cur[i + 1] - 2.0 * u + cur[i - 1]) / (dx * dx);
            let xv = [x];
            let pv = [u];
            let bare = StateRef { x: &xv, p: &pv, y: &zeros_y, q: &zeros_q, k: &zeros_k };
            let g = (s.g)(t, &bare);
            let diff: f64 = g.iter().map(|v| v * v).sum();
            let q: Vec<f64> = g.iter().map(|v| ux * v).collect();
            let mut kv = vec![0.0; j];
            let mut jump = 0.0;
            let mut compensator = 0.0;
            let interior = i >= extra && i < extra + cfg.space_nodes;
            for mark in 0..j {
                let h = jump_size(s, t, x, mark);
                let target = x + h;
                if interior && !(pad_lo - 1e-12..=pad_hi + 1e-12).contains(&target) {
                    return Err(DsdeError::DomainTooSmall {
                        point: target,
                        lower: pad_lo,
                        upper: pad_hi,
                    });
                }
                kv[mark] = interpolate(xs, cur, target) - u;
                jump += rates[mark] * kv[mark];
                compensator += rates[mark] * h;
            }
            let st = StateRef { x: &xv, p: &pv, y: &zeros_y, q: &q, k: &kv };
            let b = (s.f)(t, &st)[0] - compensator;
            let upwind = if b > 0.0 { (cur[i + 1] - u) / dx } else { (u - cur[i - 1]) / dx };
            let big_f = (s.drift_p)(t, &st)[0];
            next[i] = u + dt * (0.5 * diff * uxx + b * upwind + jump - big_f);
        }
        next[0] = 3.0 * next[1] - 3.0 * next[2] + next[3];
        next[width - 1] = 3.0 * next[width - 2] - 3.0 * next[width - 3] + next[width - 4];
        if next[..width].iter().any(|v| !v.is_finite()) {
            return Err(DsdeError::NumericalBlowup {
                step: k,
                detail: "finite-difference layer is not finite".into(),
            });
        }
    }
    Ok(FdField {
        times: (0..=steps).map(|k| k as f64 * dt).collect(),
        xs: layout.xs,
        values,
        lower: cfg.lower,
        upper: cfg.upper,
    })
}

/// Diffusion `|g|²` and effective drift `f − Σ λ_j h_j` at node `i`.
#[allow(clippy::too_many_arguments)]
fn local_coefficients(
    s: &CoefficientSystem,
    t: f64,
    x: f64,
    u: &[f64],
    xs: &[f64],
    dx: f64,
    rates: &[f64],
    i: usize,
    zeros_y: &[f64],
) -> (f64, f64) {
    let Dims { d, j, .. } = s.dims;
    let xv = [x];
    let pv = [u[i]];
    let zq = vec![0.0; d];
    let zk = vec![0.0; j];
    let bare = StateRef { x: &xv, p: &pv, y: zeros_y, q: &zq, k: &zk };
    let g = (s.g)(t, &bare);
    let ux = (u[i + 1] - u[i - 1]) / (2.0 * dx);
    let q: Vec<f64> = g.iter().map(|v| ux * v).collect();
    let mut kv = vec![0.0; j];
    let mut compensator = 0.0;
    for mark in 0..j {
        let h = (s.h)(t, &bare, mark)[0];
        kv[mark] = interpolate(xs, u, x + h) - u[i];
        compensator += rates[mark] * h;
    }
    let st = StateRef { x: &xv, p: &pv, y: zeros_y, q: &q, k: &kv };
    let b = (s.f)(t, &st)[0] - compensator;
    (g.iter().map(|v| v * v).sum(), b)
}

/// One row of [`compare_feynman_kac`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub t: f64,
    pub x: f64,
    pub monte_carlo: f64,
    pub stderr: f64,
    pub finite_difference: f64,
    /// `|fine − coarse|` between the two finite-difference grids.
    pub fd_error: f64,
    pub difference: f64,
    pub tolerance: f64,
}

impl ErrorRow {
    pub fn within(&self) -> bool {
        self.difference <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorTable {
    pub rows: Vec<ErrorRow>,
}

impl ErrorTable {
    pub fn all_within(&self) -> bool {
        self.rows.iter().all(ErrorRow::within)
    }
}

/// Compares the Monte Carlo estimate with a Richardson-extrapolated
/// finite-difference value (`2·fine − coarse`) at each `(t, x)`; the
/// tolerance is `3·stderr + |fine − coarse|`.
pub fn compare_feynman_kac(
    sys: &MarkovianSystem,
    points: &[(f64, f64)],
    grid: TimeGrid,
    ens: &EnsembleConfig,
    reg: &RegressionConfig,
    fd: &FdConfig,
) -> Result<ErrorTable> {
    let horizon = grid.horizon();
    // Both spacings halve together so the first-order error terms cancel in
    // the extrapolation; the coarse step count is raised until the halved
    // step is stable on the fine grid.
    let coarse_steps = match fd.time_steps {
        Some(k) => k,
        None => fd_auto_steps(sys, horizon, fd)?.max(fd_auto_steps(sys, horizon, &fd.refined_space())?.div_ceil(2)),
    };
    let coarse = solve_pide_fd(sys, horizon, &FdConfig { time_steps: Some(coarse_steps), ..*fd })?;
    let fine = solve_pide_fd(sys, horizon, &fd.refined(coarse_steps))?;
    let rows = points
        .par_iter()
        .map(|&(t, x)| {
            let mc = evaluate_u(sys, t, &[x], grid, ens, reg)?;
            let (c, f) = (coarse.value(t, x)?, fine.value(t, x)?);
            let fd_value = 2.0 * f - c;
            let fd_error = (f - c).abs();
            Ok(ErrorRow {
                t,
                x,
                monte_carlo: mc.value[0],
                stderr: mc.stderr[0],
                finite_difference: fd_value,
                fd_error,
                difference: (mc.value[0] - fd_value).abs(),
                tolerance: 3.0 * mc.stderr[0] + fd_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorTable { rows })
}
