//! Backward induction for the decoupled doubly stochastic equation with
//! jumps, with conditional expectations estimated by least-squares regression
//! on polynomial features.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DsdeError, Result};
use crate::paths::PathArray;
use crate::randomness::TimeGrid;

/// Estimator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionConfig {
    pub basis_degree: usize,
    pub ridge: f64,
    pub min_paths_per_coefficient: usize,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            basis_degree: 2,
            ridge: 1e-8,
            min_paths_per_coefficient: 4,
        }
    }
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return Err(DsdeError::InvalidArgument(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        if self.min_paths_per_coefficient == 0 {
            return Err(DsdeError::InvalidArgument("min_paths_per_coefficient must be >= 1".into()));
        }
        Ok(())
    }
}

const CHUNK: usize = 4096;

/// Multi-indices of total degree `≤ degree` in `vars` variables, intercept first.
pub fn monomial_exponents(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0u32; vars];
        fill(&mut out, &mut cur, 0, total as u32);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut [u32], pos: usize, left: u32) {
    if pos == cur.len() {
        if left == 0 {
            out.push(cur.to_vec());
        }
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

enum Solver {
    Cholesky(Cholesky<f64, nalgebra::Dyn>),
    Pseudo(DMatrix<f64>),
}

/// Least-squares projection onto a polynomial basis of fixed features.
///
/// The basis matrix and the factorization of the regularized Gram matrix are
/// computed once, so the same projector can be applied to any number of
/// target batches.
pub struct Projector {
    paths: usize,
    columns: Vec<usize>,
    exponents: Vec<Vec<u32>>,
    /// `paths × basis`, row-major.
    basis: Vec<f64>,
    solver: Solver,
    condition: f64,
}

impl std::fmt::Debug for Projector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Projector")
            .field("paths", &self.paths)
            .field("columns", &self.columns)
            .field("basis", &self.exponents.len())
            .field("condition", &self.condition)
            .finish()
    }
}

fn basis_row(feats: &[f64], exponents: &[Vec<u32>], degree: usize, out: &mut [f64], powers: &mut Vec<f64>) {
    let stride = degree + 1;
    powers.clear();
    powers.resize(feats.len() * stride, 1.0);
    for (c, v) in feats.iter().enumerate() {
        for e in 1..=degree {
            powers[c * stride + e] = powers[c * stride + e - 1] * v;
        }
    }
    for (o, ex) in out.iter_mut().zip(exponents) {
        *o = ex
            .iter()
            .enumerate()
            .map(|(c, &e)| powers[c * stride + e as usize])
            .product();
    }
}

impl Projector {
    /// `features` is `paths × width` row-major.
    pub fn new(features: &[f64], width: usize, cfg: &RegressionConfig) -> Result<Self> {
        cfg.validate()?;
        if width == 0 {
            return Err(DsdeError::InvalidArgument(
                "feature width must be positive; use Projector::mean".into(),
            ));
        }
        if !features.len().is_multiple_of(width) {
            return Err(DsdeError::ShapeMismatch("feature buffer is not paths x width".into()));
        }
        Self::build(features, features.len() / width, width, cfg)
    }

    /// A projector with no features (plain path mean).
    pub fn mean(paths: usize, cfg: &RegressionConfig) -> Result<Self> {
        cfg.validate()?;
        Self::build(&[], paths, 0, cfg)
    }

    fn build(features: &[f64], paths: usize, width: usize, cfg: &RegressionConfig) -> Result<Self> {
        if paths == 0 {
            return Err(DsdeError::InsufficientPaths {
                required: cfg.min_paths_per_coefficient,
                available: 0,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(DsdeError::InvalidData("non-finite regression feature".into()));
        }
        let n = paths as f64;
        let columns: Vec<usize> = (0..width)
            .filter(|&c| {
                let mean = (0..paths).map(|p| features[p * width + c]).sum::<f64>() / n;
                let var = (0..paths)
                    .map(|p| (features[p * width + c] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                var > 1e-14 * (1.0 + mean * mean)
            })
            .collect();
        let exponents = monomial_exponents(columns.len(), cfg.basis_degree);
        let b = exponents.len();
        let required = cfg.min_paths_per_coefficient * b;
        if paths < required {
            return Err(DsdeError::InsufficientPaths {
                required,
                available: paths,
            });
        }
        let mut basis = vec![0.0; paths * b];
        let mut feats = vec![0.0; columns.len()];
        let mut scratch = Vec::new();
        for p in 0..paths {
            for (f, &c) in feats.iter_mut().zip(&columns) {
                *f = features[p * width + c];
            }
            basis_row(&feats, &exponents, cfg.basis_degree, &mut basis[p * b..(p + 1) * b], &mut scratch);
        }
        let mut proj = Self {
            paths,
            columns,
            exponents,
            basis,
            solver: Solver::Pseudo(DMatrix::zeros(0, 0)),
            condition: 1.0,
        };
        let mut gram = proj.cross(&proj.basis, b);
        for i in 1..b {
            gram[(i, i)] += cfg.ridge;
        }
        let eig = SymmetricEigen::new(gram.clone()).eigenvalues;
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(v.abs())));
        proj.condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        proj.solver = match Cholesky::new(gram.clone()) {
            Some(ch) if proj.condition < 1e14 => Solver::Cholesky(ch),
            _ => {
                let svd = gram.svd(true, true);
                Solver::Pseudo(svd.pseudo_inverse(1e-12 * hi.max(1e-300)).map_err(|e| {
                    DsdeError::InvalidData(format!("regression pseudo-inverse failed: {e}"))
                })?)
            }
        };
        Ok(proj)
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn basis_size(&self) -> usize {
        self.exponents.len()
    }

    /// Exponents of the basis monomials, in terms of the kept feature columns.
    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    /// Indices of the feature columns that were not constant.
    pub fn kept_columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    /// `(1/paths) Σ_p basis(p)ᵀ · row(p)`, summed in fixed chunks combined in
    /// chunk order so the result does not depend on the thread count.
    fn cross(&self, rows: &[f64], width: usize) -> DMatrix<f64> {
        let b = self.basis_size();
        let starts: Vec<usize> = (0..self.paths).step_by(CHUNK).collect();
        let partials: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let mut acc = vec![0.0; b * width];
                for p in s..(s + CHUNK).min(self.paths) {
                    let phi = &self.basis[p * b..(p + 1) * b];
                    let r = &rows[p * width..(p + 1) * width];
                    for (i, pi) in phi.iter().enumerate() {
                        let a = &mut acc[i * width..(i + 1) * width];
                        for (o, rv) in a.iter_mut().zip(r) {
                            *o += pi * rv;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; b * width];
        for part in partials {
            for (t, v) in total.iter_mut().zip(part) {
                *t += v;
            }
        }
        DMatrix::from_row_slice(b, width, &total) / self.paths as f64
    }

    /// Coefficients (`basis × width`) for a `paths × width` target batch.
    pub fn coefficients(&self, targets: &[f64], width: usize) -> Result<DMatrix<f64>> {
        if targets.len() != self.paths * width {
            return Err(DsdeError::ShapeMismatch(format!(
                "targets have {} values, expected {}x{width}",
                targets.len(),
                self.paths
            )));
        }
        if targets.iter().any(|v| !v.is_finite()) {
            return Err(DsdeError::InvalidData("non-finite regression target".into()));
        }
        let rhs = self.cross(targets, width);
        Ok(match &self.solver {
            Solver::Cholesky(ch) => ch.solve(&rhs),
            Solver::Pseudo(pinv) => pinv * rhs,
        })
    }

    /// Fitted values (`paths × width`, row-major) for a target batch.
    pub fn project(&self, targets: &[f64], width: usize) -> Result<Vec<f64>> {
        let beta = self.coefficients(targets, width)?;
        let b = self.basis_size();
        // row-major copy so the inner loop is contiguous
        let beta_rows: Vec<f64> = (0..b).flat_map(|i| (0..width).map(move |c| (i, c))).map(|(i, c)| beta[(i, c)]).collect();
        let w = width.max(1);
        let mut out = vec![0.0; self.paths * width];
        out.par_chunks_mut(w * CHUNK)
            .enumerate()
            .for_each(|(chunk, rows)| {
                for (offset, row) in rows.chunks_mut(w).enumerate() {
                    let p = chunk * CHUNK + offset;
                    let phi = &self.basis[p * b..(p + 1) * b];
                    for (i, pi) in phi.iter().enumerate() {
                        for (o, bv) in row.iter_mut().zip(&beta_rows[i * width..(i + 1) * width]) {
                            *o += pi * bv;
                        }
                    }
                }
            });
        Ok(out)
    }
}

/// Result of a single regression.
#[derive(Debug, Clone, PartialEq)]
pub struct Regression {
    /// Exponents of the basis monomials over the kept feature columns.
    pub exponents: Vec<Vec<u32>>,
    pub kept_columns: Vec<usize>,
    /// `basis × width`.
    pub coefficients: DMatrix<f64>,
    /// `paths × width`, row-major.
    pub fitted: Vec<f64>,
}

/// Ridge least-squares fit of `targets` (`paths × width`) on a total-degree
/// polynomial basis of `features` (`paths × feature_width`).
pub fn regress_conditional(
    targets: &[f64],
    width: usize,
    features: &[f64],
    feature_width: usize,
    cfg: &RegressionConfig,
) -> Result<Regression> {
    let proj = if feature_width == 0 {
        Projector::mean(targets.len() / width.max(1), cfg)?
    } else {
        Projector::new(features, feature_width, cfg)?
    };
    let coefficients = proj.coefficients(targets, width)?;
    let fitted = proj.project(targets, width)?;
    Ok(Regression {
        exponents: proj.exponents.clone(),
        kept_columns: proj.columns.clone(),
        coefficients,
        fitted,
    })
}

/// One projector per node of `features` (`paths × nodes × width`).
pub fn build_projectors(features: &PathArray, cfg: &RegressionConfig) -> Result<Vec<Projector>> {
    (0..features.nodes())
        .map(|i| {
            if features.width() == 0 {
                Projector::mean(features.paths(), cfg)
            } else {
                Projector::new(&features.node_slice(i), features.width(), cfg)
            }
        })
        .collect()
}

/// Arguments handed to drivers at one `(path, node)`.
#[derive(Debug, Clone, Copy)]
pub struct StepArgs<'a> {
    pub node: usize,
    pub t: f64,
    pub path: usize,
    pub p: &'a [f64],
    /// `m × d` row-major.
    pub q: &'a [f64],
    /// `J × m` mark-major.
    pub k: &'a [f64],
}

pub type Driver<'a> = &'a (dyn Fn(&StepArgs<'_>) -> Vec<f64> + Sync);

/// A backward equation
/// `P_i = P_T − Σ F Δt − Σ G_{+}ΔB − Σ Q ΔW − Σ K ΔÑ` on an ensemble.
///
/// `forward_noise` (`paths × N × d`) is the martingale driver represented by
/// `Q`; `jumps` holds compensated increments (`paths × N × J`) and their
/// rates; `backward_noise` (`paths × N × l`) is integrated with the
/// integrand evaluated at the right endpoint. `projectors[i]` estimates the
/// conditional expectation at node `i`.
pub struct BackwardProblem<'a> {
    pub grid: TimeGrid,
    pub m: usize,
    /// `paths × m`.
    pub terminal: Vec<f64>,
    pub forward_noise: &'a PathArray,
    pub jumps: Option<(&'a PathArray, &'a [f64])>,
    pub backward_noise: &'a PathArray,
    pub projectors: Vec<&'a Projector>,
    /// `F`, returns `m` values.
    pub driver: Driver<'a>,
    /// `G`, returns `m × l` row-major.
    pub backward_integrand: Driver<'a>,
}

/// Per-step regression diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub node: usize,
    pub r_squared: f64,
    pub condition: f64,
}

/// `P` (`paths × (N+1) × m`), `Q` (`m·d`), `K` (`J·m` mark-major).
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub p: PathArray,
    pub q: PathArray,
    pub k: PathArray,
    pub diagnostics: Vec<StepDiagnostics>,
    /// Per-path unbiased samples of `P_0`: `ξ − Σ F_i Δt − Σ G_{i+1} ΔB_i`.
    pub initial_samples: PathArray,
}

impl BackwardSolution {
    /// Monte Carlo mean and standard error of `P_0` from the pathwise samples.
    pub fn initial_estimate(&self) -> (Vec<f64>, Vec<f64>) {
        (
            self.initial_samples.mean_over_paths(),
            self.initial_samples.stderr_over_paths(),
        )
    }
}

fn r_squared(target: &[f64], fitted: &[f64], width: usize, cols: usize) -> f64 {
    let paths = target.len() / width;
    let (mut ss_res, mut ss_tot) = (0.0, 0.0);
    for c in 0..cols {
        let mean = (0..paths).map(|p| target[p * width + c]).sum::<f64>() / paths as f64;
        for p in 0..paths {
            let t = target[p * width + c];
            ss_res += (t - fitted[p * width + c]).powi(2);
            ss_tot += (t - mean).powi(2);
        }
    }
    if ss_tot <= 1e-300 {
        1.0
    } else {
        1.0 - ss_res / ss_tot
    }
}

pub fn solve_backward(problem: &BackwardProblem<'_>) -> Result<BackwardSolution> {
    let grid = problem.grid;
    let (n, m) = (grid.steps(), problem.m);
    let paths = problem.forward_noise.paths();
    let d = problem.forward_noise.width();
    let l = problem.backward_noise.width();
    let (jump_incr, rates): (Option<&PathArray>, &[f64]) = match problem.jumps {
        Some((a, r)) => (Some(a), r),
        None => (None, &[]),
    };
    let nj = rates.len();
    let dt = grid.dt();
    check_shape(problem.forward_noise, paths, n, "forward noise")?;
    check_shape(problem.backward_noise, paths, n, "backward noise")?;
    if let Some(a) = jump_incr {
        check_shape(a, paths, n, "jump increments")?;
        if a.width() != nj {
            return Err(DsdeError::ShapeMismatch("jump increments and rates disagree".into()));
        }
    }
    if problem.terminal.len() != paths * m {
        return Err(DsdeError::ShapeMismatch(format!(
            "terminal has {} values, expected {paths}x{m}",
            problem.terminal.len()
        )));
    }
    if problem.projectors.len() != n + 1 || problem.projectors.iter().any(|p| p.paths() != paths) {
        return Err(DsdeError::ShapeMismatch("need one projector per node over the same paths".into()));
    }
    if problem.terminal.iter().any(|v| !v.is_finite()) {
        return Err(DsdeError::NumericalBlowup {
            step: n,
            detail: "non-finite terminal value".into(),
        });
    }

    let mut p_arr = PathArray::zeros(paths, n + 1, m);
    let mut q_arr = PathArray::zeros(paths, n + 1, m * d);
    let mut k_arr = PathArray::zeros(paths, n + 1, nj * m);
    p_arr.set_node_slice(n, &problem.terminal);
    let mut samples = problem.terminal.clone();
    let mut diagnostics = Vec::with_capacity(n);
    let width = m * (1 + d + nj);

    for i in (0..n).rev() {
        let t_next = grid.node(i + 1);
        let mut first = vec![0.0; paths * m];
        let mut gterms = vec![0.0; paths * m];
        first
            .par_chunks_mut(m.max(1))
            .zip(gterms.par_chunks_mut(m.max(1)))
            .enumerate()
            .for_each(|(path, (row, gterm))| {
                let pn = p_arr.get(path, i + 1);
                if l > 0 {
                    let args = StepArgs {
                        node: i + 1,
                        t: t_next,
                        path,
                        p: pn,
                        q: q_arr.get(path, i + 1),
                        k: k_arr.get(path, i + 1),
                    };
                    let gmat = (problem.backward_integrand)(&args);
                    let db = problem.backward_noise.get(path, i);
                    for r in 0..m {
                        gterm[r] = (0..l).map(|c| gmat[r * l + c] * db[c]).sum();
                    }
                }
                for r in 0..m {
                    row[r] = pn[r] - gterm[r];
                }
            });
        for (s, g) in samples.iter_mut().zip(&gterms) {
            *s -= g;
        }
        let proj = problem.projectors[i];
        let p_hat = proj.project(&first, m)?;
        diagnostics.push(StepDiagnostics {
            node: i,
            r_squared: r_squared(&first, &p_hat, m, m),
            condition: proj.condition_number(),
        });
        // martingale parts regress the first-stage residual
        // (P_{i+1} − G_{i+1}ΔB_i − P̂_i)·increment; subtracting the conditional
        // mean leaves the expectation unchanged and removes its noise
        let rest_width = width - m;
        let mut fitted = vec![0.0; paths * width];
        if rest_width > 0 {
            let mut targets = vec![0.0; paths * rest_width];
            targets.par_chunks_mut(rest_width).enumerate().for_each(|(path, row)| {
                let centred: Vec<f64> = (0..m).map(|r| first[path * m + r] - p_hat[path * m + r]).collect();
                let dw = problem.forward_noise.get(path, i);
                for r in 0..m {
                    for (c, w) in dw.iter().enumerate() {
                        row[r * d + c] = centred[r] * w;
                    }
                }
                if let Some(a) = jump_incr {
                    let base = m * d;
                    for (j, dnj) in a.get(path, i).iter().enumerate() {
                        for r in 0..m {
                            row[base + j * m + r] = centred[r] * dnj;
                        }
                    }
                }
            });
            let rest = proj.project(&targets, rest_width)?;
            for path in 0..paths {
                fitted[path * width + m..(path + 1) * width]
                    .copy_from_slice(&rest[path * rest_width..(path + 1) * rest_width]);
            }
        }
        for path in 0..paths {
            fitted[path * width..path * width + m].copy_from_slice(&p_hat[path * m..(path + 1) * m]);
        }
        let t = grid.node(i);
        // rescale in place: fitted becomes [P̂ | Q | K]
        let mut drifts = vec![0.0; paths * m];
        fitted
            .par_chunks_mut(width)
            .zip(drifts.par_chunks_mut(m.max(1)))
            .enumerate()
            .for_each(|(path, (row, drift_out))| {
                for v in &mut row[m..m + m * d] {
                    *v /= dt;
                }
                for j in 0..nj {
                    let scale = rates[j] * dt;
                    for v in &mut row[m + m * d + j * m..m + m * d + (j + 1) * m] {
                        *v /= scale;
                    }
                }
                let (p_hat, rest) = row.split_at_mut(m);
                let (q, k) = rest.split_at(m * d);
                let args = StepArgs {
                    node: i,
                    t,
                    path,
                    p: p_hat,
                    q,
                    k,
                };
                let drift = (problem.driver)(&args);
                drift_out.copy_from_slice(&drift[..m]);
                for (pv, dv) in p_hat.iter_mut().zip(&drift) {
                    *pv -= dv * dt;
                }
            });
        if let Some(path) = (0..paths).find(|&p| {
            fitted[p * width..(p + 1) * width]
                .iter()
                .any(|v| !v.is_finite())
        }) {
            return Err(DsdeError::NumericalBlowup {
                step: i,
                detail: format!("non-finite value on path {path}"),
            });
        }
        for path in 0..paths {
            let row = &fitted[path * width..(path + 1) * width];
            p_arr.get_mut(path, i).copy_from_slice(&row[..m]);
            q_arr.get_mut(path, i).copy_from_slice(&row[m..m + m * d]);
            k_arr.get_mut(path, i).copy_from_slice(&row[m + m * d..]);
            for r in 0..m {
                samples[path * m + r] -= drifts[path * m + r] * dt;
            }
        }
    }
    for path in 0..paths {
        let q = q_arr.get(path, n.saturating_sub(1)).to_vec();
        q_arr.get_mut(path, n).copy_from_slice(&q);
        let k = k_arr.get(path, n.saturating_sub(1)).to_vec();
        k_arr.get_mut(path, n).copy_from_slice(&k);
    }
    diagnostics.reverse();
    Ok(BackwardSolution {
        p: p_arr,
        q: q_arr,
        k: k_arr,
        diagnostics,
        initial_samples: PathArray::from_vec(paths, 1, m, samples)?,
    })
}

fn check_shape(a: &PathArray, paths: usize, steps: usize, what: &str) -> Result<()> {
    if a.paths() != paths || a.nodes() != steps {
        return Err(DsdeError::ShapeMismatch(format!(
            "{what} has shape {:?}, expected {paths} paths over {steps} intervals",
            a.shape()
        )));
    }
    Ok(())
}
