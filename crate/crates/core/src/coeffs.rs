//! Coefficient systems for the coupled equation and sample-based checks of
//! the monotonicity and Lipschitz conditions.
//!
//! State layout: `x` (n), `p` (m), `y` (n×l row-major), `q` (m×d row-major),
//! `k` (J×m, mark-major so `k[j*m..(j+1)*m]` is `K(z_j)`).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DsdeError, Result};
use crate::randomness::{stream_rng, MarkSpace};

/// Borrowed view of a state `(X, P, Y, Q, K)`.
#[derive(Debug, Clone, Copy)]
pub struct StateRef<'a> {
    pub x: &'a [f64],
    pub p: &'a [f64],
    pub y: &'a [f64],
    pub q: &'a [f64],
    pub k: &'a [f64],
}

/// Owned state `(X, P, Y, Q, K)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct State {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub y: Vec<f64>,
    pub q: Vec<f64>,
    pub k: Vec<f64>,
}

impl State {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            x: vec![0.0; dims.n],
            p: vec![0.0; dims.m],
            y: vec![0.0; dims.n * dims.l],
            q: vec![0.0; dims.m * dims.d],
            k: vec![0.0; dims.j * dims.m],
        }
    }

    pub fn as_ref(&self) -> StateRef<'_> {
        StateRef {
            x: &self.x,
            p: &self.p,
            y: &self.y,
            q: &self.q,
            k: &self.k,
        }
    }

    fn map(&self, other: &Self, op: impl Fn(f64, f64) -> f64) -> Self {
        let z = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| op(*u, *v)).collect();
        Self {
            x: z(&self.x, &other.x),
            p: z(&self.p, &other.p),
            y: z(&self.y, &other.y),
            q: z(&self.q, &other.q),
            k: z(&self.k, &other.k),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(self, |a, _| s * a)
    }

    pub fn minus(&self, other: &Self) -> Self {
        self.map(other, |a, b| a - b)
    }
}

/// Dimensions `n` (forward state), `m` (backward state), `d` (W), `l` (B), `j` (marks).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub l: usize,
    pub j: usize,
}

/// Structural constants of the monotonicity and Lipschitz conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constants {
    pub mu1: f64,
    pub mu2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub c: f64,
    pub gamma: f64,
}

pub type StateFn = Arc<dyn Fn(f64, &StateRef<'_>) -> Vec<f64> + Send + Sync>;
pub type MarkFn = Arc<dyn Fn(f64, &StateRef<'_>, usize) -> Vec<f64> + Send + Sync>;
pub type BoundaryFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// The coefficient bundle `(f, g, h, F, G, Ψ, Φ)` with the coupling matrix `H`.
///
/// `g` returns an `n × d` matrix and `G` an `m × l` matrix, both row-major;
/// `h(t, U, j)` is the forward jump size for mark `j`.
#[derive(Clone)]
pub struct CoefficientSystem {
    pub dims: Dims,
    pub marks: MarkSpace,
    pub f: StateFn,
    pub g: StateFn,
    pub h: MarkFn,
    pub drift_p: StateFn,
    pub diffusion_p: StateFn,
    pub psi: BoundaryFn,
    pub phi: BoundaryFn,
    pub coupling: DMatrix<f64>,
    pub constants: Constants,
    pub deterministic: bool,
}

impl fmt::Debug for CoefficientSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSystem")
            .field("dims", &self.dims)
            .field("marks", &self.marks)
            .field("coupling", &self.coupling)
            .field("constants", &self.constants)
            .finish_non_exhaustive()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

impl CoefficientSystem {
    /// Checks dimensions, the rank of `H` and the constant conditions.
    pub fn validate(&self) -> Result<()> {
        let Dims { n, m, j, .. } = self.dims;
        if n == 0 || m == 0 {
            return Err(DsdeError::InvalidSystem("state dimensions must be positive".into()));
        }
        if j != self.marks.len() {
            return Err(DsdeError::InvalidSystem(format!(
                "dims declare {j} marks but the mark space has {}",
                self.marks.len()
            )));
        }
        if self.coupling.shape() != (m, n) {
            return Err(DsdeError::InvalidSystem(format!(
                "coupling matrix must be {m}x{n}, got {:?}",
                self.coupling.shape()
            )));
        }
        let rank = self.coupling.rank(1e-10);
        if rank != m.min(n) {
            return Err(DsdeError::InvalidSystem(format!(
                "coupling matrix has rank {rank}, expected {}",
                m.min(n)
            )));
        }
        let Constants {
            mu1,
            mu2,
            beta1,
            beta2,
            c,
            gamma,
        } = self.constants;
        let all = [mu1, mu2, beta1, beta2, c, gamma];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DsdeError::InvalidSystem("constants must be finite and nonnegative".into()));
        }
        if gamma >= 1.0 {
            return Err(DsdeError::InvalidSystem(format!("gamma must be < 1, got {gamma}")));
        }
        if !(mu1 + mu2 > 0.0 && beta1 + beta2 > 0.0 && mu1 + beta2 > 0.0 && mu2 + beta1 > 0.0) {
            return Err(DsdeError::InvalidSystem(
                "need mu1+mu2, beta1+beta2, mu1+beta2 and mu2+beta1 all positive".into(),
            ));
        }
        if m > n && !(mu1 > 0.0 && beta1 > 0.0) {
            return Err(DsdeError::InvalidSystem("m > n requires mu1 > 0 and beta1 > 0".into()));
        }
        if n > m && !(mu2 > 0.0 && beta2 > 0.0) {
            return Err(DsdeError::InvalidSystem("n > m requires mu2 > 0 and beta2 > 0".into()));
        }
        Ok(())
    }

    pub fn check_state(&self, u: &StateRef<'_>) -> Result<()> {
        let Dims { n, m, d, l, j } = self.dims;
        let want = [n, m, n * l, m * d, j * m];
        let got = [u.x.len(), u.p.len(), u.y.len(), u.q.len(), u.k.len()];
        if want != got {
            return Err(DsdeError::ShapeMismatch(format!(
                "state component lengths {got:?}, expected {want:?}"
            )));
        }
        Ok(())
    }

    /// Same system with every coefficient negated (`H` and constants kept).
    pub fn negated(&self) -> Self {
        let neg = |v: Vec<f64>| v.into_iter().map(|x| -x).collect::<Vec<_>>();
        let (f, g, big_f, big_g) = (
            self.f.clone(),
            self.g.clone(),
            self.drift_p.clone(),
            self.diffusion_p.clone(),
        );
        let (h, psi, phi) = (self.h.clone(), self.psi.clone(), self.phi.clone());
        Self {
            f: Arc::new(move |t, u| neg(f(t, u))),
            g: Arc::new(move |t, u| neg(g(t, u))),
            h: Arc::new(move |t, u, j| neg(h(t, u, j))),
            drift_p: Arc::new(move |t, u| neg(big_f(t, u))),
            diffusion_p: Arc::new(move |t, u| neg(big_g(t, u))),
            psi: Arc::new(move |p| neg(psi(p))),
            phi: Arc::new(move |x| neg(phi(x))),
            ..self.clone()
        }
    }

    fn h_mul(&self, v: &[f64]) -> Vec<f64> {
        (&self.coupling * DVector::from_column_slice(v)).as_slice().to_vec()
    }

    fn ht_mul(&self, v: &[f64]) -> Vec<f64> {
        (self.coupling.transpose() * DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    /// Applies `H` to every column of a row-major `n × cols` block.
    fn h_cols(&self, block: &[f64], cols: usize) -> Vec<f64> {
        let b = DMatrix::from_row_slice(self.dims.n, cols, block);
        let r = &self.coupling * b;
        r.transpose().as_slice().to_vec()
    }

    /// Applies `Hᵀ` to every column of a row-major `m × cols` block.
    fn ht_cols(&self, block: &[f64], cols: usize) -> Vec<f64> {
        let b = DMatrix::from_row_slice(self.dims.m, cols, block);
        let r = self.coupling.transpose() * b;
        r.transpose().as_slice().to_vec()
    }

    /// `⟨A(t,U) − A(t,Ū), U − Ū⟩`.
    pub fn pairing(&self, t: f64, u: &State, ubar: &State) -> Result<f64> {
        Ok(self.pairing_terms(t, u, ubar)?.iter().sum())
    }

    fn pairing_terms(&self, t: f64, u: &State, ubar: &State) -> Result<[f64; 5]> {
        let (a, b) = (u.as_ref(), ubar.as_ref());
        self.check_state(&a)?;
        self.check_state(&b)?;
        let Dims { m, d, l, .. } = self.dims;
        let diff = u.minus(ubar);
        let sub = |p: Vec<f64>, q: Vec<f64>| p.iter().zip(&q).map(|(x, y)| x - y).collect::<Vec<_>>();
        let df = sub((self.f)(t, &a), (self.f)(t, &b));
        let dg = sub((self.g)(t, &a), (self.g)(t, &b));
        let dbf = sub((self.drift_p)(t, &a), (self.drift_p)(t, &b));
        let dbg = sub((self.diffusion_p)(t, &a), (self.diffusion_p)(t, &b));
        let mut jump = 0.0;
        for j in 0..self.marks.len() {
            let dh = sub((self.h)(t, &a, j), (self.h)(t, &b, j));
            jump += self.marks.rate(j) * dot(&diff.k[j * m..(j + 1) * m], &self.h_mul(&dh));
        }
        Ok([
            dot(&diff.x, &self.ht_mul(&dbf)),
            dot(&diff.p, &self.h_mul(&df)),
            if l > 0 { dot(&diff.y, &self.ht_cols(&dbg, l)) } else { 0.0 },
            if d > 0 { dot(&diff.q, &self.h_cols(&dg, d)) } else { 0.0 },
            jump,
        ])
    }

    /// `‖K‖² = Σ_j λ_j |K(z_j)|²` for an `m`-valued mark-major vector.
    pub fn mark_norm_sq(&self, k: &[f64]) -> f64 {
        let m = self.dims.m;
        (0..self.marks.len())
            .map(|j| self.marks.rate(j) * norm_sq(&k[j * m..(j + 1) * m]))
            .sum()
    }
}

/// Settings for the random pair sampler used by all checkers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub samples: usize,
    pub radii: Vec<f64>,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            samples: 3000,
            radii: vec![0.1, 1.0, 10.0],
            horizon: 1.0,
            seed: 0,
        }
    }
}

/// One sampled pair at which a margin was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplePair {
    pub t: f64,
    pub u: State,
    pub ubar: State,
}

/// Evidence record for one inequality over a sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginReport {
    pub samples_tested: usize,
    pub min_margin: f64,
    pub worst_case: Option<SamplePair>,
    pub violation_count: usize,
}

impl MarginReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }

    fn from_margins(pairs: Vec<SamplePair>, margins: &[f64]) -> Self {
        let mut worst = None;
        let mut min_margin = f64::INFINITY;
        for (i, &m) in margins.iter().enumerate() {
            if m < min_margin || worst.is_none() {
                min_margin = m;
                worst = Some(i);
            }
        }
        Self {
            samples_tested: margins.len(),
            min_margin,
            violation_count: margins.iter().filter(|m| **m < 0.0).count(),
            worst_case: worst.map(|i| pairs[i].clone()),
        }
    }
}

/// Collapses rounding noise around an equality case to an exact zero.
fn snap(margin: f64, scale: f64) -> f64 {
    if margin.abs() <= 1e-12 * scale.max(1e-300) {
        0.0
    } else {
        margin
    }
}

fn random_state(dims: Dims, radius: f64, rng: &mut impl Rng) -> State {
    let mut draw = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|_| radius * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    State {
        x: draw(dims.n),
        p: draw(dims.m),
        y: draw(dims.n * dims.l),
        q: draw(dims.m * dims.d),
        k: draw(dims.j * dims.m),
    }
}

fn sample_pairs(dims: Dims, cfg: &SamplerConfig) -> Vec<SamplePair> {
    let radii = if cfg.radii.is_empty() { vec![1.0] } else { cfg.radii.clone() };
    (0..cfg.samples.max(1))
        .map(|s| {
            let mut rng = stream_rng(cfg.seed, s as u64);
            let radius = radii[s % radii.len()];
            let t = cfg.horizon * rng.random::<f64>();
            let u = random_state(dims, radius, &mut rng);
            let ubar = random_state(dims, radius, &mut rng);
            SamplePair { t, u, ubar }
        })
        .collect()
}

fn evaluate<F>(dims: Dims, cfg: &SamplerConfig, margin: F) -> Result<MarginReport>
where
    F: Fn(&SamplePair) -> Result<f64> + Sync,
{
    let pairs = sample_pairs(dims, cfg);
    let margins: Vec<f64> = pairs.par_iter().map(&margin).collect::<Result<_>>()?;
    Ok(MarginReport::from_margins(pairs, &margins))
}

/// Margin of the pairing inequality
/// `⟨A(U)−A(Ū), Û⟩ ≤ −μ1(|HX̂|²+|HŶ|²) − μ2(|HᵀP̂|²+|HᵀQ̂|²+‖HᵀK̂‖²)`.
/// In primed mode the pairing enters with the opposite sign.
pub fn monotonicity_margin(sys: &CoefficientSystem, pair: &SamplePair, primed: bool) -> Result<f64> {
    let terms = sys.pairing_terms(pair.t, &pair.u, &pair.ubar)?;
    let pairing: f64 = terms.iter().sum();
    let Dims { m, d, l, j, .. } = sys.dims;
    let diff = pair.u.minus(&pair.ubar);
    let hx = norm_sq(&sys.h_mul(&diff.x));
    let hy = if l > 0 { norm_sq(&sys.h_cols(&diff.y, l)) } else { 0.0 };
    let htp = norm_sq(&sys.ht_mul(&diff.p));
    let htq = if d > 0 { norm_sq(&sys.ht_cols(&diff.q, d)) } else { 0.0 };
    let mut htk = 0.0;
    for jj in 0..j {
        htk += sys.marks.rate(jj) * norm_sq(&sys.ht_mul(&diff.k[jj * m..(jj + 1) * m]));
    }
    let c = sys.constants;
    let signed = if primed { pairing } else { -pairing };
    let penalty = c.mu1 * (hx + hy) + c.mu2 * (htp + htq + htk);
    let scale = terms.iter().map(|v| v.abs()).sum::<f64>() + penalty.abs();
    Ok(snap(signed - penalty, scale))
}

pub fn check_monotonicity(sys: &CoefficientSystem, cfg: &SamplerConfig, primed: bool) -> Result<MarginReport> {
    evaluate(sys.dims, cfg, |pair| monotonicity_margin(sys, pair, primed))
}

/// Margins of the two boundary inequalities.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryReport {
    pub psi: MarginReport,
    pub phi: MarginReport,
}

impl BoundaryReport {
    pub fn passed(&self) -> bool {
        self.psi.passed() && self.phi.passed()
    }
}

/// `⟨Ψ(P)−Ψ(P̄), Hᵀ P̂⟩ ≤ −β2|HᵀP̂|²` and `⟨Φ(X)−Φ(X̄), H X̂⟩ ≥ β1|HX̂|²`;
/// primed mode reverses both inner products.
pub fn check_boundary_monotonicity(
    sys: &CoefficientSystem,
    cfg: &SamplerConfig,
    primed: bool,
) -> Result<BoundaryReport> {
    let sign = if primed { -1.0 } else { 1.0 };
    let psi = evaluate(sys.dims, cfg, |pair| {
        let dp: Vec<f64> = pair.u.p.iter().zip(&pair.ubar.p).map(|(a, b)| a - b).collect();
        let a = (sys.psi)(&pair.u.p);
        let b = (sys.psi)(&pair.ubar.p);
        let dpsi: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let htp = sys.ht_mul(&dp);
        let inner = sign * dot(&dpsi, &htp);
        let pen = sys.constants.beta2 * norm_sq(&htp);
        Ok(snap(-inner - pen, inner.abs() + pen))
    })?;
    let phi = evaluate(sys.dims, cfg, |pair| {
        let dx: Vec<f64> = pair.u.x.iter().zip(&pair.ubar.x).map(|(a, b)| a - b).collect();
        let a = (sys.phi)(&pair.u.x);
        let b = (sys.phi)(&pair.ubar.x);
        let dphi: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let hx = sys.h_mul(&dx);
        let inner = sign * dot(&dphi, &hx);
        let pen = sys.constants.beta1 * norm_sq(&hx);
        Ok(snap(inner - pen, inner.abs() + pen))
    })?;
    Ok(BoundaryReport { psi, phi })
}

/// One margin report per Lipschitz inequality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub f: MarginReport,
    pub drift_p: MarginReport,
    pub g: MarginReport,
    pub diffusion_p: MarginReport,
    pub h: MarginReport,
    pub psi: MarginReport,
    pub phi: MarginReport,
}

impl LipschitzReport {
    pub fn entries(&self) -> [(&'static str, &MarginReport); 7] {
        [
            ("f", &self.f),
            ("F", &self.drift_p),
            ("g", &self.g),
            ("G", &self.diffusion_p),
            ("h", &self.h),
            ("Psi", &self.psi),
            ("Phi", &self.phi),
        ]
    }

    pub fn passed(&self) -> bool {
        self.entries().iter().all(|(_, r)| r.passed())
    }
}

fn diff_sq(a: Vec<f64>, b: Vec<f64>) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Samples the seven Lipschitz inequalities with the declared `c` and `γ`.
/// The jump coefficient is measured in the λ-weighted mark norm.
pub fn check_lipschitz(sys: &CoefficientSystem, cfg: &SamplerConfig) -> Result<LipschitzReport> {
    let c = sys.constants.c;
    let gamma = sys.constants.gamma;
    struct Parts {
        x: f64,
        p: f64,
        y: f64,
        q: f64,
        k: f64,
    }
    let parts = |pair: &SamplePair| {
        let dif = pair.u.minus(&pair.ubar);
        Parts {
            x: norm_sq(&dif.x),
            p: norm_sq(&dif.p),
            y: norm_sq(&dif.y),
            q: norm_sq(&dif.q),
            k: sys.mark_norm_sq(&dif.k),
        }
    };
    let margin = |lhs: f64, rhs: f64| snap(rhs - lhs, lhs.abs() + rhs.abs());
    let state_check = |func: &StateFn, rhs: &(dyn Fn(&Parts) -> f64 + Sync)| {
        evaluate(sys.dims, cfg, |pair| {
            let a = func(pair.t, &pair.u.as_ref());
            let b = func(pair.t, &pair.ubar.as_ref());
            Ok(margin(diff_sq(a, b), rhs(&parts(pair))))
        })
    };
    let full = |s: &Parts| c * (s.x + s.p + s.y + s.q + s.k);
    let f = state_check(&sys.f, &full)?;
    let drift_p = state_check(&sys.drift_p, &full)?;
    let g = state_check(&sys.g, &|s: &Parts| c * (s.x + s.p + s.q + s.k) + gamma * s.y)?;
    let diffusion_p = state_check(&sys.diffusion_p, &|s: &Parts| c * (s.x + s.p + s.y) + gamma * (s.q + s.k))?;
    let h = evaluate(sys.dims, cfg, |pair| {
        let mut lhs = 0.0;
        for j in 0..sys.marks.len() {
            let a = (sys.h)(pair.t, &pair.u.as_ref(), j);
            let b = (sys.h)(pair.t, &pair.ubar.as_ref(), j);
            lhs += sys.marks.rate(j) * diff_sq(a, b);
        }
        Ok(margin(lhs, full(&parts(pair))))
    })?;
    let psi = evaluate(sys.dims, cfg, |pair| {
        let lhs = diff_sq((sys.psi)(&pair.u.p), (sys.psi)(&pair.ubar.p)).sqrt();
        let rhs = c * diff_sq(pair.u.p.clone(), pair.ubar.p.clone()).sqrt();
        Ok(margin(lhs, rhs))
    })?;
    let phi = evaluate(sys.dims, cfg, |pair| {
        let lhs = diff_sq((sys.phi)(&pair.u.x), (sys.phi)(&pair.ubar.x)).sqrt();
        let rhs = c * diff_sq(pair.u.x.clone(), pair.ubar.x.clone()).sqrt();
        Ok(margin(lhs, rhs))
    })?;
    Ok(LipschitzReport {
        f,
        drift_p,
        g,
        diffusion_p,
        h,
        psi,
        phi,
    })
}

/// Affine map of the state, `A_x X + A_p P + A_y Y + A_q Q + A_k K + c`.
///
/// Missing blocks are zero. Matrices are given as rows. For the jump
/// coefficient the `k` block acts on `K(z_j)` only (width `m`); everywhere
/// else it acts on the full mark-major `K` (width `J·m`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineBlock {
    pub x: Option<Vec<Vec<f64>>>,
    pub p: Option<Vec<Vec<f64>>>,
    pub y: Option<Vec<Vec<f64>>>,
    pub q: Option<Vec<Vec<f64>>>,
    pub k: Option<Vec<Vec<f64>>>,
    pub constant: Option<Vec<f64>>,
}

impl AffineBlock {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn with_x(mut self, rows: Vec<Vec<f64>>) -> Self {
        self.x = Some(rows);
        self
    }

    pub fn with_p(mut self, rows: Vec<Vec<f64>>) -> Self {
        self.p = Some(rows);
        self
    }

    pub fn with_y(mut self, rows: Vec<Vec<f64>>) -> Self {
        self.y = Some(rows);
        self
    }

    pub fn with_q(mut self, rows: Vec<Vec<f64>>) -> Self {
        self.q = Some(rows);
        self
    }

    pub fn with_k(mut self, rows: Vec<Vec<f64>>) -> Self {
        self.k = Some(rows);
        self
    }

    pub fn with_constant(mut self, c: Vec<f64>) -> Self {
        self.constant = Some(c);
        self
    }
}

/// Affine boundary map `A v + c`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineMap {
    pub matrix: Option<Vec<Vec<f64>>>,
    pub constant: Option<Vec<f64>>,
}

impl AffineMap {
    pub fn new(matrix: Vec<Vec<f64>>, constant: Vec<f64>) -> Self {
        Self {
            matrix: Some(matrix),
            constant: Some(constant),
        }
    }
}

/// Serializable description of a system whose coefficients are all affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSpec {
    pub n: usize,
    pub m: usize,
    #[serde(default)]
    pub d: usize,
    #[serde(default)]
    pub l: usize,
    #[serde(default)]
    pub mark_labels: Vec<f64>,
    #[serde(default)]
    pub mark_rates: Vec<f64>,
    pub coupling: Vec<Vec<f64>>,
    #[serde(default)]
    pub f: AffineBlock,
    #[serde(default)]
    pub g: AffineBlock,
    #[serde(default)]
    pub h: AffineBlock,
    #[serde(default, rename = "F")]
    pub drift_p: AffineBlock,
    #[serde(default, rename = "G")]
    pub diffusion_p: AffineBlock,
    #[serde(default)]
    pub psi: AffineMap,
    #[serde(default)]
    pub phi: AffineMap,
    pub constants: Constants,
}

fn to_matrix(rows: &Option<Vec<Vec<f64>>>, nr: usize, nc: usize, what: &str) -> Result<DMatrix<f64>> {
    match rows {
        None => Ok(DMatrix::zeros(nr, nc)),
        Some(rows) => {
            if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
                return Err(DsdeError::ShapeMismatch(format!("{what} must be {nr}x{nc}")));
            }
            if rows.iter().flatten().any(|v| !v.is_finite()) {
                return Err(DsdeError::InvalidData(format!("{what} has non-finite entries")));
            }
            Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
        }
    }
}

fn to_vector(v: &Option<Vec<f64>>, len: usize, what: &str) -> Result<DVector<f64>> {
    match v {
        None => Ok(DVector::zeros(len)),
        Some(v) if v.len() == len && v.iter().all(|x| x.is_finite()) => Ok(DVector::from_column_slice(v)),
        Some(_) => Err(DsdeError::ShapeMismatch(format!("{what} must have {len} finite entries"))),
    }
}

#[derive(Debug, Clone)]
struct Affine {
    x: DMatrix<f64>,
    p: DMatrix<f64>,
    y: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    c: DVector<f64>,
}

impl Affine {
    fn build(b: &AffineBlock, out: usize, dims: Dims, k_width: usize, what: &str) -> Result<Self> {
        Ok(Self {
            x: to_matrix(&b.x, out, dims.n, &format!("{what}.x"))?,
            p: to_matrix(&b.p, out, dims.m, &format!("{what}.p"))?,
            y: to_matrix(&b.y, out, dims.n * dims.l, &format!("{what}.y"))?,
            q: to_matrix(&b.q, out, dims.m * dims.d, &format!("{what}.q"))?,
            k: to_matrix(&b.k, out, k_width, &format!("{what}.k"))?,
            c: to_vector(&b.constant, out, &format!("{what}.constant"))?,
        })
    }

    fn apply(&self, u: &StateRef<'_>, k: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = self.c.iter().copied().collect();
        for (a, v) in [(&self.x, u.x), (&self.p, u.p), (&self.y, u.y), (&self.q, u.q), (&self.k, k)] {
            for (c, vc) in v.iter().enumerate() {
                if *vc == 0.0 {
                    continue;
                }
                for (r, o) in out.iter_mut().enumerate() {
                    *o += a[(r, c)] * vc;
                }
            }
        }
        out
    }
}

impl LinearSpec {
    pub fn dims(&self) -> Dims {
        Dims {
            n: self.n,
            m: self.m,
            d: self.d,
            l: self.l,
            j: self.mark_labels.len(),
        }
    }

    pub fn build(&self) -> Result<CoefficientSystem> {
        let dims = self.dims();
        let Dims { n, m, d, l, j } = dims;
        let marks = if j == 0 && self.mark_rates.is_empty() {
            MarkSpace::empty()
        } else {
            MarkSpace::new(self.mark_labels.clone(), self.mark_rates.clone())?
        };
        let coupling = to_matrix(&Some(self.coupling.clone()), m, n, "coupling")?;
        let f = Affine::build(&self.f, n, dims, j * m, "f")?;
        let g = Affine::build(&self.g, n * d, dims, j * m, "g")?;
        let h = Affine::build(&self.h, n, dims, m, "h")?;
        let big_f = Affine::build(&self.drift_p, m, dims, j * m, "F")?;
        let big_g = Affine::build(&self.diffusion_p, m * l, dims, j * m, "G")?;
        let psi_a = to_matrix(&self.psi.matrix, n, m, "psi.matrix")?;
        let psi_c = to_vector(&self.psi.constant, n, "psi.constant")?;
        let phi_a = to_matrix(&self.phi.matrix, m, n, "phi.matrix")?;
        let phi_c = to_vector(&self.phi.constant, m, "phi.constant")?;
        let sys = CoefficientSystem {
            dims,
            marks,
            f: Arc::new(move |_, u| f.apply(u, u.k)),
            g: Arc::new(move |_, u| g.apply(u, u.k)),
            h: Arc::new(move |_, u, jj| h.apply(u, &u.k[jj * m..(jj + 1) * m])),
            drift_p: Arc::new(move |_, u| big_f.apply(u, u.k)),
            diffusion_p: Arc::new(move |_, u| big_g.apply(u, u.k)),
            psi: Arc::new(move |p| (&psi_a * DVector::from_column_slice(p) + &psi_c).as_slice().to_vec()),
            phi: Arc::new(move |x| (&phi_a * DVector::from_column_slice(x) + &phi_c).as_slice().to_vec()),
            coupling,
            constants: self.constants,
            deterministic: true,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// Scalar `n = m = 1` skeleton with `H = 1` and no noise; callers fill in
    /// the coefficient blocks.
    pub fn scalar(constants: Constants) -> Self {
        Self {
            n: 1,
            m: 1,
            d: 0,
            l: 0,
            mark_labels: vec![],
            mark_rates: vec![],
            coupling: vec![vec![1.0]],
            f: AffineBlock::zero(),
            g: AffineBlock::zero(),
            h: AffineBlock::zero(),
            drift_p: AffineBlock::zero(),
            diffusion_p: AffineBlock::zero(),
            psi: AffineMap::default(),
            phi: AffineMap::default(),
            constants,
        }
    }
}

/// The deterministic coupled scalar system `f = 1 − P`, `F = −X`, `G = −Y`,
/// `Φ(X) = X`, `Ψ = 0` (no driving noise).
pub fn deterministic_coupled() -> LinearSpec {
    let mut s = LinearSpec::scalar(Constants {
        mu1: 1.0,
        mu2: 0.0,
        beta1: 1.0,
        beta2: 0.0,
        c: 2.0,
        gamma: 0.5,
    });
    s.f = AffineBlock::zero().with_p(vec![vec![-1.0]]).with_constant(vec![1.0]);
    s.drift_p = AffineBlock::zero().with_x(vec![vec![-1.0]]);
    s.phi = AffineMap::new(vec![vec![1.0]], vec![0.0]);
    s
}

/// The stochastic monotone scalar system with `d = l = 1` and one mark:
/// `f = −P`, `g = 0.3`, `h = 0.2`, `F = −X`, `G = 0.3 − Y`, `Φ(X) = X`,
/// `Ψ = psi0`.
pub fn monotone_linear(rate: f64, psi0: f64) -> LinearSpec {
    let mut s = LinearSpec::scalar(Constants {
        mu1: 1.0,
        mu2: 0.0,
        beta1: 1.0,
        beta2: 0.0,
        c: 2.0,
        gamma: 0.5,
    });
    s.d = 1;
    s.l = 1;
    s.mark_labels = vec![1.0];
    s.mark_rates = vec![rate];
    s.f = AffineBlock::zero().with_p(vec![vec![-1.0]]);
    s.g = AffineBlock::zero().with_constant(vec![0.3]);
    s.h = AffineBlock::zero().with_constant(vec![0.2]);
    s.drift_p = AffineBlock::zero().with_x(vec![vec![-1.0]]);
    s.diffusion_p = AffineBlock::zero().with_y(vec![vec![-1.0]]).with_constant(vec![0.3]);
    s.phi = AffineMap::new(vec![vec![1.0]], vec![0.0]);
    s.psi = AffineMap::new(vec![vec![0.0]], vec![psi0]);
    s
}

/// Every coefficient identically zero, `H = 1`.
pub fn zero_system() -> LinearSpec {
    LinearSpec::scalar(Constants {
        mu1: 1.0,
        mu2: 0.0,
        beta1: 1.0,
        beta2: 0.0,
        c: 1.0,
        gamma: 0.5,
    })
}
