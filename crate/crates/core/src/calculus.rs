//! Discrete stochastic calculus on a [`TimeGrid`].
//!
//! Forward integrals use left endpoints, backward integrals against `B` use
//! right endpoints, and jump integrals use the left endpoint of the interval
//! containing the jump. With these conventions the discrete energy identity
//! for `|α_T|²` telescopes exactly.

use nalgebra::{DMatrix, DVector};

use crate::error::{DsdeError, Result};
use crate::randomness::{MarkSpace, NoiseBundle, TimeGrid};

/// Values of a `k`-dimensional process at every grid node, `(N+1) × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessPath {
    pub grid: TimeGrid,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProcessPath {
    pub fn new(grid: TimeGrid, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nodes() * width {
            return Err(DsdeError::ShapeMismatch(format!(
                "process path needs {} values, got {}",
                grid.nodes() * width,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DsdeError::InvalidData("process path has non-finite entries".into()));
        }
        Ok(Self { grid, width, values })
    }

    pub fn constant(grid: TimeGrid, value: &[f64]) -> Self {
        let values = value.iter().copied().cycle().take(grid.nodes() * value.len()).collect();
        Self {
            grid,
            width: value.len(),
            values,
        }
    }

    pub fn zeros(grid: TimeGrid, width: usize) -> Self {
        Self {
            grid,
            width,
            values: vec![0.0; grid.nodes() * width],
        }
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }
}

fn check_integrand(integrand: &ProcessPath, grid: &TimeGrid, width: usize, what: &str) -> Result<()> {
    if integrand.grid != *grid {
        return Err(DsdeError::ShapeMismatch(format!("{what}: integrand lives on a different grid")));
    }
    if integrand.width != width {
        return Err(DsdeError::ShapeMismatch(format!(
            "{what}: integrand width {} but noise width {width}",
            integrand.width
        )));
    }
    Ok(())
}

/// `Σ_i ⟨u(t_i), ΔW_i⟩`.
pub fn forward_ito(integrand: &ProcessPath, bundle: &NoiseBundle) -> Result<f64> {
    check_integrand(integrand, &bundle.grid, bundle.d, "forward_ito")?;
    Ok((0..bundle.grid.steps())
        .map(|i| dot(integrand.at(i), bundle.dw_row(i)))
        .sum())
}

/// `Σ_i ⟨v(t_{i+1}), ΔB_i⟩`.
pub fn backward_ito(integrand: &ProcessPath, bundle: &NoiseBundle) -> Result<f64> {
    check_integrand(integrand, &bundle.grid, bundle.l, "backward_ito")?;
    Ok((0..bundle.grid.steps())
        .map(|i| dot(integrand.at(i + 1), bundle.db_row(i)))
        .sum())
}

/// `Σ_i Σ_j k(t_i, z_j) (counts[i][j] − λ_j Δt)`.
pub fn jump_integral(k_path: &ProcessPath, bundle: &NoiseBundle) -> Result<f64> {
    check_integrand(k_path, &bundle.grid, bundle.marks.len(), "jump_integral")?;
    let dt = bundle.grid.dt();
    let mut total = 0.0;
    for i in 0..bundle.grid.steps() {
        let k = k_path.at(i);
        for (j, c) in bundle.counts_row(i).iter().enumerate() {
            total += k[j] * (*c as f64 - bundle.marks.rate(j) * dt);
        }
    }
    Ok(total)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `α_t = α_0 + ∫β ds + ∫γ dB + ∫δ dW + ∫∫K Ñ(dz ds)` for a `k`-dimensional α.
///
/// `gamma` is `k × l` row-major per node, `delta` is `k × d`, `k_jump` is
/// mark-major `J × k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemimartingaleDecomposition {
    pub alpha0: Vec<f64>,
    pub beta: ProcessPath,
    pub gamma: ProcessPath,
    pub delta: ProcessPath,
    pub k_jump: ProcessPath,
}

struct StepParts {
    forward: Vec<f64>,
    backward: Vec<f64>,
}

impl SemimartingaleDecomposition {
    fn check(&self, bundle: &NoiseBundle) -> Result<()> {
        let k = self.alpha0.len();
        let g = &bundle.grid;
        check_integrand(&self.beta, g, k, "beta")?;
        check_integrand(&self.gamma, g, k * bundle.l, "gamma")?;
        check_integrand(&self.delta, g, k * bundle.d, "delta")?;
        check_integrand(&self.k_jump, g, k * bundle.marks.len(), "k_jump")
    }

    fn step(&self, bundle: &NoiseBundle, i: usize) -> StepParts {
        let k = self.alpha0.len();
        let (d, l, nj) = (bundle.d, bundle.l, bundle.marks.len());
        let dt = bundle.grid.dt();
        let beta = self.beta.at(i);
        let delta = self.delta.at(i);
        let kj = self.k_jump.at(i);
        let gamma = self.gamma.at(i + 1);
        let dw = bundle.dw_row(i);
        let db = bundle.db_row(i);
        let counts = bundle.counts_row(i);
        let mut forward = vec![0.0; k];
        let mut backward = vec![0.0; k];
        for r in 0..k {
            let mut v = beta[r] * dt;
            v += dot(&delta[r * d..(r + 1) * d], dw);
            for j in 0..nj {
                v += kj[j * k + r] * (counts[j] as f64 - bundle.marks.rate(j) * dt);
            }
            forward[r] = v;
            backward[r] = dot(&gamma[r * l..(r + 1) * l], db);
        }
        StepParts { forward, backward }
    }

    /// Builds the discrete path of α on the bundle's grid.
    pub fn accumulate(&self, bundle: &NoiseBundle) -> Result<ProcessPath> {
        self.check(bundle)?;
        let k = self.alpha0.len();
        let n = bundle.grid.steps();
        let mut values = Vec::with_capacity((n + 1) * k);
        values.extend_from_slice(&self.alpha0);
        for i in 0..n {
            let s = self.step(bundle, i);
            for r in 0..k {
                let prev = values[i * k + r];
                values.push(prev + s.forward[r] + s.backward[r]);
            }
        }
        ProcessPath::new(bundle.grid, k, values)
    }
}

/// Residual of the discrete energy identity together with the magnitude of
/// the summed terms, so callers can form a relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyResidual {
    pub residual: f64,
    pub scale: f64,
}

impl EnergyResidual {
    pub fn relative(&self) -> f64 {
        if self.scale == 0.0 {
            self.residual.abs()
        } else {
            self.residual.abs() / self.scale
        }
    }
}

/// `|α_T|²` minus the discrete right-hand side
/// `|α_0|² + Σ 2⟨α_i, fwd_i⟩ + Σ 2⟨α_{i+1}, γ_{i+1}ΔB_i⟩ + Σ|fwd_i|² − Σ|γ_{i+1}ΔB_i|²`,
/// where `fwd_i` collects the `dt`, `dW` and `Ñ` increments. The squared sums
/// are the discrete quadratic variations; the backward one enters with a
/// minus sign.
pub fn energy_identity_residual(dec: &SemimartingaleDecomposition, bundle: &NoiseBundle) -> Result<EnergyResidual> {
    let alpha = dec.accumulate(bundle)?;
    let n = bundle.grid.steps();
    let a0 = alpha.at(0);
    let mut rhs = dot(a0, a0);
    let mut scale = rhs.abs();
    for i in 0..n {
        let s = dec.step(bundle, i);
        let terms = [
            2.0 * dot(alpha.at(i), &s.forward),
            2.0 * dot(alpha.at(i + 1), &s.backward),
            dot(&s.forward, &s.forward),
            -dot(&s.backward, &s.backward),
        ];
        for t in terms {
            rhs += t;
            scale += t.abs();
        }
    }
    let at = alpha.at(n);
    let lhs = dot(at, at);
    Ok(EnergyResidual {
        residual: lhs - rhs,
        scale: scale.max(lhs.abs()),
    })
}

/// A vector field `u(t, x) ∈ R^m` on `[0, T] × R^n`, optionally with analytic
/// derivatives.
pub trait SmoothField: Sync {
    fn dim_in(&self) -> usize;
    fn dim_out(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> Vec<f64>;

    /// `∂u/∂t`, length `m`.
    fn time_derivative(&self, _t: f64, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    /// Jacobian `∂u_k/∂x_i`, `m × n`.
    fn gradient(&self, _t: f64, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    /// Hessians, one `n × n` matrix per output component.
    fn hessian(&self, _t: f64, _x: &[f64]) -> Option<Vec<DMatrix<f64>>> {
        None
    }

    /// Whether missing derivatives may be replaced by central differences.
    fn allows_finite_differences(&self) -> bool {
        true
    }
}

fn fd_step(v: f64) -> f64 {
    1e-5 * v.abs().max(1.0)
}

fn missing(what: &str) -> DsdeError {
    DsdeError::UnsupportedFunction(format!("field provides no {what} and forbids finite differences"))
}

fn time_derivative_of(u: &dyn SmoothField, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    if let Some(d) = u.time_derivative(t, x) {
        return Ok(d);
    }
    if !u.allows_finite_differences() {
        return Err(missing("time derivative"));
    }
    let h = fd_step(t);
    let up = u.value(t + h, x);
    let dn = u.value(t - h, x);
    Ok(up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}

fn gradient_of(u: &dyn SmoothField, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    if let Some(g) = u.gradient(t, x) {
        return Ok(g);
    }
    if !u.allows_finite_differences() {
        return Err(missing("gradient"));
    }
    let (n, m) = (u.dim_in(), u.dim_out());
    let mut g = DMatrix::zeros(m, n);
    let mut xp = x.to_vec();
    for i in 0..n {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        let up = u.value(t, &xp);
        xp[i] = x[i] - h;
        let dn = u.value(t, &xp);
        xp[i] = x[i];
        for k in 0..m {
            g[(k, i)] = (up[k] - dn[k]) / (2.0 * h);
        }
    }
    Ok(g)
}

fn hessian_of(u: &dyn SmoothField, t: f64, x: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    if let Some(h) = u.hessian(t, x) {
        return Ok(h);
    }
    if !u.allows_finite_differences() {
        return Err(missing("hessian"));
    }
    let (n, m) = (u.dim_in(), u.dim_out());
    let mut out = vec![DMatrix::zeros(n, n); m];
    let centre = u.value(t, x);
    let mut xp = x.to_vec();
    for i in 0..n {
        let hi = fd_step(x[i]);
        xp[i] = x[i] + hi;
        let up = u.value(t, &xp);
        xp[i] = x[i] - hi;
        let dn = u.value(t, &xp);
        xp[i] = x[i];
        for k in 0..m {
            out[k][(i, i)] = (up[k] - 2.0 * centre[k] + dn[k]) / (hi * hi);
        }
        for j in 0..i {
            let hj = fd_step(x[j]);
            let mut corner = |si: f64, sj: f64| {
                xp[i] = x[i] + si * hi;
                xp[j] = x[j] + sj * hj;
                let v = u.value(t, &xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let pp = corner(1.0, 1.0);
            let pm = corner(1.0, -1.0);
            let mp = corner(-1.0, 1.0);
            let mm = corner(-1.0, -1.0);
            for k in 0..m {
                let v = (pp[k] - pm[k] - mp[k] + mm[k]) / (4.0 * hi * hj);
                out[k][(i, j)] = v;
                out[k][(j, i)] = v;
            }
        }
    }
    Ok(out)
}

/// `Lu(t,x) = ∂_t u + Σ b_i ∂_i u + ½ Σ (σσᵀ)_ij ∂_ij u
///           + Σ_j λ_j (u(t, x + h(t,x,z_j)) − u(t,x) − Σ h_i ∂_i u)`.
///
/// `diffusion` is `n × d`; `jump_map(t, x, z)` returns the jump size for mark
/// label `z`.
pub fn apply_generator<J>(
    u: &dyn SmoothField,
    t: f64,
    x: &[f64],
    drift: &[f64],
    diffusion: &DMatrix<f64>,
    jump_map: J,
    marks: &MarkSpace,
) -> Result<Vec<f64>>
where
    J: Fn(f64, &[f64], f64) -> Vec<f64>,
{
    let (n, m) = (u.dim_in(), u.dim_out());
    if x.len() != n || drift.len() != n || diffusion.nrows() != n {
        return Err(DsdeError::ShapeMismatch(format!(
            "generator expects state dimension {n}, got x={}, drift={}, diffusion rows={}",
            x.len(),
            drift.len(),
            diffusion.nrows()
        )));
    }
    let dt = time_derivative_of(u, t, x)?;
    let grad = gradient_of(u, t, x)?;
    let a = diffusion * diffusion.transpose();
    let needs_hessian = a.iter().any(|v| *v != 0.0);
    let hess = if needs_hessian {
        Some(hessian_of(u, t, x)?)
    } else {
        None
    };
    let ux = u.value(t, x);
    let b = DVector::from_column_slice(drift);
    let mut out = dt;
    for k in 0..m {
        out[k] += (grad.row(k) * &b)[(0, 0)];
        if let Some(h) = &hess {
            out[k] += 0.5 * a.component_mul(&h[k]).sum();
        }
    }
    for (j, z) in marks.labels().iter().enumerate() {
        let h = jump_map(t, x, *z);
        let shifted: Vec<f64> = x.iter().zip(&h).map(|(a, b)| a + b).collect();
        let us = u.value(t, &shifted);
        let hv = DVector::from_column_slice(&h);
        for k in 0..m {
            let lin = (grad.row(k) * &hv)[(0, 0)];
            out[k] += marks.rate(j) * (us[k] - ux[k] - lin);
        }
    }
    Ok(out)
}
