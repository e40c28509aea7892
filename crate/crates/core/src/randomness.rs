//! Reproducible discretised driving noise: the forward Brownian motion `W`,
//! the backward Brownian motion `B`, and a Poisson random measure on a finite
//! mark space.
//!
//! Every path draws from its own ChaCha8 stream derived from a master seed, so
//! ensembles are bit-identical regardless of how many worker threads build
//! them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DsdeError, Result};
use crate::paths::PathArray;

/// Uniform grid `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

pub fn make_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(DsdeError::InvalidArgument(format!(
            "horizon must be positive and finite, got {horizon}"
        )));
    }
    if steps == 0 {
        return Err(DsdeError::InvalidArgument("steps must be >= 1".into()));
    }
    Ok(TimeGrid { horizon, steps })
}

/// Finite mark space `{z_1, .., z_J}` with intensities `λ_j`; the compensator
/// is `Σ_j λ_j δ_{z_j}(dz) dt`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MarkSpace {
    labels: Vec<f64>,
    rates: Vec<f64>,
}

impl MarkSpace {
    pub fn new(labels: Vec<f64>, rates: Vec<f64>) -> Result<Self> {
        if labels.len() != rates.len() {
            return Err(DsdeError::ShapeMismatch(format!(
                "{} mark labels but {} rates",
                labels.len(),
                rates.len()
            )));
        }
        if let Some(r) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(DsdeError::InvalidArgument(format!(
                "mark rates must be finite and positive, got {r}"
            )));
        }
        for (i, a) in labels.iter().enumerate() {
            if !a.is_finite() || labels[..i].contains(a) {
                return Err(DsdeError::InvalidArgument(format!(
                    "mark labels must be finite and distinct, got {a}"
                )));
            }
        }
        Ok(Self { labels, rates })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// One mark with label 1.0 and the given rate.
    pub fn single(rate: f64) -> Result<Self> {
        Self::new(vec![1.0], vec![rate])
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn rate(&self, j: usize) -> f64 {
        self.rates[j]
    }

    pub fn total_mass(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// `‖k‖² = Σ_j |k_j|² λ_j` for `k` stored mark-major (`J × width`).
    pub fn weighted_norm_sq(&self, k: &[f64]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let w = k.len() / self.len();
        self.rates
            .iter()
            .enumerate()
            .map(|(j, r)| r * k[j * w..(j + 1) * w].iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// `⟨⟨a, b⟩⟩ = Σ_j ⟨a_j, b_j⟩ λ_j` for mark-major vectors of equal length.
    pub fn weighted_inner(&self, a: &[f64], b: &[f64]) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let w = a.len() / self.len();
        self.rates
            .iter()
            .enumerate()
            .map(|(j, r)| {
                r * a[j * w..(j + 1) * w]
                    .iter()
                    .zip(&b[j * w..(j + 1) * w])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Increments of `W` (`N × d`), `B` (`N × l`) and per-mark Poisson counts
/// (`N × J`) for one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBundle {
    pub grid: TimeGrid,
    pub d: usize,
    pub l: usize,
    pub marks: MarkSpace,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
    pub counts: Vec<u32>,
    pub seed: u64,
}

impl NoiseBundle {
    pub fn dw_row(&self, i: usize) -> &[f64] {
        &self.dw[i * self.d..(i + 1) * self.d]
    }

    pub fn db_row(&self, i: usize) -> &[f64] {
        &self.db[i * self.l..(i + 1) * self.l]
    }

    pub fn counts_row(&self, i: usize) -> &[u32] {
        let j = self.marks.len();
        &self.counts[i * j..(i + 1) * j]
    }

    /// `counts[i][j] − λ_j Δt`.
    pub fn compensated_increment(&self, interval: usize, mark: usize) -> Result<f64> {
        if interval >= self.grid.steps() {
            return Err(DsdeError::IndexOutOfRange(format!(
                "interval {interval} >= {}",
                self.grid.steps()
            )));
        }
        if mark >= self.marks.len() {
            return Err(DsdeError::IndexOutOfRange(format!(
                "mark {mark} >= {}",
                self.marks.len()
            )));
        }
        let c = self.counts[interval * self.marks.len() + mark] as f64;
        Ok(c - self.marks.rate(mark) * self.grid.dt())
    }

    /// Cumulative `W` at every node (`(N+1) × d`), starting from zero.
    pub fn w_path(&self) -> Vec<f64> {
        cumulative(&self.dw, self.d, self.grid.steps())
    }

    /// Cumulative `B` at every node (`(N+1) × l`), starting from zero.
    pub fn b_path(&self) -> Vec<f64> {
        cumulative(&self.db, self.l, self.grid.steps())
    }
}

fn cumulative(incr: &[f64], width: usize, steps: usize) -> Vec<f64> {
    let mut out = vec![0.0; (steps + 1) * width];
    for i in 0..steps {
        for c in 0..width {
            out[(i + 1) * width + c] = out[i * width + c] + incr[i * width + c];
        }
    }
    out
}

/// ChaCha8 generator for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream reserved for a frozen `B` path of the given replicate.
fn frozen_b_stream(replicate: u64) -> u64 {
    u64::MAX - replicate
}

fn path_stream(replicate: u64, path: u64) -> u64 {
    (replicate << 32) | path
}

fn draw_bundle(
    grid: TimeGrid,
    d: usize,
    l: usize,
    marks: &MarkSpace,
    rng: &mut ChaCha8Rng,
    draw_b: bool,
) -> (Vec<f64>, Vec<f64>, Vec<u32>) {
    let n = grid.steps();
    let sd = grid.dt().sqrt();
    let poissons: Vec<Poisson<f64>> = marks
        .rates()
        .iter()
        .map(|r| Poisson::new(r * grid.dt()).expect("positive Poisson mean"))
        .collect();
    let mut dw = Vec::with_capacity(n * d);
    let mut db = Vec::with_capacity(if draw_b { n * l } else { 0 });
    let mut counts = Vec::with_capacity(n * marks.len());
    for _ in 0..n {
        for _ in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            dw.push(sd * z);
        }
        if draw_b {
            for _ in 0..l {
                let z: f64 = rng.sample(StandardNormal);
                db.push(sd * z);
            }
        }
        for p in &poissons {
            counts.push(p.sample(rng) as u32);
        }
    }
    (dw, db, counts)
}

/// Samples one bundle: `dW, dB ~ N(0, Δt)` i.i.d. and
/// `counts[i][j] ~ Poisson(λ_j Δt)` i.i.d.
pub fn sample_noise(grid: TimeGrid, d: usize, l: usize, marks: &MarkSpace, seed: u64) -> NoiseBundle {
    let mut rng = stream_rng(seed, 0);
    let (dw, db, counts) = draw_bundle(grid, d, l, marks, &mut rng, true);
    NoiseBundle {
        grid,
        d,
        l,
        marks: marks.clone(),
        dw,
        db,
        counts,
        seed,
    }
}

/// How the backward Brownian motion is shared across an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BMode {
    /// Every path carries its own `B`.
    Independent,
    /// One `B` realisation shared by all paths of the replicate.
    Frozen { replicate: u64 },
}

/// Ensemble of noise paths on a common grid.
///
/// `dw` is `paths × N × d`, `db` is `paths × N × l` and `counts` is
/// `paths × N × J` (integer counts stored as reals).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseEnsemble {
    pub grid: TimeGrid,
    pub d: usize,
    pub l: usize,
    pub marks: MarkSpace,
    pub seed: u64,
    pub b_mode: BMode,
    pub dw: PathArray,
    pub db: PathArray,
    pub counts: PathArray,
}

impl NoiseEnsemble {
    pub fn sample(
        grid: TimeGrid,
        d: usize,
        l: usize,
        marks: &MarkSpace,
        seed: u64,
        paths: usize,
        b_mode: BMode,
    ) -> Result<Self> {
        if paths == 0 {
            return Err(DsdeError::InvalidArgument("ensemble needs at least one path".into()));
        }
        let n = grid.steps();
        let replicate = match b_mode {
            BMode::Independent => 0,
            BMode::Frozen { replicate } => replicate,
        };
        let draw_b = matches!(b_mode, BMode::Independent);
        let drawn: Vec<_> = (0..paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream_rng(seed, path_stream(replicate, p as u64));
                draw_bundle(grid, d, l, marks, &mut rng, draw_b)
            })
            .collect();
        let mut dw = Vec::with_capacity(paths * n * d);
        let mut db = Vec::with_capacity(paths * n * l);
        let mut counts = Vec::with_capacity(paths * n * marks.len());
        let shared_b = if draw_b {
            None
        } else {
            let mut rng = stream_rng(seed, frozen_b_stream(replicate));
            let sd = grid.dt().sqrt();
            Some(
                (0..n * l)
                    .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                    .collect::<Vec<f64>>(),
            )
        };
        for (w, b, c) in drawn {
            dw.extend(w);
            match &shared_b {
                Some(sb) => db.extend_from_slice(sb),
                None => db.extend(b),
            }
            counts.extend(c.into_iter().map(f64::from));
        }
        Ok(Self {
            grid,
            d,
            l,
            marks: marks.clone(),
            seed,
            b_mode,
            dw: PathArray::from_vec(paths, n, d, dw)?,
            db: PathArray::from_vec(paths, n, l, db)?,
            counts: PathArray::from_vec(paths, n, marks.len(), counts)?,
        })
    }

    pub fn paths(&self) -> usize {
        self.dw.paths()
    }

    pub fn j(&self) -> usize {
        self.marks.len()
    }

    /// Extracts path `p` as a stand-alone bundle.
    pub fn bundle(&self, p: usize) -> NoiseBundle {
        NoiseBundle {
            grid: self.grid,
            d: self.d,
            l: self.l,
            marks: self.marks.clone(),
            dw: self.dw.path(p).to_vec(),
            db: self.db.path(p).to_vec(),
            counts: self.counts.path(p).iter().map(|&c| c as u32).collect(),
            seed: self.seed,
        }
    }

    /// Compensated jump increments `counts − λ_j Δt`, `paths × N × J`.
    pub fn compensated(&self) -> PathArray {
        let dt = self.grid.dt();
        let j = self.j();
        let mut out = self.counts.clone();
        for (k, v) in out.as_mut_slice().iter_mut().enumerate() {
            *v -= self.marks.rate(k % j.max(1)) * dt;
        }
        out
    }

    /// Cumulative `W` at nodes (`paths × (N+1) × d`).
    pub fn w_paths(&self) -> PathArray {
        cumulate(&self.dw)
    }

    /// Cumulative `B` at nodes (`paths × (N+1) × l`).
    pub fn b_paths(&self) -> PathArray {
        cumulate(&self.db)
    }

    /// Cumulative compensated counts `Ñ_t` at nodes (`paths × (N+1) × J`).
    pub fn compensated_paths(&self) -> PathArray {
        cumulate(&self.compensated())
    }

    /// Remaining backward increment `B_T − B_{t_i}` at nodes (`paths × (N+1) × l`).
    pub fn b_future(&self) -> PathArray {
        let b = self.b_paths();
        let nodes = b.nodes();
        let mut out = PathArray::zeros(b.paths(), nodes, b.width());
        for p in 0..b.paths() {
            let end = b.get(p, nodes - 1).to_vec();
            for i in 0..nodes {
                let cur = b.get(p, i).to_vec();
                for (o, (e, c)) in out.get_mut(p, i).iter_mut().zip(end.iter().zip(&cur)) {
                    *o = e - c;
                }
            }
        }
        out
    }
}

/// Running sum over intervals, producing node values with a zero first node.
pub fn cumulate(incr: &PathArray) -> PathArray {
    let (paths, steps, width) = incr.shape();
    let mut out = PathArray::zeros(paths, steps + 1, width);
    for p in 0..paths {
        for i in 0..steps {
            for c in 0..width {
                let v = out.get(p, i)[c] + incr.get(p, i)[c];
                out.get_mut(p, i + 1)[c] = v;
            }
        }
    }
    out
}
