use std::path::{Path, PathBuf};

use dsde_core::bdsdep::RegressionConfig;
use dsde_core::coeffs::{deterministic_coupled, monotone_linear, zero_system, LinearSpec, SamplerConfig};
use dsde_core::experiments::{hamiltonian_spec, HamiltonianNoise, QuadraticHamiltonian};
use dsde_core::fbdsdep::HomotopyConfig;
use dsde_core::randomness::{make_grid, TimeGrid};
use dsde_core::spdie::{FdConfig, ScalarCase};
use dsde_core::{DsdeError, Result};
use serde::Deserialize;

/// Everything one invocation needs.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub ensemble: EnsembleSize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub homotopy: HomotopyConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub feynman_kac: Option<FeynmanKacConfig>,
    #[serde(default)]
    pub continuity: Option<ContinuityConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: 1.0, steps: 32 }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSize {
    pub paths: usize,
    /// Frozen `B` realisations for the backward and Feynman-Kac workflows.
    pub b_replicates: usize,
}

impl Default for EnsembleSize {
    fn default() -> Self {
        Self { paths: 1000, b_replicates: 1 }
    }
}

/// Named builtin problems.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "builtin", rename_all = "snake_case", deny_unknown_fields)]
pub enum Problem {
    MonotoneLinear {
        #[serde(default = "one")]
        rate: f64,
        #[serde(default)]
        psi0: f64,
    },
    DeterministicCoupled,
    Zero,
    Linear {
        spec: Box<LinearSpec>,
    },
    Hamiltonian {
        hamiltonian: QuadraticHamiltonian,
        #[serde(default = "no_noise")]
        noise: HamiltonianNoise,
    },
    Pide {
        case: ScalarCase,
    },
    Backward(BackwardCase),
}

fn one() -> f64 {
    1.0
}

fn no_noise() -> HamiltonianNoise {
    HamiltonianNoise::None
}

/// Scalar backward equation driven by one `W`, one `B` and optionally one
/// compensated Poisson process.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardCase {
    pub terminal: BackwardTerminal,
    #[serde(default)]
    pub driver: AffineDriver,
    /// Constant integrand against `dB`.
    #[serde(default)]
    pub backward_integrand: f64,
    #[serde(default)]
    pub rate: f64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackwardTerminal {
    Constant { value: f64 },
    /// `W_T`
    Brownian,
    /// `Ñ_T`
    CompensatedJump,
}

/// `F = p·P + q·Q + k·K + constant`.
#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AffineDriver {
    pub p: f64,
    pub q: f64,
    pub k: f64,
    pub constant: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeynmanKacConfig {
    /// Evaluation times; each must be a node of the grid.
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    /// Finite-difference oracle; no comparison table without it.
    #[serde(default)]
    pub fd: Option<FdConfig>,
}

impl FeynmanKacConfig {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.times.iter().flat_map(|&t| self.xs.iter().map(move |&x| (t, x))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKind {
    AdditiveDrift,
    Constant,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuityConfig {
    pub alphas: Vec<f64>,
    #[serde(default = "additive")]
    pub family: FamilyKind,
}

fn additive() -> FamilyKind {
    FamilyKind::AdditiveDrift
}

impl Problem {
    pub fn name(&self) -> &'static str {
        match self {
            Self::MonotoneLinear { .. } => "monotone_linear",
            Self::DeterministicCoupled => "deterministic_coupled",
            Self::Zero => "zero",
            Self::Linear { .. } => "linear",
            Self::Hamiltonian { .. } => "hamiltonian",
            Self::Pide { .. } => "pide",
            Self::Backward(_) => "backward",
        }
    }

    /// The linear specification behind a coefficient-system builtin.
    pub fn linear_spec(&self) -> Result<LinearSpec> {
        match self {
            Self::MonotoneLinear { rate, psi0 } => Ok(monotone_linear(*rate, *psi0)),
            Self::DeterministicCoupled => Ok(deterministic_coupled()),
            Self::Zero => Ok(zero_system()),
            Self::Linear { spec } => Ok((**spec).clone()),
            Self::Hamiltonian { hamiltonian, noise } => hamiltonian_spec(hamiltonian, *noise),
            other => Err(unsupported(other, "a linear coefficient system")),
        }
    }
}

pub fn unsupported(problem: &Problem, what: &str) -> DsdeError {
    DsdeError::InvalidArgument(format!("builtin `{}` does not provide {what}", problem.name()))
}

impl RunConfig {
    pub fn parse(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        make_grid(self.grid.horizon, self.grid.steps)
    }

    /// Range checks that do not need a solver.
    pub fn validate(&self) -> Result<()> {
        self.time_grid()?;
        if self.ensemble.paths == 0 || self.ensemble.b_replicates == 0 {
            return Err(DsdeError::InvalidArgument("ensemble needs paths >= 1 and b_replicates >= 1".into()));
        }
        self.homotopy.validate()?;
        self.regression.validate()?;
        if self.sampler.samples == 0 || self.sampler.radii.is_empty() {
            return Err(DsdeError::InvalidArgument("sampler needs samples >= 1 and at least one radius".into()));
        }
        Ok(())
    }

    /// `--out` wins over the config entry; the default is `dsde-out`.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .unwrap_or_else(|| PathBuf::from("dsde-out"))
    }
}
