use std::io;

use dsde_core::bdsdep::{build_projectors, solve_backward, BackwardProblem, StepArgs};
use dsde_core::coeffs::{check_boundary_monotonicity, check_lipschitz, check_monotonicity, CoefficientSystem};
use dsde_core::experiments::{continuity_study, hamiltonian_demo, DemoFailure, HamiltonianNoise, ParameterFamily};
use dsde_core::fbdsdep::{select_branch, Branch, FbdsdepSolver};
use dsde_core::randomness::{BMode, MarkSpace, NoiseEnsemble};
use dsde_core::spdie::{compare_feynman_kac, evaluate_u, EnsembleConfig};
use dsde_core::DsdeError;
use serde_json::{json, Value};

use crate::config::{unsupported, BackwardTerminal, FamilyKind, Problem, RunConfig};
use crate::output::{write_json, write_trace, Cell, CsvWriter, OutDir, SolutionTable};

/// Why a run stopped.
#[derive(Debug)]
pub enum Failure {
    Validation(DsdeError),
    Solver(DsdeError),
    Io(io::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Solver(_) => 3,
            Self::Io(_) => 1,
        }
    }

    pub fn report(&self) -> Value {
        let (kind, error, message) = match self {
            Self::Validation(e) => ("validation", error_name(e), e.to_string()),
            Self::Solver(e) => ("solver", error_name(e), e.to_string()),
            Self::Io(e) => ("io", "Io", e.to_string()),
        };
        json!({ "status": "error", "kind": kind, "error": error, "message": message, "exit_code": self.exit_code() })
    }
}

impl From<DsdeError> for Failure {
    fn from(e: DsdeError) -> Self {
        match e {
            DsdeError::NumericalBlowup { .. } | DsdeError::MapDivergence { .. } | DsdeError::ContinuationFailure { .. } => {
                Self::Solver(e)
            }
            _ => Self::Validation(e),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

pub fn error_name(e: &DsdeError) -> &'static str {
    match e {
        DsdeError::InvalidArgument(_) => "InvalidArgument",
        DsdeError::ShapeMismatch(_) => "ShapeMismatch",
        DsdeError::IndexOutOfRange(_) => "IndexOutOfRange",
        DsdeError::UnsupportedFunction(_) => "UnsupportedFunction",
        DsdeError::InsufficientPaths { .. } => "InsufficientPaths",
        DsdeError::InvalidData(_) => "InvalidData",
        DsdeError::NumericalBlowup { .. } => "NumericalBlowup",
        DsdeError::InvalidSystem(_) => "InvalidSystem",
        DsdeError::MapDivergence { .. } => "MapDivergence",
        DsdeError::ContinuationFailure { .. } => "ContinuationFailure",
        DsdeError::CflViolation { .. } => "CflViolation",
        DsdeError::DomainTooSmall { .. } => "DomainTooSmall",
        DsdeError::InvalidHamiltonian(_) => "InvalidHamiltonian",
    }
}

pub type Outcome = Result<Value, Failure>;

/// A parsed and validated run.
pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub seed: u64,
    /// Overrides the sampler's own seed when given on the command line.
    pub seed_override: Option<u64>,
    pub out: &'a OutDir,
}

fn coefficient_system(problem: &Problem) -> Result<CoefficientSystem, DsdeError> {
    match problem {
        Problem::Pide { case } => Ok(case.build()?.system().clone()),
        Problem::Backward(_) => Err(unsupported(problem, "a coupled coefficient system")),
        _ => problem.linear_spec()?.build(),
    }
}

impl Run<'_> {
    fn noise_for(&self, sys: &CoefficientSystem) -> Result<NoiseEnsemble, DsdeError> {
        let grid = self.cfg.time_grid()?;
        NoiseEnsemble::sample(grid, sys.dims.d, sys.dims.l, &sys.marks, self.seed, self.cfg.ensemble.paths, BMode::Independent)
    }

    pub fn check(&self) -> Outcome {
        let sys = coefficient_system(&self.cfg.problem)?;
        let mut sampler = self.cfg.sampler.clone();
        if let Some(s) = self.seed_override {
            sampler.seed = s;
        }
        // The m < n family is checked in the reversed orientation.
        let branch = select_branch(&sys).ok();
        let primed = branch == Some(Branch::MLessN);
        let monotonicity = check_monotonicity(&sys, &sampler, primed)?;
        let boundary = check_boundary_monotonicity(&sys, &sampler, primed)?;
        let lipschitz = check_lipschitz(&sys, &sampler)?;
        let violation_count = monotonicity.violation_count
            + boundary.psi.violation_count
            + boundary.phi.violation_count
            + lipschitz.entries().iter().map(|(_, r)| r.violation_count).sum::<usize>();
        let report = json!({
            "problem": self.cfg.problem.name(),
            "branch": branch,
            "primed": primed,
            "violation_count": violation_count,
            "passed": violation_count == 0,
            "monotonicity": monotonicity,
            "boundary": boundary,
            "lipschitz": lipschitz,
        });
        write_json(&self.out.file("report.json"), &report)?;
        Ok(json!({
            "problem": self.cfg.problem.name(),
            "violation_count": violation_count,
            "min_margin": monotonicity.min_margin,
        }))
    }

    pub fn solve_fbdsdep(&self) -> Outcome {
        let sys = coefficient_system(&self.cfg.problem)?;
        let noise = self.noise_for(&sys)?;
        let solver = FbdsdepSolver::new(&sys, &noise, &self.cfg.regression)?;
        let (sol, trace) = match solver.solve(&self.cfg.homotopy) {
            Ok(ok) => ok,
            Err(f) => {
                write_trace(&self.out.file("trace.csv"), &f.trace)?;
                return Err(f.error.into());
            }
        };
        SolutionTable::quintuple(&sol).write(&self.out.file("solution.csv"))?;
        write_trace(&self.out.file("trace.csv"), &trace)?;
        let (psi_res, phi_res) = sol.boundary_residuals(&sys);
        Ok(json!({
            "problem": self.cfg.problem.name(),
            "branch": trace.branch,
            "final_alpha": trace.final_alpha(),
            "accepted_steps": trace.steps.len(),
            "rejected_steps": trace.rejected.len(),
            "boundary_residuals": [psi_res, phi_res],
            "mean_x0": sol.x.mean_over_paths()[..sol.dims.n],
            "mean_p0": sol.p.mean_over_paths()[..sol.dims.m],
        }))
    }

    pub fn solve_bdsdep(&self) -> Outcome {
        let Problem::Backward(case) = &self.cfg.problem else {
            return Err(unsupported(&self.cfg.problem, "a backward equation").into());
        };
        let grid = self.cfg.time_grid()?;
        let paths = self.cfg.ensemble.paths;
        let marks = if case.rate > 0.0 { MarkSpace::single(case.rate)? } else { MarkSpace::empty() };
        if matches!(case.terminal, BackwardTerminal::CompensatedJump) && marks.is_empty() {
            return Err(DsdeError::InvalidArgument("compensated_jump terminal needs rate > 0".into()).into());
        }
        let drv = case.driver;
        let driver = move |a: &StepArgs<'_>| {
            vec![drv.p * a.p[0] + drv.q * a.q[0] + drv.k * a.k.first().copied().unwrap_or(0.0) + drv.constant]
        };
        let g = case.backward_integrand;
        let backward = move |_: &StepArgs<'_>| vec![g];
        let mut csv: Option<CsvWriter> = None;
        let mut replicates = Vec::new();
        for r in 0..self.cfg.ensemble.b_replicates {
            let ens = NoiseEnsemble::sample(grid, 1, 1, &marks, self.seed, paths, BMode::Frozen { replicate: r as u64 })?;
            let w = ens.w_paths();
            let compensated = ens.compensated();
            let compensated_paths = ens.compensated_paths();
            let features = if marks.is_empty() { w.clone() } else { w.hstack(&compensated_paths)? };
            let projectors = build_projectors(&features, &self.cfg.regression)?;
            let n = grid.steps();
            let terminal = (0..paths)
                .map(|p| match case.terminal {
                    BackwardTerminal::Constant { value } => value,
                    BackwardTerminal::Brownian => w.get(p, n)[0],
                    BackwardTerminal::CompensatedJump => compensated_paths.get(p, n)[0],
                })
                .collect();
            let problem = BackwardProblem {
                grid,
                m: 1,
                terminal,
                forward_noise: &ens.dw,
                jumps: (!marks.is_empty()).then(|| (&compensated, marks.rates())),
                backward_noise: &ens.db,
                projectors: projectors.iter().collect(),
                driver: &driver,
                backward_integrand: &backward,
            };
            let sol = solve_backward(&problem)?;
            let mut blocks = vec![("P", &sol.p), ("Q", &sol.q)];
            if !marks.is_empty() {
                blocks.push(("K", &sol.k));
            }
            let table = SolutionTable { grid, blocks };
            let writer = match &mut csv {
                Some(w) => w,
                None => csv.insert(CsvWriter::create(&self.out.file("solution.csv"), &table.header())?),
            };
            table.write_rows(writer, r * paths)?;
            let (mean, stderr) = sol.initial_estimate();
            replicates.push(json!({ "replicate": r, "p0": mean[0], "stderr": stderr[0] }));
        }
        if let Some(w) = csv {
            w.finish()?;
        }
        Ok(json!({ "problem": "backward", "replicates": replicates }))
    }

    pub fn feynman_kac(&self) -> Outcome {
        let Problem::Pide { case } = &self.cfg.problem else {
            return Err(unsupported(&self.cfg.problem, "a scalar integro-PDE").into());
        };
        let fk = self
            .cfg
            .feynman_kac
            .as_ref()
            .ok_or_else(|| DsdeError::InvalidArgument("feynman-kac needs a `feynman_kac` section".into()))?;
        let sys = case.build()?;
        let grid = self.cfg.time_grid()?;
        let ens = EnsembleConfig {
            paths: self.cfg.ensemble.paths,
            replicates: self.cfg.ensemble.b_replicates,
            seed: self.seed,
            ..EnsembleConfig::default()
        };
        let points = fk.points();
        let field_header = ["t", "x", "u", "stderr"].map(String::from);
        let mut field = CsvWriter::create(&self.out.file("field.csv"), &field_header)?;
        let summary = match &fk.fd {
            Some(fd) => {
                let table = compare_feynman_kac(&sys, &points, grid, &ens, &self.cfg.regression, fd)?;
                let header = [
                    "t", "x", "monte_carlo", "stderr", "finite_difference", "fd_error", "difference", "tolerance", "within",
                ]
                .map(String::from);
                let mut cmp = CsvWriter::create(&self.out.file("comparison.csv"), &header)?;
                for row in &table.rows {
                    field.row(&[row.t.into(), row.x.into(), row.monte_carlo.into(), row.stderr.into()])?;
                    cmp.row(&[
                        row.t.into(),
                        row.x.into(),
                        row.monte_carlo.into(),
                        row.stderr.into(),
                        row.finite_difference.into(),
                        row.fd_error.into(),
                        row.difference.into(),
                        row.tolerance.into(),
                        Cell::Int(row.within() as usize),
                    ])?;
                }
                cmp.finish()?;
                let failed = table.rows.iter().filter(|r| !r.within()).count();
                json!({ "points": points.len(), "compared": true, "outside_tolerance": failed, "all_within": failed == 0 })
            }
            None => {
                for &(t, x) in &points {
                    let u = evaluate_u(&sys, t, &[x], grid, &ens, &self.cfg.regression)?;
                    field.row(&[t.into(), x.into(), u.value[0].into(), u.stderr[0].into()])?;
                }
                json!({ "points": points.len(), "compared": false })
            }
        };
        field.finish()?;
        Ok(summary)
    }

    pub fn continuity(&self) -> Outcome {
        let spec = self.cfg.problem.linear_spec()?;
        let cc = self
            .cfg
            .continuity
            .as_ref()
            .ok_or_else(|| DsdeError::InvalidArgument("continuity needs a `continuity` section".into()))?;
        let family = match cc.family {
            FamilyKind::AdditiveDrift => ParameterFamily::additive_drift(spec, cc.alphas.clone())?,
            FamilyKind::Constant => ParameterFamily::constant(spec, cc.alphas.clone())?,
        };
        let noise = self.noise_for(&family.baseline)?;
        let table = continuity_study(&family, &noise, &self.cfg.homotopy, &self.cfg.regression)?;
        let header = ["alpha", "distance", "distance_over_alpha_sq"].map(String::from);
        let mut csv = CsvWriter::create(&self.out.file("continuity.csv"), &header)?;
        for row in &table.rows {
            let ratio = row.distance.map(|d| d / (row.alpha * row.alpha));
            csv.row(&[row.alpha.into(), row.distance.into(), ratio.into()])?;
        }
        csv.finish()?;
        let failures: Vec<_> = table.rows.iter().filter_map(|r| r.error.as_ref().map(|e| json!({ "alpha": r.alpha, "error": e }))).collect();
        Ok(json!({
            "problem": self.cfg.problem.name(),
            "strictly_decreasing": table.strictly_decreasing(),
            "quadratic_ratio_spread": table.quadratic_ratio_spread(),
            "failures": failures,
        }))
    }

    pub fn hamiltonian(&self) -> Outcome {
        let Problem::Hamiltonian { hamiltonian, noise } = &self.cfg.problem else {
            return Err(unsupported(&self.cfg.problem, "a quadratic Hamiltonian").into());
        };
        let (d, l, marks) = match *noise {
            HamiltonianNoise::None => (0, 0, MarkSpace::empty()),
            HamiltonianNoise::Full { rate } => (1, 1, MarkSpace::single(rate)?),
        };
        let grid = self.cfg.time_grid()?;
        let ens = NoiseEnsemble::sample(grid, d, l, &marks, self.seed, self.cfg.ensemble.paths, BMode::Independent)?;
        let mut sampler = self.cfg.sampler.clone();
        if let Some(s) = self.seed_override {
            sampler.seed = s;
        }
        let (sol, report) = match hamiltonian_demo(hamiltonian, &ens, &self.cfg.homotopy, &self.cfg.regression, &sampler) {
            Ok(ok) => ok,
            Err(DemoFailure::Solve(f)) => {
                write_trace(&self.out.file("trace.csv"), &f.trace)?;
                return Err(f.error.into());
            }
            Err(DemoFailure::Setup(e)) => return Err(e.into()),
        };
        SolutionTable::quintuple(&sol).write(&self.out.file("solution.csv"))?;
        write_trace(&self.out.file("trace.csv"), &report.trace)?;
        let header = ["t", "mean_x", "stderr_x", "mean_p", "stderr_p", "bvp_x", "bvp_p"].map(String::from);
        let mut csv = CsvWriter::create(&self.out.file("mean_path.csv"), &header)?;
        for r in &report.mean_path {
            csv.row(&[
                r.t.into(),
                r.mean_x.into(),
                r.stderr_x.into(),
                r.mean_p.into(),
                r.stderr_p.into(),
                r.bvp_x.into(),
                r.bvp_p.into(),
            ])?;
        }
        csv.finish()?;
        write_json(&self.out.file("report.json"), &report)?;
        Ok(json!({
            "checks_passed": report.checks_passed(),
            "max_bvp_error": report.max_bvp_error,
            "max_standardised_error": report.max_standardised_error,
            "final_alpha": report.trace.final_alpha(),
        }))
    }
}
