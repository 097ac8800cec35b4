//! Run orchestration for the five CLI modes.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adjoint::{
    compliance_gradient, fd_check, nominal_gradient, volume_fraction, volume_gradient, FdCheck,
};
use crate::config::{Mode, RunConfig};
use crate::error::{Error, Result};
use crate::fem::{FemModel, LoadCase, StructuredGrid};
use crate::filter::FilterOperator;
use crate::inner::{
    barrier_gap_bound, equilibrium_residual, solve_inner, worst_case_compliance, InnerProblem,
    InnerSettings, InnerSolution, MeanNorm,
};
use crate::io::{self, DensityField};
use crate::material::MaterialParams;
use crate::mma::{self, Diagnostics, Evaluation, IterationRecord, MmaResult};
use crate::oracle::{brute_force_worst_case, TinyInstance};

/// Mesh, loads and filter for one configuration.
pub struct Setup {
    pub model: FemModel,
    pub filter: FilterOperator,
    pub volume_fraction: f64,
    pub budget: f64,
    pub mean_norm: MeanNorm,
    pub inner: InnerSettings,
}

impl Setup {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let g = &cfg.grid;
        let grid = StructuredGrid::new(g.nx, g.ny, g.width, g.height)?;
        let load = LoadCase::cantilever(&grid, g.load_fraction)?;
        let model = FemModel::new(grid, load, cfg.material)?.with_backend(g.solver);
        let filter = FilterOperator::build(&model.grid, cfg.filter_radius());
        Ok(Self {
            model,
            filter,
            volume_fraction: cfg.constraints.volume_fraction,
            budget: cfg.constraints.budget,
            mean_norm: cfg.constraints.mean_norm,
            inner: cfg.inner,
        })
    }

    pub fn grid(&self) -> &StructuredGrid {
        &self.model.grid
    }

    fn volume_terms(&self, phys: &[f64]) -> (f64, f64, Vec<f64>) {
        let vol = volume_fraction(phys, self.grid());
        (
            vol,
            vol - self.volume_fraction,
            volume_gradient(&self.filter, self.grid()),
        )
    }

    /// Nominal compliance at `delta = 1/2` and its design gradient.
    pub fn nominal_evaluation(&self, x: &[f64]) -> Result<Evaluation> {
        let phys = self.filter.apply(x);
        let half = vec![0.5; phys.len()];
        let (u, c) = self.model.solve_nominal(&phys, &half)?;
        let gradient = nominal_gradient(&self.model, &phys, &half, &u, &self.filter);
        let (vol, g, dg) = self.volume_terms(&phys);
        Ok(Evaluation {
            objective: c,
            gradient,
            constraint: g,
            constraint_gradient: dg,
            diagnostics: Diagnostics {
                worst_case_compliance: c,
                volume: vol,
                inner_newton_iters: 0,
                inner_kkt_residual: 0.0,
            },
        })
    }

    /// Worst-case compliance, warm-started from `warm` when given. A failed
    /// warm start falls back to a cold start.
    pub fn worst_case(&self, phys: &[f64], warm: Option<&InnerSolution>) -> Result<InnerSolution> {
        let solve = |w| {
            solve_inner(
                &self.model,
                phys,
                self.budget,
                self.mean_norm,
                &self.inner,
                w,
            )
        };
        match (warm, solve(warm)) {
            (
                Some(_),
                Err(Error::InnerMaxIterations { .. } | Error::Unconverged(_) | Error::Singular(_)),
            ) => solve(None),
            (_, r) => r,
        }
    }

    /// Worst-case compliance and its design gradient.
    pub fn robust_evaluation(
        &self,
        x: &[f64],
        warm: Option<&InnerSolution>,
    ) -> Result<(Evaluation, InnerSolution)> {
        let phys = self.filter.apply(x);
        let sol = self.worst_case(&phys, warm)?;
        let problem = InnerProblem::new(&self.model, &phys, self.budget, self.mean_norm)?;
        let gradient = compliance_gradient(&problem, &sol, &self.filter)?;
        let c = worst_case_compliance(&self.model.load, &sol);
        let (vol, g, dg) = self.volume_terms(&phys);
        let ev = Evaluation {
            objective: c,
            gradient,
            constraint: g,
            constraint_gradient: dg,
            diagnostics: Diagnostics {
                worst_case_compliance: c,
                volume: vol,
                inner_newton_iters: sol.newton_iters,
                inner_kkt_residual: sol.kkt_residual_inf,
            },
        };
        Ok((ev, sol))
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.model.n_elements();
        (vec![self.model.params.rho_min; n], vec![1.0; n])
    }

    fn uniform_start(&self) -> Vec<f64> {
        vec![self.volume_fraction.max(self.model.params.rho_min); self.model.n_elements()]
    }

    fn clamp_start(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|v| v.clamp(self.model.params.rho_min, 1.0))
            .collect()
    }

    /// Nominal SIMP optimization.
    pub fn optimize_nominal(&self, x0: Vec<f64>, settings: &mma::MmaSettings) -> Result<MmaResult> {
        let (lo, hi) = self.bounds();
        mma::run(
            |x, _| self.nominal_evaluation(x),
            self.clamp_start(&x0),
            lo,
            hi,
            settings,
        )
    }

    /// Worst-case optimization; returns the last inner solution as well.
    pub fn optimize_robust(
        &self,
        x0: Vec<f64>,
        settings: &mma::MmaSettings,
    ) -> Result<(MmaResult, InnerSolution)> {
        let (lo, hi) = self.bounds();
        let mut last: Option<InnerSolution> = None;
        let res = mma::run(
            |x, _| {
                let (ev, sol) = self.robust_evaluation(x, last.as_ref())?;
                last = Some(sol);
                Ok(ev)
            },
            self.clamp_start(&x0),
            lo,
            hi,
            settings,
        )?;
        Ok((res, last.expect("at least one evaluation")))
    }

    /// Reference compliance at `delta = 1/2` and the worst case.
    pub fn evaluate_design(&self, x: &[f64]) -> Result<DesignEvaluation> {
        let phys = self.filter.apply(x);
        let (_, reference) = self.model.solve_nominal(&phys, &vec![0.5; phys.len()])?;
        let sol = self.worst_case(&phys, None)?;
        let worst = worst_case_compliance(&self.model.load, &sol);
        Ok(DesignEvaluation {
            reference_compliance: reference,
            worst_case_compliance: worst,
            worst_case_ratio_percent: 100.0 * worst / reference,
            volume_fraction: volume_fraction(&phys, self.grid()),
            inner_newton_iters: sol.newton_iters,
            inner_kkt_residual: sol.kkt_residual_inf,
            equilibrium_residual: equilibrium_residual(&self.model, &phys, &sol)?,
            phys,
            solution: sol,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DesignEvaluation {
    pub reference_compliance: f64,
    pub worst_case_compliance: f64,
    pub worst_case_ratio_percent: f64,
    pub volume_fraction: f64,
    pub inner_newton_iters: usize,
    pub inner_kkt_residual: f64,
    pub equilibrium_residual: f64,
    pub phys: Vec<f64>,
    pub solution: InnerSolution,
}

/// Comparison of a robust design against the baseline it started from.
/// Both percentages use the baseline's reference compliance.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineComparison {
    pub baseline_reference_compliance: f64,
    pub baseline_worst_case_compliance: f64,
    pub baseline_worst_case_percent: f64,
    pub robust_worst_case_percent: f64,
    pub improvement_points: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub nx: usize,
    pub ny: usize,
    #[serde(rename = "D")]
    pub budget: f64,
    pub reference_compliance: f64,
    pub worst_case_compliance: f64,
    /// `100 worst / reference` for this design.
    pub worst_case_ratio_percent: f64,
    pub volume_fraction: f64,
    pub outer_iterations: usize,
    pub converged: bool,
    pub inner_newton_iters_total: usize,
    pub final_inner_kkt_residual: f64,
    pub equilibrium_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineComparison>,
    pub wall_time_seconds: f64,
    pub config: RunConfig,
}

/// Everything a run leaves behind, in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub design: DensityField,
    pub history: Vec<IterationRecord>,
    pub evaluation: DesignEvaluation,
}

fn write_outputs(cfg: &RunConfig, setup: &Setup, out: &RunOutput) -> Result<()> {
    let dir = &cfg.io.output_dir;
    io::ensure_dir(dir)?;
    let grid = setup.grid();
    io::write_density(&dir.join("density.txt"), &out.design)?;
    io::write_bytes(
        &dir.join("density.pgm"),
        &io::density_pgm(grid, &out.evaluation.phys),
    )?;
    io::write_bytes(
        &dir.join("defects.pgm"),
        &io::defect_pgm(grid, &out.evaluation.phys, &out.evaluation.solution.delta),
    )?;
    if !out.history.is_empty() {
        io::write_bytes(
            &dir.join("convergence.csv"),
            io::convergence_csv(&out.history).as_bytes(),
        )?;
    }
    io::write_json(&dir.join("summary.json"), &out.summary)
}

fn load_design(cfg: &RunConfig, setup: &Setup) -> Result<Option<Vec<f64>>> {
    match &cfg.io.input_density_path {
        None => Ok(None),
        Some(p) => {
            let f = io::read_density(p)?;
            f.check_grid(setup.grid())?;
            Ok(Some(f.values))
        }
    }
}

fn summarize(
    cfg: &RunConfig,
    setup: &Setup,
    history: &[IterationRecord],
    converged: bool,
    ev: &DesignEvaluation,
    baseline: Option<BaselineComparison>,
    started: Instant,
) -> RunSummary {
    RunSummary {
        mode: cfg.mode,
        nx: setup.grid().nx,
        ny: setup.grid().ny,
        budget: setup.budget,
        reference_compliance: ev.reference_compliance,
        worst_case_compliance: ev.worst_case_compliance,
        worst_case_ratio_percent: ev.worst_case_ratio_percent,
        volume_fraction: ev.volume_fraction,
        outer_iterations: history.len().saturating_sub(1),
        converged,
        inner_newton_iters_total: history.iter().map(|r| r.inner_newton_iters).sum::<usize>()
            + ev.inner_newton_iters,
        final_inner_kkt_residual: ev.inner_kkt_residual,
        equilibrium_residual: ev.equilibrium_residual,
        baseline,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        config: cfg.clone(),
    }
}

fn finish(cfg: &RunConfig, setup: &Setup, out: RunOutput, write: bool) -> Result<RunOutput> {
    if write {
        write_outputs(cfg, setup, &out)?;
    }
    Ok(out)
}

/// Nominal SIMP optimization at `delta = 1/2`, followed by a worst-case
/// evaluation of the result.
pub fn run_baseline(cfg: &RunConfig, write: bool) -> Result<RunOutput> {
    let started = Instant::now();
    let setup = Setup::from_config(cfg)?;
    let res = setup.optimize_nominal(setup.uniform_start(), &cfg.outer)?;
    let ev = setup.evaluate_design(&res.x)?;
    let summary = summarize(cfg, &setup, &res.history, res.converged, &ev, None, started);
    let design = DensityField::new(setup.grid().nx, setup.grid().ny, res.x)?;
    finish(
        cfg,
        &setup,
        RunOutput {
            summary,
            design,
            history: res.history,
            evaluation: ev,
        },
        write,
    )
}

/// Worst-case evaluation of a stored design.
pub fn run_evaluate(cfg: &RunConfig, write: bool) -> Result<RunOutput> {
    let started = Instant::now();
    let setup = Setup::from_config(cfg)?;
    let x = load_design(cfg, &setup)?.ok_or_else(|| {
        Error::Validation(vec!["mode evaluate requires io.input_density_path".into()])
    })?;
    let ev = setup.evaluate_design(&x)?;
    let summary = summarize(cfg, &setup, &[], true, &ev, None, started);
    let design = DensityField::new(setup.grid().nx, setup.grid().ny, x)?;
    finish(
        cfg,
        &setup,
        RunOutput {
            summary,
            design,
            history: Vec::new(),
            evaluation: ev,
        },
        write,
    )
}

/// Worst-case optimization, optionally started from a stored baseline
/// design, which is then also evaluated for comparison.
pub fn run_robust(cfg: &RunConfig, write: bool) -> Result<RunOutput> {
    let started = Instant::now();
    let setup = Setup::from_config(cfg)?;
    let start = load_design(cfg, &setup)?;
    let baseline_eval = match &start {
        Some(x) => Some(setup.evaluate_design(x)?),
        None => None,
    };
    let x0 = start.unwrap_or_else(|| setup.uniform_start());
    let (res, _) = setup.optimize_robust(x0, &cfg.outer)?;
    let ev = setup.evaluate_design(&res.x)?;
    let baseline = baseline_eval.map(|b| {
        let robust = 100.0 * ev.worst_case_compliance / b.reference_compliance;
        BaselineComparison {
            baseline_reference_compliance: b.reference_compliance,
            baseline_worst_case_compliance: b.worst_case_compliance,
            baseline_worst_case_percent: b.worst_case_ratio_percent,
            robust_worst_case_percent: robust,
            improvement_points: b.worst_case_ratio_percent - robust,
        }
    });
    let summary = summarize(
        cfg,
        &setup,
        &res.history,
        res.converged,
        &ev,
        baseline,
        started,
    );
    let design = DensityField::new(setup.grid().nx, setup.grid().ny, res.x)?;
    finish(
        cfg,
        &setup,
        RunOutput {
            summary,
            design,
            history: res.history,
            evaluation: ev,
        },
        write,
    )
}

/// Deterministic test design: `V` plus a seeded perturbation of +-0.2.
pub fn perturbed_design(setup: &Setup, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = setup.model.params.rho_min;
    setup
        .uniform_start()
        .iter()
        .map(|v| (v + rng.gen_range(-0.2..0.2)).clamp(lo + 0.01, 0.99))
        .collect()
}

/// Adjoint gradient against central differences on a perturbed design.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<FdCheck> {
    let setup = Setup::from_config(cfg)?;
    let x = perturbed_design(&setup, cfg.seed);
    let tight = InnerSettings {
        kkt_tol: cfg.inner.kkt_tol.min(1e-11),
        ..cfg.inner
    };
    let solve = |x: &[f64]| -> Result<(Vec<f64>, InnerSolution)> {
        let phys = setup.filter.apply(x);
        let sol = solve_inner(
            &setup.model,
            &phys,
            setup.budget,
            setup.mean_norm,
            &tight,
            None,
        )?;
        Ok((phys, sol))
    };
    let (phys, sol) = solve(&x)?;
    let problem = InnerProblem::new(&setup.model, &phys, setup.budget, setup.mean_norm)?;
    let grad = compliance_gradient(&problem, &sol, &setup.filter)?;
    let n = x.len();
    let k = cfg.gradcheck.probes.min(n);
    let indices: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    let objective = |x: &[f64]| solve(x).map(|(_, s)| worst_case_compliance(&setup.model.load, &s));
    fd_check(objective, &x, &grad, &indices, cfg.gradcheck.step)
}

pub fn gradcheck_csv(check: &FdCheck) -> String {
    let mut s = String::from("element,analytic,numeric,relative_error\n");
    for k in 0..check.indices.len() {
        s.push_str(&format!(
            "{},{:e},{:e},{:e}\n",
            check.indices[k], check.analytic[k], check.numeric[k], check.relative_errors[k]
        ));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub instance: String,
    pub oracle: f64,
    pub solver: f64,
    /// `oracle - solver`.
    pub gap: f64,
    pub allowed: f64,
    pub pass: bool,
}

/// Enumeration versus Newton on 2- and 3-element strips: the oracle must lie
/// within `solver - 1e-4 oracle` and `solver + 0.5% + barrier gap`.
pub fn oracle_rows(
    params: MaterialParams,
    budget: f64,
    resolution: usize,
    inner: &InnerSettings,
) -> Result<Vec<OracleRow>> {
    let cases: [(&str, usize, Vec<f64>); 4] = [
        ("strip2_uniform", 2, vec![1.0, 1.0]),
        ("strip2_graded", 2, vec![0.9, 0.6]),
        ("strip3_uniform", 3, vec![1.0; 3]),
        ("strip3_graded", 3, vec![0.7, 1.0, 0.5]),
    ];
    let mut rows = Vec::new();
    for (name, nx, rho) in cases {
        let grid = StructuredGrid::unit(nx, 1)?;
        let load = LoadCase::cantilever(&grid, 0.05)?;
        let model = FemModel::new(grid, load, params)?;
        let inst = TinyInstance::new(&model.grid, &model.load, params, budget, MeanNorm::Material)?;
        let (_, oracle) = brute_force_worst_case(&inst, &rho, resolution)?;
        let sol = solve_inner(&model, &rho, budget, MeanNorm::Material, inner, None)?;
        let solver = worst_case_compliance(&model.load, &sol);
        let allowed = 5e-3 * oracle + barrier_gap_bound(nx, inner.mu_star);
        let gap = oracle - solver;
        rows.push(OracleRow {
            instance: name.into(),
            oracle,
            solver,
            gap,
            allowed,
            pass: gap >= -1e-4 * oracle && gap <= allowed,
        });
    }
    Ok(rows)
}

pub fn oracle_csv(rows: &[OracleRow]) -> String {
    let mut s = String::from("instance,oracle,solver,gap,allowed,pass\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{}\n",
            r.instance, r.oracle, r.solver, r.gap, r.allowed, r.pass
        ));
    }
    s
}

pub fn run_oracle(cfg: &RunConfig) -> Result<Vec<OracleRow>> {
    oracle_rows(
        cfg.material,
        cfg.constraints.budget,
        cfg.oracle.resolution,
        &cfg.inner,
    )
}

/// Dispatches on `cfg.mode`, writes every output file and returns the
/// text to print.
pub fn run(cfg: &RunConfig) -> Result<String> {
    let summary_text =
        |s: &RunSummary| serde_json::to_string_pretty(s).expect("summary serializes");
    match cfg.mode {
        Mode::Baseline => Ok(summary_text(&run_baseline(cfg, true)?.summary)),
        Mode::Evaluate => Ok(summary_text(&run_evaluate(cfg, true)?.summary)),
        Mode::Robust => Ok(summary_text(&run_robust(cfg, true)?.summary)),
        Mode::Gradcheck => {
            let csv = gradcheck_csv(&run_gradcheck(cfg)?);
            write_text(&cfg.io.output_dir, "gradcheck.csv", &csv)?;
            Ok(csv)
        }
        Mode::Oracle => {
            let csv = oracle_csv(&run_oracle(cfg)?);
            write_text(&cfg.io.output_dir, "oracle.csv", &csv)?;
            Ok(csv)
        }
    }
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    io::ensure_dir(dir)?;
    io::write_bytes(&dir.join(name), text.as_bytes())
}
