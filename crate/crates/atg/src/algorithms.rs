//! Level-loop drivers for the adaptive two-grid algorithms, the regular
//! adaptive baseline and a uniform two-grid baseline, plus the derived
//! quantities recorded per level (higher-order term sums, efficiency terms,
//! convergence slopes).
//!
//! Every driver follows the same skeleton: solve on the initial mesh, then
//! per level estimate -> mark -> bisect -> prolongate -> solve a linear(ized)
//! problem on the refined mesh. What distinguishes the algorithms is the
//! solve performed on each refined level:
//!
//! - `atg-linear`: SPD solve of the principal part, advection and reaction
//!   moved to the right-hand side at the prolongated previous solution;
//! - `atg-mild`: one nonsymmetric solve with coefficients frozen at the
//!   prolongated previous solution;
//! - `atg-mild-newton`: the `atg-mild` solve followed by one Newton
//!   correction about it;
//! - `atg-newton1` / `atg-newton2`: one / two Newton steps about the
//!   prolongated previous solution;
//! - `regular-adaptive`: a full Newton solve per level;
//! - `two-grid-uniform`: one coarse nonlinear solve plus a single linearized
//!   solve on each uniformly refined mesh.

use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use crate::adaptivity::{dorfler_mark, estimate, AdaptError, EstimatorReport, MarkedSet};
use crate::assembly::{
    assemble_advection_reaction, assemble_diffusion, assemble_linearized, assemble_load,
    mild_residual, nonlinear_residual,
};
use crate::fespace::{error_norms, prolongate, FeFunction, FeSpace, NormWeights};
use crate::geom;
use crate::linalg::{bicgstab_solve, cg_solve, newton_solve, norm_inf, SolveError};
use crate::mesh::{Mesh, MeshError, Refinement};
use crate::problems::{LinearProblem, NonlinearProblem, Problem};
use crate::quadrature::{triangle_rule, TriangleRule, UnsupportedOrder};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Quadrature(#[from] UnsupportedOrder),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
    #[error("solver failed on level {level}: {source}")]
    Solver { level: usize, source: SolveError },
    #[error("solver did not converge on level {level} (residual {residual:e})")]
    NotConverged { level: usize, residual: f64 },
}

/// The algorithm drivers selectable from the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    AtgLinear,
    AtgMild,
    AtgMildNewton,
    AtgNewton1,
    AtgNewton2,
    RegularAdaptive,
    TwoGridUniform,
}

pub const ALGORITHM_NAMES: [&str; 7] = [
    "atg-linear",
    "atg-mild",
    "atg-mild-newton",
    "atg-newton1",
    "atg-newton2",
    "regular-adaptive",
    "two-grid-uniform",
];

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::AtgLinear => "atg-linear",
            Algorithm::AtgMild => "atg-mild",
            Algorithm::AtgMildNewton => "atg-mild-newton",
            Algorithm::AtgNewton1 => "atg-newton1",
            Algorithm::AtgNewton2 => "atg-newton2",
            Algorithm::RegularAdaptive => "regular-adaptive",
            Algorithm::TwoGridUniform => "two-grid-uniform",
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atg-linear" => Ok(Algorithm::AtgLinear),
            "atg-mild" => Ok(Algorithm::AtgMild),
            "atg-mild-newton" => Ok(Algorithm::AtgMildNewton),
            "atg-newton1" => Ok(Algorithm::AtgNewton1),
            "atg-newton2" => Ok(Algorithm::AtgNewton2),
            "regular-adaptive" => Ok(Algorithm::RegularAdaptive),
            "two-grid-uniform" => Ok(Algorithm::TwoGridUniform),
            other => Err(format!(
                "unknown algorithm {other:?}; valid: {}",
                ALGORITHM_NAMES.join(", ")
            )),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Run parameters; see the CLI for the corresponding flags.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub problem: String,
    pub algorithm: Algorithm,
    pub theta: f64,
    pub initial_n: usize,
    pub max_levels: usize,
    pub max_dofs: usize,
    pub zeta_tilde: f64,
    pub lin_tol: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub quad_matrix_order: usize,
    pub quad_data_order: usize,
    pub seed: u64,
    /// Keep per-level meshes, solutions and reports in [`RunOutput::trace`].
    pub collect_trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: String::new(),
            algorithm: Algorithm::AtgMild,
            theta: 0.25,
            initial_n: 8,
            max_levels: 12,
            max_dofs: 300_000,
            zeta_tilde: 0.5,
            lin_tol: 1e-10,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            quad_matrix_order: 4,
            quad_data_order: 6,
            seed: 0,
            collect_trace: false,
        }
    }
}

/// Per-level measurements.
#[derive(Debug, Clone, Copy)]
pub struct LevelRecord {
    pub k: usize,
    pub n_dofs: usize,
    pub h1_semi_err: f64,
    pub l2_err: f64,
    pub energy_err: f64,
    pub eta_global: f64,
    pub osc_global: f64,
    pub hot1: f64,
    pub hot2: f64,
    pub hot3: f64,
    pub e1: f64,
    pub e2: f64,
    pub solver_iters: usize,
    pub wall_ms: u64,
}

/// One adaptive run.
#[derive(Debug, Clone)]
pub struct ConvergenceHistory {
    pub config: RunConfig,
    pub levels: Vec<LevelRecord>,
}

impl ConvergenceHistory {
    /// Least-squares slope of `log h1_semi_err` vs `log n_dofs` over the last
    /// `window` levels.
    pub fn h1_slope(&self, window: usize) -> Option<f64> {
        self.slope(window, |r| r.h1_semi_err)
    }

    /// Same for the global estimator.
    pub fn eta_slope(&self, window: usize) -> Option<f64> {
        self.slope(window, |r| r.eta_global)
    }

    pub fn slope(&self, window: usize, field: impl Fn(&LevelRecord) -> f64) -> Option<f64> {
        if window < 2 || self.levels.len() < window {
            return None;
        }
        let tail = &self.levels[self.levels.len() - window..];
        let xs: Vec<f64> = tail.iter().map(|r| r.n_dofs as f64).collect();
        let ys: Vec<f64> = tail.iter().map(&field).collect();
        Some(slope_loglog(&xs, &ys))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn slope_loglog(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "slope needs at least two points");
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Higher-order term sums of the convergence bound. For a history of L2
/// errors `e_0..e_m`, the record at level `m >= 1` carries
/// `hot1 = sum_i zeta^i e_{m-i}^2` (i = 0..m-1),
/// `hot2 = sum_i zeta^i e_{m-1-i}^2` (i = 0..m-1) and
/// `hot3 = sum_i zeta^i e_{m-2-i}^2` (i = 0..m-2); level 0 carries zeros.
pub fn compute_hot(l2_errors: &[f64], zeta: f64) -> Result<Vec<(f64, f64, f64)>, RunError> {
    if !(zeta > 0.0 && zeta < 1.0) {
        return Err(RunError::Config(format!("zeta-tilde must lie in (0, 1), got {zeta}")));
    }
    let sq = |v: f64| v * v;
    let mut out = Vec::with_capacity(l2_errors.len());
    for m in 0..l2_errors.len() {
        if m == 0 {
            out.push((0.0, 0.0, 0.0));
            continue;
        }
        let mut hot1 = 0.0;
        let mut hot2 = 0.0;
        let mut hot3 = 0.0;
        for i in 0..m {
            let z = zeta.powi(i as i32);
            hot1 += z * sq(l2_errors[m - i]);
            hot2 += z * sq(l2_errors[m - 1 - i]);
            if i + 2 <= m {
                hot3 += z * sq(l2_errors[m - 2 - i]);
            }
        }
        out.push((hot1, hot2, hot3));
    }
    Ok(out)
}

/// The two efficiency-bound terms: `e1` couples the H1 error with the
/// mesh-weighted Hessian defect (`D^2 u_h = 0` for linear elements), `e2`
/// couples the coarse-solution L2 error with the elementwise oscillation of
/// the strong-form transport term `sigma*`.
pub fn efficiency_terms(
    u: &FeFunction,
    frozen: &FeFunction,
    problem: &Problem,
    order: usize,
) -> Result<(f64, f64), RunError> {
    let rule = triangle_rule(order)?;
    let mesh = u.space().mesh();
    let exact = problem.exact();

    let mut h1_err2 = 0.0;
    let mut hess_term = 0.0;
    let mut coarse_l2 = 0.0;
    let mut sigma_term = 0.0;
    let mut sigma_samples = vec![0.0; rule.points.len()];
    for t in 0..mesh.n_triangles() {
        let area = mesh.area(t);
        let grad = u.gradient(t);
        let mut hess_mass = 0.0;
        for (q, (p, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let xy = mesh.point_at(t, *p);
            let (x, y) = (xy[0], xy[1]);
            let dg = geom::sub2(grad, (exact.gradient)(x, y));
            h1_err2 += area * w * geom::dot2(dg, dg);
            let dw = frozen.value_at(t, *p) - (exact.value)(x, y);
            coarse_l2 += area * w * dw * dw;
            let hess = (exact.hessian)(x, y);
            hess_mass += area * w * geom::mat_ddot(hess, hess);
            sigma_samples[q] = sigma_star(problem, x, y);
        }
        // H_K^2 = |K|
        hess_term += area * hess_mass;
        sigma_term +=
            area * crate::adaptivity::p0_deviation_sq(&sigma_samples, &rule.weights, area);
    }
    let e1 = h1_err2.sqrt() + hess_term.sqrt();
    let e2 = coarse_l2.sqrt() + sigma_term.sqrt();
    Ok((e1, e2))
}

/// Strong-form transport term of the exact solution:
/// `sigma* = -alpha^T : D^2 u - div(alpha^T) . grad u + beta . grad u + gamma u`
/// (with coefficients frozen at the exact solution for nonlinear problems).
pub fn sigma_star(problem: &Problem, x: f64, y: f64) -> f64 {
    let exact = problem.exact();
    let u = (exact.value)(x, y);
    let g = (exact.gradient)(x, y);
    let h = (exact.hessian)(x, y);
    match problem {
        Problem::Linear(p) => {
            let alpha = (p.diffusion)(x, y);
            let div = p.diffusion_div.as_ref().map_or([0.0, 0.0], |d| d(x, y));
            -geom::mat_ddot(alpha, h) - geom::dot2(div, g)
                + geom::dot2((p.advection)(x, y), g)
                + (p.reaction)(x, y) * u
        }
        Problem::Nonlinear(p) => match &p.mild {
            Some(m) => {
                let alpha = (m.diffusion)(x, y, u);
                let alpha_du = (m.diffusion_du)(x, y, u);
                let divx = m.diffusion_div.as_ref().map_or([0.0, 0.0], |d| d(x, y, u));
                let div = [
                    geom::dot2([alpha_du[0][0], alpha_du[0][1]], g) + divx[0],
                    geom::dot2([alpha_du[1][0], alpha_du[1][1]], g) + divx[1],
                ];
                -geom::mat_ddot(alpha, h) - geom::dot2(div, g)
                    + geom::dot2((m.advection)(x, y, u), g)
                    + (m.reaction)(x, y, u)
            }
            None => {
                let a = (p.general.flux_dgrad)(x, y, u, g);
                let b = (p.general.flux_du)(x, y, u, g);
                -geom::mat_ddot(a, h) - geom::dot2(b, g)
                    + (p.general.lower_order)(x, y, u, g)
            }
        },
    }
}

/// Per-level artifacts kept when `collect_trace` is set.
pub struct LevelTrace {
    pub mesh: Arc<Mesh>,
    pub space: Arc<FeSpace>,
    pub solution: FeFunction,
    /// The function used in the frozen coefficient slots of this level's
    /// estimator.
    pub frozen: FeFunction,
    /// The pre-correction iterate of the Newton-correction algorithms.
    pub intermediate: Option<FeFunction>,
    pub report: EstimatorReport,
    /// Marking that produced the next level, if any.
    pub marked: Option<MarkedSet>,
    /// Refinement to the next level, if any.
    pub refinement: Option<Arc<Refinement>>,
    /// Max-norm nonlinear residuals after the first and second Newton step of
    /// `atg-newton2`.
    pub newton_residuals: Option<(f64, f64)>,
    /// Relative residual of this level's linear solve(s).
    pub solve_residual: f64,
}

/// Driver result: the history (always complete up to the failure level) plus
/// optional per-level artifacts. `failure` is set when a solver gave up
/// mid-run; the recorded levels remain valid.
pub struct RunOutput {
    pub history: ConvergenceHistory,
    pub trace: Vec<LevelTrace>,
    pub failure: Option<RunError>,
}

/// Dispatch a run on problem kind and algorithm. Configuration mismatches
/// (wrong problem kind, invalid theta or orders) fail fast; solver failures
/// mid-run return a partial history with `failure` set.
pub fn run(problem: &Problem, config: &RunConfig) -> Result<RunOutput, RunError> {
    validate(problem, config)?;
    match (problem, config.algorithm) {
        (Problem::Linear(_), Algorithm::AtgLinear) => Driver::new(config)?.adaptive_linear(problem),
        (Problem::Linear(_), Algorithm::TwoGridUniform) => {
            Driver::new(config)?.two_grid_linear(problem)
        }
        (Problem::Nonlinear(_), Algorithm::TwoGridUniform) => {
            Driver::new(config)?.two_grid_nonlinear(problem)
        }
        (Problem::Nonlinear(_), _) => Driver::new(config)?.adaptive_nonlinear(problem),
        (Problem::Linear(_), alg) => Err(RunError::Config(format!(
            "algorithm {alg} needs a nonlinear problem; use atg-linear or two-grid-uniform"
        ))),
    }
}

fn validate(problem: &Problem, config: &RunConfig) -> Result<(), RunError> {
    if !(config.theta > 0.0 && config.theta < 1.0) {
        return Err(RunError::Config(format!("theta must lie in (0, 1), got {}", config.theta)));
    }
    if !(config.zeta_tilde > 0.0 && config.zeta_tilde < 1.0) {
        return Err(RunError::Config(format!(
            "zeta-tilde must lie in (0, 1), got {}",
            config.zeta_tilde
        )));
    }
    if config.initial_n == 0 {
        return Err(RunError::Config("initial-n must be at least 1".into()));
    }
    triangle_rule(config.quad_matrix_order)?;
    triangle_rule(config.quad_data_order)?;
    match (problem, config.algorithm) {
        (Problem::Linear(_), Algorithm::AtgLinear | Algorithm::TwoGridUniform) => Ok(()),
        (Problem::Linear(_), alg) => Err(RunError::Config(format!(
            "algorithm {alg} needs a nonlinear problem"
        ))),
        (Problem::Nonlinear(_), Algorithm::AtgLinear) => Err(RunError::Config(
            "atg-linear needs the linear problem (linear-nonspd)".into(),
        )),
        (Problem::Nonlinear(p), _) => {
            if p.mild.is_none() {
                return Err(RunError::Config(format!(
                    "problem {} has no mild coefficient split for the estimator",
                    p.name
                )));
            }
            Ok(())
        }
    }
}

struct Driver {
    config: RunConfig,
    matrix_rule: TriangleRule,
    data_rule: TriangleRule,
    records: Vec<LevelRecord>,
    trace: Vec<LevelTrace>,
    l2_errors: Vec<f64>,
}

/// Everything a level contributes before marking.
struct LevelState {
    space: Arc<FeSpace>,
    solution: FeFunction,
    frozen: FeFunction,
    intermediate: Option<FeFunction>,
    solver_iters: usize,
    solve_residual: f64,
    newton_residuals: Option<(f64, f64)>,
}

impl Driver {
    fn new(config: &RunConfig) -> Result<Driver, RunError> {
        Ok(Driver {
            matrix_rule: triangle_rule(config.quad_matrix_order)?,
            data_rule: triangle_rule(config.quad_data_order)?,
            config: config.clone(),
            records: Vec::new(),
            trace: Vec::new(),
            l2_errors: Vec::new(),
        })
    }

    fn finish(mut self, failure: Option<RunError>) -> Result<RunOutput, RunError> {
        let hots = compute_hot(&self.l2_errors, self.config.zeta_tilde)?;
        for (rec, (h1, h2, h3)) in self.records.iter_mut().zip(hots) {
            rec.hot1 = h1;
            rec.hot2 = h2;
            rec.hot3 = h3;
        }
        Ok(RunOutput {
            history: ConvergenceHistory { config: self.config, levels: self.records },
            trace: self.trace,
            failure,
        })
    }

    /// Record level data and stash trace artifacts; returns the report for
    /// marking.
    fn record_level(
        &mut self,
        problem: &Problem,
        state: &LevelState,
        started: Instant,
    ) -> Result<EstimatorReport, RunError> {
        let report = estimate(
            &state.solution,
            &state.frozen,
            problem,
            self.config.quad_data_order,
        )?;
        let weight = problem.energy_weight();
        let exact = problem.exact();
        let norms = error_norms(
            &state.solution,
            &*exact.value,
            &*exact.gradient,
            NormWeights { principal: &weight, frozen: &weight },
            self.config.quad_data_order,
        )?;
        let (e1, e2) = efficiency_terms(
            &state.solution,
            &state.frozen,
            problem,
            self.config.quad_data_order,
        )?;
        let k = self.records.len();
        self.l2_errors.push(norms.l2);
        self.records.push(LevelRecord {
            k,
            n_dofs: state.space.n_dofs(),
            h1_semi_err: norms.h1_semi,
            l2_err: norms.l2,
            energy_err: norms.energy2,
            eta_global: report.eta_global,
            osc_global: report.osc_global,
            hot1: 0.0,
            hot2: 0.0,
            hot3: 0.0,
            e1,
            e2,
            solver_iters: state.solver_iters,
            wall_ms: started.elapsed().as_millis() as u64,
        });
        if self.config.collect_trace {
            self.trace.push(LevelTrace {
                mesh: Arc::clone(state.space.mesh()),
                space: Arc::clone(&state.space),
                solution: state.solution.clone(),
                frozen: state.frozen.clone(),
                intermediate: state.intermediate.clone(),
                report: report.clone(),
                marked: None,
                refinement: None,
                newton_residuals: state.newton_residuals,
                solve_residual: state.solve_residual,
            });
        }
        Ok(report)
    }

    fn note_refinement(&mut self, marked: MarkedSet, refinement: &Arc<Refinement>) {
        if let Some(last) = self.trace.last_mut() {
            last.marked = Some(marked);
            last.refinement = Some(Arc::clone(refinement));
        }
    }

    fn should_stop(&self, level: usize, n_dofs: usize, eta: f64) -> bool {
        level >= self.config.max_levels || n_dofs >= self.config.max_dofs || eta == 0.0
    }

    // ---- adaptive loop over a linear problem (algorithm: atg-linear) ----

    fn adaptive_linear(mut self, wrapped: &Problem) -> Result<RunOutput, RunError> {
        let Problem::Linear(problem) = wrapped else { unreachable!("dispatched in run()") };
        let mesh = Arc::new(Mesh::initial_uniform(self.config.initial_n)?);
        let space = FeSpace::new(mesh);

        // Step 1: full nonsymmetric solve on the initial mesh.
        let started = Instant::now();
        let full = assemble_diffusion(&space, |ep| (problem.diffusion)(ep.xy[0], ep.xy[1]), &self.matrix_rule)
            .add(&assemble_advection_reaction(
                &space,
                |ep| (problem.advection)(ep.xy[0], ep.xy[1]),
                |ep| (problem.reaction)(ep.xy[0], ep.xy[1]),
                &self.matrix_rule,
            ));
        let load = assemble_load(&space, |ep| (problem.source)(ep.xy[0], ep.xy[1]), &self.data_rule);
        let (u0, report0) = match solve_nonsym(&full, &load, self.config.lin_tol, 0) {
            Ok(v) => v,
            Err(e) => return self.finish(Some(e)),
        };
        let u0 = FeFunction::from_coeffs(&space, u0).expect("solution length");
        let mut state = LevelState {
            space,
            frozen: u0.clone(),
            solution: u0,
            intermediate: None,
            solver_iters: report0.iterations,
            solve_residual: report0.final_residual,
            newton_residuals: None,
        };
        let mut started = started;

        for level in 0.. {
            let report = self.record_level(wrapped, &state, started)?;
            let n_dofs = state.space.n_dofs();
            if self.should_stop(level, n_dofs, report.eta_global) {
                break;
            }
            let marked = dorfler_mark(&report, state.space.mesh(), self.config.theta)?;
            let refinement = Arc::new(state.space.mesh().bisect_marked(&marked.elements)?);
            self.note_refinement(marked, &refinement);
            let fine_mesh = Arc::new(refinement.mesh.clone());
            let fine_space = FeSpace::new(fine_mesh);
            let w = prolongate(&state.solution, &refinement, &fine_space)
                .map_err(|e| RunError::Config(e.to_string()))?;

            started = Instant::now();
            // Step 2: SPD solve of the principal part with the advection and
            // reaction data taken from the prolongated coarse solution.
            let stiffness = assemble_diffusion(
                &fine_space,
                |ep| (problem.diffusion)(ep.xy[0], ep.xy[1]),
                &self.matrix_rule,
            );
            let rhs = assemble_load(
                &fine_space,
                |ep| {
                    let (x, y) = (ep.xy[0], ep.xy[1]);
                    let gw = w.gradient(ep.tri);
                    let wv = w.value_at(ep.tri, ep.bary);
                    (problem.source)(x, y)
                        - geom::dot2((problem.advection)(x, y), gw)
                        - (problem.reaction)(x, y) * wv
                },
                &self.data_rule,
            );
            let max_iter = 10 * stiffness.n().max(10);
            let (coeffs, solve) =
                match cg_solve(&stiffness, &rhs, self.config.lin_tol, max_iter) {
                    Ok((c, r)) if r.converged => (c, r),
                    Ok((_, r)) => {
                        return self.finish(
                            Some(RunError::NotConverged { level: level + 1, residual: r.final_residual }),
                        )
                    }
                    Err(e) => {
                        return self
                            .finish(Some(RunError::Solver { level: level + 1, source: e }))
                    }
                };
            let solution = FeFunction::from_coeffs(&fine_space, coeffs).expect("solution length");
            state = LevelState {
                space: fine_space,
                solution,
                frozen: w,
                intermediate: None,
                solver_iters: solve.iterations,
                solve_residual: solve.final_residual,
                newton_residuals: None,
            };
        }
        self.finish(None)
    }

    // ---- adaptive loops over nonlinear problems ----

    fn adaptive_nonlinear(mut self, wrapped: &Problem) -> Result<RunOutput, RunError> {
        let Problem::Nonlinear(problem) = wrapped else { unreachable!("dispatched in run()") };
        let algorithm = self.config.algorithm;
        let mesh = Arc::new(Mesh::initial_uniform(self.config.initial_n)?);
        let space = FeSpace::new(mesh);

        // Step 1: full Newton solve on the initial mesh.
        let started = Instant::now();
        let initial = FeFunction::zero(&space);
        let (u0, report0) = match newton_solve(
            &space,
            problem,
            initial,
            self.config.newton_tol,
            self.config.newton_max_iter,
            &self.data_rule,
        ) {
            Ok((u, r)) if r.converged => (u, r),
            Ok((_, r)) => {
                return self.finish(
                    Some(RunError::NotConverged { level: 0, residual: r.final_residual }),
                )
            }
            Err(e) => return self.finish(Some(RunError::Solver { level: 0, source: e })),
        };
        let mut state = LevelState {
            space,
            frozen: u0.clone(),
            solution: u0,
            intermediate: None,
            solver_iters: report0.iterations,
            solve_residual: report0.final_residual,
            newton_residuals: None,
        };
        let mut started = started;

        for level in 0.. {
            let report = self.record_level(wrapped, &state, started)?;
            if self.should_stop(level, state.space.n_dofs(), report.eta_global) {
                break;
            }
            let marked = dorfler_mark(&report, state.space.mesh(), self.config.theta)?;
            let refinement = Arc::new(state.space.mesh().bisect_marked(&marked.elements)?);
            self.note_refinement(marked, &refinement);
            let fine_mesh = Arc::new(refinement.mesh.clone());
            let fine_space = FeSpace::new(fine_mesh);
            let w = prolongate(&state.solution, &refinement, &fine_space)
                .map_err(|e| RunError::Config(e.to_string()))?;

            started = Instant::now();
            state = match self.nonlinear_level_step(problem, algorithm, &fine_space, w, level + 1) {
                Ok(s) => s,
                Err(failure) => return self.finish(Some(failure)),
            };
        }
        self.finish(None)
    }

    /// One refined-level solve of the nonlinear adaptive algorithms.
    fn nonlinear_level_step(
        &self,
        problem: &NonlinearProblem,
        algorithm: Algorithm,
        space: &Arc<FeSpace>,
        w: FeFunction,
        level: usize,
    ) -> Result<LevelState, RunError> {
        let mild = problem.mild.as_ref().expect("validated");
        match algorithm {
            Algorithm::AtgMild => {
                let (solution, iters, residual) = self.mild_solve(problem, space, &w, level)?;
                Ok(LevelState {
                    space: Arc::clone(space),
                    solution,
                    frozen: w,
                    intermediate: None,
                    solver_iters: iters,
                    solve_residual: residual,
                    newton_residuals: None,
                })
            }
            Algorithm::AtgMildNewton => {
                let (tilde, iters1, _) = self.mild_solve(problem, space, &w, level)?;
                // One Newton correction about the mild iterate, driven by the
                // mild-form residual.
                let res = mild_residual(space, &tilde, mild, &problem.source, &self.data_rule);
                let (solution, iters2, residual) =
                    self.newton_step_from(problem, space, &tilde, res, level)?;
                Ok(LevelState {
                    space: Arc::clone(space),
                    solution,
                    frozen: w,
                    intermediate: Some(tilde),
                    solver_iters: iters1 + iters2,
                    solve_residual: residual,
                    newton_residuals: None,
                })
            }
            Algorithm::AtgNewton1 => {
                let res = nonlinear_residual(space, &w, problem, &self.data_rule);
                let (solution, iters, residual) =
                    self.newton_step_from(problem, space, &w, res, level)?;
                Ok(LevelState {
                    space: Arc::clone(space),
                    solution,
                    frozen: w,
                    intermediate: None,
                    solver_iters: iters,
                    solve_residual: residual,
                    newton_residuals: None,
                })
            }
            Algorithm::AtgNewton2 => {
                let res = nonlinear_residual(space, &w, problem, &self.data_rule);
                let (tilde, iters1, _) = self.newton_step_from(problem, space, &w, res, level)?;
                let res1 = nonlinear_residual(space, &tilde, problem, &self.data_rule);
                let after_first = norm_inf(&res1);
                let (solution, iters2, residual) =
                    self.newton_step_from(problem, space, &tilde, res1, level)?;
                let res2 = nonlinear_residual(space, &solution, problem, &self.data_rule);
                Ok(LevelState {
                    space: Arc::clone(space),
                    solution,
                    // The estimator freezes coefficients at the base point of
                    // the final Newton step.
                    frozen: tilde.clone(),
                    intermediate: Some(tilde),
                    solver_iters: iters1 + iters2,
                    solve_residual: residual,
                    newton_residuals: Some((after_first, norm_inf(&res2))),
                })
            }
            Algorithm::RegularAdaptive => {
                let (solution, report) = match newton_solve(
                    space,
                    problem,
                    w,
                    self.config.newton_tol,
                    self.config.newton_max_iter,
                    &self.data_rule,
                ) {
                    Ok((u, r)) if r.converged => (u, r),
                    Ok((_, r)) => {
                        return Err(RunError::NotConverged { level, residual: r.final_residual })
                    }
                    Err(e) => return Err(RunError::Solver { level, source: e }),
                };
                Ok(LevelState {
                    space: Arc::clone(space),
                    frozen: solution.clone(),
                    solution,
                    intermediate: None,
                    solver_iters: report.iterations,
                    solve_residual: report.final_residual,
                    newton_residuals: None,
                })
            }
            _ => unreachable!("dispatched in run()"),
        }
    }

    /// The frozen-coefficient solve of Algorithm `atg-mild`:
    /// `(alpha(w) grad u, grad v) + (beta(w) . grad u, v) = (f - gamma(w), v)`.
    fn mild_solve(
        &self,
        problem: &NonlinearProblem,
        space: &Arc<FeSpace>,
        w: &FeFunction,
        level: usize,
    ) -> Result<(FeFunction, usize, f64), RunError> {
        let mild = problem.mild.as_ref().expect("validated");
        let frozen_value = |ep: &crate::assembly::ElemPoint| w.value_at(ep.tri, ep.bary);
        let matrix = assemble_diffusion(
            space,
            |ep| (mild.diffusion)(ep.xy[0], ep.xy[1], frozen_value(ep)),
            &self.matrix_rule,
        )
        .add(&assemble_advection_reaction(
            space,
            |ep| (mild.advection)(ep.xy[0], ep.xy[1], frozen_value(ep)),
            |_| 0.0,
            &self.matrix_rule,
        ));
        let rhs = assemble_load(
            space,
            |ep| {
                let (x, y) = (ep.xy[0], ep.xy[1]);
                (problem.source)(x, y) - (mild.reaction)(x, y, frozen_value(ep))
            },
            &self.data_rule,
        );
        let (coeffs, report) = solve_nonsym(&matrix, &rhs, self.config.lin_tol, level)?;
        Ok((
            FeFunction::from_coeffs(space, coeffs).expect("solution length"),
            report.iterations,
            report.final_residual,
        ))
    }

    /// One Newton step about `base` with a precomputed residual.
    fn newton_step_from(
        &self,
        problem: &NonlinearProblem,
        space: &Arc<FeSpace>,
        base: &FeFunction,
        residual: Vec<f64>,
        level: usize,
    ) -> Result<(FeFunction, usize, f64), RunError> {
        let jacobian = assemble_linearized(space, base, problem, &self.data_rule);
        let rhs: Vec<f64> = residual.iter().map(|r| -r).collect();
        let (delta, report) = solve_nonsym(&jacobian, &rhs, self.config.lin_tol, level)?;
        let step = FeFunction::from_coeffs(space, delta).expect("solution length");
        let mut next = base.clone();
        next.axpy(1.0, &step).expect("same space");
        Ok((next, report.iterations, report.final_residual))
    }

    // ---- uniform two-grid baseline ----

    fn two_grid_linear(mut self, wrapped: &Problem) -> Result<RunOutput, RunError> {
        let Problem::Linear(problem) = wrapped else { unreachable!("dispatched in run()") };
        let n0 = self.config.initial_n;
        let started = Instant::now();
        let coarse = self.solve_linear_full(problem, n0, 0);
        let (coarse_fn, coarse_iters) = match coarse {
            Ok(v) => v,
            Err(e) => return self.finish(Some(e)),
        };
        let mut started = started;

        for level in 0..=self.config.max_levels {
            let n = n0 << level;
            if n.checked_sub(1).map_or(true, |m| m * m > self.config.max_dofs) {
                break;
            }
            let mesh = Arc::new(Mesh::initial_uniform(n)?);
            let space = FeSpace::new(mesh);
            let w = interpolate_uniform(&coarse_fn, n0, &space);
            let stiffness = assemble_diffusion(
                &space,
                |ep| (problem.diffusion)(ep.xy[0], ep.xy[1]),
                &self.matrix_rule,
            );
            let rhs = assemble_load(
                &space,
                |ep| {
                    let (x, y) = (ep.xy[0], ep.xy[1]);
                    let gw = w.gradient(ep.tri);
                    let wv = w.value_at(ep.tri, ep.bary);
                    (problem.source)(x, y)
                        - geom::dot2((problem.advection)(x, y), gw)
                        - (problem.reaction)(x, y) * wv
                },
                &self.data_rule,
            );
            let (coeffs, report) =
                match cg_solve(&stiffness, &rhs, self.config.lin_tol, 10 * stiffness.n().max(10)) {
                    Ok((c, r)) if r.converged => (c, r),
                    Ok((_, r)) => {
                        return self.finish(
                            Some(RunError::NotConverged { level, residual: r.final_residual }),
                        )
                    }
                    Err(e) => {
                        return self.finish(Some(RunError::Solver { level, source: e }))
                    }
                };
            let solution = FeFunction::from_coeffs(&space, coeffs).expect("solution length");
            let state = LevelState {
                space,
                solution,
                frozen: w,
                intermediate: None,
                solver_iters: report.iterations + if level == 0 { coarse_iters } else { 0 },
                solve_residual: report.final_residual,
                newton_residuals: None,
            };
            self.record_level(wrapped, &state, started)?;
            started = Instant::now();
        }
        self.finish(None)
    }

    fn two_grid_nonlinear(mut self, wrapped: &Problem) -> Result<RunOutput, RunError> {
        let Problem::Nonlinear(problem) = wrapped else { unreachable!("dispatched in run()") };
        let n0 = self.config.initial_n;
        let started = Instant::now();
        let coarse_mesh = Arc::new(Mesh::initial_uniform(n0)?);
        let coarse_space = FeSpace::new(coarse_mesh);
        let (coarse_fn, coarse_report) = match newton_solve(
            &coarse_space,
            problem,
            FeFunction::zero(&coarse_space),
            self.config.newton_tol,
            self.config.newton_max_iter,
            &self.data_rule,
        ) {
            Ok((u, r)) if r.converged => (u, r),
            Ok((_, r)) => {
                return self.finish(
                    Some(RunError::NotConverged { level: 0, residual: r.final_residual }),
                )
            }
            Err(e) => return self.finish(Some(RunError::Solver { level: 0, source: e })),
        };
        let mut started = started;

        for level in 0..=self.config.max_levels {
            let n = n0 << level;
            if n.checked_sub(1).map_or(true, |m| m * m > self.config.max_dofs) {
                break;
            }
            let mesh = Arc::new(Mesh::initial_uniform(n)?);
            let space = FeSpace::new(mesh);
            let w = interpolate_uniform(&coarse_fn, n0, &space);
            let res = nonlinear_residual(&space, &w, problem, &self.data_rule);
            let (solution, iters, residual) =
                self.newton_step_from(problem, &space, &w, res, level)?;
            let state = LevelState {
                space,
                solution,
                frozen: w,
                intermediate: None,
                solver_iters: iters + if level == 0 { coarse_report.iterations } else { 0 },
                solve_residual: residual,
                newton_residuals: None,
            };
            self.record_level(wrapped, &state, started)?;
            started = Instant::now();
        }
        self.finish(None)
    }

    fn solve_linear_full(
        &self,
        problem: &LinearProblem,
        n: usize,
        level: usize,
    ) -> Result<(FeFunction, usize), RunError> {
        let mesh = Arc::new(Mesh::initial_uniform(n)?);
        let space = FeSpace::new(mesh);
        let full = assemble_diffusion(&space, |ep| (problem.diffusion)(ep.xy[0], ep.xy[1]), &self.matrix_rule)
            .add(&assemble_advection_reaction(
                &space,
                |ep| (problem.advection)(ep.xy[0], ep.xy[1]),
                |ep| (problem.reaction)(ep.xy[0], ep.xy[1]),
                &self.matrix_rule,
            ));
        let load = assemble_load(&space, |ep| (problem.source)(ep.xy[0], ep.xy[1]), &self.data_rule);
        let (coeffs, report) = solve_nonsym(&full, &load, self.config.lin_tol, level)?;
        Ok((FeFunction::from_coeffs(&space, coeffs).expect("solution length"), report.iterations))
    }
}

fn solve_nonsym(
    matrix: &crate::linalg::CsrMatrix,
    rhs: &[f64],
    tol: f64,
    level: usize,
) -> Result<(Vec<f64>, crate::linalg::SolveReport), RunError> {
    match bicgstab_solve(matrix, rhs, tol, 10 * matrix.n().max(10)) {
        Ok((x, r)) if r.converged => Ok((x, r)),
        Ok((_, r)) => Err(RunError::NotConverged { level, residual: r.final_residual }),
        Err(e) => Err(RunError::Solver { level, source: e }),
    }
}

/// Evaluate a P1 function living on `initial_uniform(n)` at the vertices of
/// another uniform mesh (used by the two-grid baseline, where the fine mesh
/// is not produced by bisection records).
fn interpolate_uniform(coarse: &FeFunction, n: usize, fine_space: &Arc<FeSpace>) -> FeFunction {
    let h = 2.0 / n as f64;
    let eval = |x: f64, y: f64| {
        let i = (((x + 1.0) / h).floor() as isize).clamp(0, n as isize - 1) as usize;
        let j = (((y + 1.0) / h).floor() as isize).clamp(0, n as isize - 1) as usize;
        let fx = ((x + 1.0) - i as f64 * h) / h;
        let fy = ((y + 1.0) - j as f64 * h) / h;
        let cell = 2 * (j * n + i);
        if fy <= fx {
            // Lower-right triangle (ll, lr, ur).
            coarse.value_at(cell, [1.0 - fx, fx - fy, fy])
        } else {
            // Upper-left triangle (ll, ur, ul).
            coarse.value_at(cell + 1, [1.0 - fy, fx, fy - fx])
        }
    };
    FeFunction::interpolate(fine_space, eval)
}
