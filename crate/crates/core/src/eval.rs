//! Evaluation machinery: objective-value trajectories, cosine similarity to
//! the Newton direction, and Dolan-More performance profiles.
//!
//! Profile definitions: for problem `p` and solver `s`,
//! `m_{p,s} = ||xhat - x*|| / ||x_w - x*||` with `x_w` the worst final
//! iterate across solvers on `p`; `r_{p,s} = m_{p,s} / min_s m_{p,s}`; and
//! `rho_s(tau)` is the fraction of problems with `r_{p,s} <= tau`. A solver
//! that diverges records the worst measure (1) instead of aborting the suite.

use rayon::prelude::*;

use crate::baselines::{
    self, run_adahessian, run_adam, run_lbfgs, run_sr1, HessianDiagMode, SolverKind, StepRule,
};
use crate::linalg;
use crate::lsr1::{self, RunOptions, Trajectory};
use crate::model::LsrOneModel;
use crate::objectives::{
    quadratic_diagonal, BenchmarkObjective, ObjectiveError,
};
use crate::rng::{derive_seed, Rng};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty solver set")]
    EmptySolverSet,
    #[error("empty problem set")]
    EmptyProblemSet,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Baseline(#[from] baselines::BaselineError),
}

/// Tiny guard applied when the per-problem best measure is exactly zero, so
/// a solver that lands exactly on the optimum keeps ratio 1.
const RATIO_EPS: f64 = 1e-15;

/// Per-(problem, solver) measures, ratios, and profile curves.
#[derive(Debug, Clone)]
pub struct ProfileTable {
    pub problems: Vec<String>,
    pub solvers: Vec<String>,
    /// `measures[p][s]` in `[0, 1]`; 1 marks the worst (or a diverged) solver.
    pub measures: Vec<Vec<f64>>,
    /// `ratios[p][s] >= 1`; the per-problem best solver has ratio 1.
    pub ratios: Vec<Vec<f64>>,
    /// `||x_w - x*||` per problem (0 when every solver diverged).
    pub worst_distance: Vec<f64>,
}

/// Normalized measures from final iterates: `None` marks divergence.
pub fn measures_from_finals(
    finals: &[Vec<Option<Vec<f64>>>],
    optima: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut measures = Vec::with_capacity(finals.len());
    let mut worst = Vec::with_capacity(finals.len());
    for (p, row) in finals.iter().enumerate() {
        let dists: Vec<Option<f64>> = row
            .iter()
            .map(|x| {
                x.as_ref().and_then(|x| {
                    let d = linalg::norm(&linalg::sub(x, &optima[p]));
                    d.is_finite().then_some(d)
                })
            })
            .collect();
        let w = dists.iter().flatten().cloned().fold(0.0f64, f64::max);
        worst.push(w);
        measures.push(
            dists
                .iter()
                .map(|d| match d {
                    None => 1.0,
                    Some(d) if w > 0.0 => d / w,
                    Some(_) => 0.0,
                })
                .collect(),
        );
    }
    (measures, worst)
}

/// Ratios `r = m / min_s m`, guarded so exact-optimum hits keep ratio 1.
pub fn ratios_from_measures(measures: &[Vec<f64>]) -> Vec<Vec<f64>> {
    measures
        .iter()
        .map(|row| {
            let best = row.iter().cloned().fold(f64::INFINITY, f64::min);
            row.iter()
                .map(|&m| {
                    if best > 0.0 {
                        m / best
                    } else if m == 0.0 {
                        1.0
                    } else {
                        m / RATIO_EPS
                    }
                })
                .collect()
        })
        .collect()
}

impl ProfileTable {
    pub fn from_measures(problems: Vec<String>, solvers: Vec<String>, measures: Vec<Vec<f64>>) -> Self {
        assert_eq!(problems.len(), measures.len());
        for row in &measures {
            assert_eq!(row.len(), solvers.len());
        }
        let ratios = ratios_from_measures(&measures);
        let worst = vec![f64::NAN; problems.len()];
        Self { problems, solvers, measures, ratios, worst_distance: worst }
    }

    pub fn from_finals(
        problems: Vec<String>,
        solvers: Vec<String>,
        finals: &[Vec<Option<Vec<f64>>>],
        optima: &[Vec<f64>],
    ) -> Self {
        let (measures, worst) = measures_from_finals(finals, optima);
        let ratios = ratios_from_measures(&measures);
        Self { problems, solvers, measures, ratios, worst_distance: worst }
    }

    /// `rho_s(tau)`: fraction of problems with ratio within `tau` of the best.
    pub fn rho(&self, solver: usize, tau: f64) -> f64 {
        let hits = self.ratios.iter().filter(|row| row[solver] <= tau).count();
        hits as f64 / self.problems.len() as f64
    }

    /// Exact integral of the step function `rho_s` over `[1, tau_max]`.
    pub fn auc(&self, solver: usize, tau_max: f64) -> f64 {
        let p = self.problems.len() as f64;
        self.ratios
            .iter()
            .map(|row| (tau_max - row[solver].max(1.0)).max(0.0))
            .sum::<f64>()
            / p
    }

    pub fn max_ratio(&self) -> f64 {
        self.ratios
            .iter()
            .flat_map(|row| row.iter())
            .cloned()
            .fold(1.0f64, f64::max)
    }
}

/// Sign convention for the cosine trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineMode {
    /// Compare the realized displacement `x_k - x_{k-1}` (post step-size).
    Displacement,
    /// Compare the unscaled movement direction recorded by the solver.
    RawDirection,
}

/// Per-iteration mean cosine between the solver's direction and the Newton
/// direction; singular-Hessian samples are skipped and counted, zero
/// directions contribute cosine 0 with a flag.
#[derive(Debug, Clone, Default)]
pub struct CosineTrace {
    pub mean_cosine: Vec<f64>,
    pub valid: Vec<usize>,
    pub skipped_singular: usize,
    pub zero_directions: usize,
}

/// Cosine trace of one trajectory (requires vector recording).
pub fn cosine_to_newton(
    trajectory: &Trajectory,
    objective: &BenchmarkObjective,
    mode: CosineMode,
) -> CosineTrace {
    assert!(
        !trajectory.pre_points.is_empty(),
        "trajectory was recorded without vectors; rerun with record_vectors"
    );
    let steps = trajectory.pre_points.len();
    let mut trace = CosineTrace {
        mean_cosine: vec![0.0; steps],
        valid: vec![0; steps],
        ..CosineTrace::default()
    };
    for k in 0..steps {
        let x = &trajectory.pre_points[k];
        let dir = match mode {
            CosineMode::Displacement => trajectory.displacements[k].clone(),
            CosineMode::RawDirection => trajectory.directions[k].clone(),
        };
        let newton = match objective.newton_direction(x) {
            Ok(d) => d,
            Err(_) => {
                trace.skipped_singular += 1;
                continue;
            }
        };
        let dn = linalg::norm(&dir);
        let nn = linalg::norm(&newton);
        let cos = if dn == 0.0 || nn == 0.0 {
            trace.zero_directions += 1;
            0.0
        } else {
            linalg::dot(&dir, &newton) / (dn * nn)
        };
        trace.mean_cosine[k] = cos;
        trace.valid[k] = 1;
    }
    trace
}

/// Combine traces into a test-set mean (weighted by valid counts).
pub fn aggregate_cosine_traces(traces: &[CosineTrace]) -> CosineTrace {
    let steps = traces.iter().map(|t| t.mean_cosine.len()).max().unwrap_or(0);
    let mut out = CosineTrace {
        mean_cosine: vec![0.0; steps],
        valid: vec![0; steps],
        ..CosineTrace::default()
    };
    for t in traces {
        out.skipped_singular += t.skipped_singular;
        out.zero_directions += t.zero_directions;
        for k in 0..t.mean_cosine.len() {
            out.mean_cosine[k] += t.mean_cosine[k] * t.valid[k] as f64;
            out.valid[k] += t.valid[k];
        }
    }
    for k in 0..steps {
        if out.valid[k] > 0 {
            out.mean_cosine[k] /= out.valid[k] as f64;
        }
    }
    out
}

/// One benchmark problem: objective plus its fixed starting point.
#[derive(Debug, Clone)]
pub struct SuiteProblem {
    pub id: String,
    pub objective: BenchmarkObjective,
    pub x0: Vec<f64>,
}

/// The profile test suite: diagonal quadratics at the given condition
/// numbers plus Rosenbrock and Rastrigin, each at every dimension.
pub fn build_suite(
    dims: &[usize],
    quad_conds: &[f64],
    seed: u64,
    x0_range: (f64, f64),
) -> Result<Vec<SuiteProblem>, EvalError> {
    let mut problems = Vec::new();
    for &n in dims {
        let mut family = |id: String, objective: BenchmarkObjective, stream: u64| {
            let mut rng = Rng::seed_from_u64(derive_seed(seed, stream));
            let x0 = rng.uniform_vec(n, x0_range.0, x0_range.1);
            problems.push(SuiteProblem { id, objective, x0 });
        };
        for (ci, &cond) in quad_conds.iter().enumerate() {
            let q = quadratic_diagonal(n, cond)?;
            family(
                format!("quad-cond{}-n{}", cond, n),
                BenchmarkObjective::Quadratic(q),
                (n as u64) << 8 | ci as u64,
            );
        }
        family(
            format!("rosenbrock-n{}", n),
            BenchmarkObjective::rosenbrock(n)?,
            (n as u64) << 8 | 100,
        );
        family(
            format!("rastrigin-n{}", n),
            BenchmarkObjective::rastrigin(n)?,
            (n as u64) << 8 | 101,
        );
    }
    Ok(problems)
}

/// A solver entry in a benchmark run.
#[derive(Debug, Clone)]
pub enum SolverSpec {
    /// Learned optimizer under a registered name ("lsr1" / "lsr1-noproj").
    Learned {
        kind: SolverKind,
        model: LsrOneModel,
        buffer_capacity: usize,
        include_identity: bool,
    },
    Lbfgs { memory: usize, rule: Option<StepRule> },
    Adam { lr: Option<f64> },
    Sr1 { rule: Option<StepRule> },
    AdaHessian { lr: Option<f64>, mode: HessianDiagMode },
}

impl SolverSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SolverSpec::Learned { kind, .. } => kind.name(),
            SolverSpec::Lbfgs { .. } => SolverKind::Lbfgs.name(),
            SolverSpec::Adam { .. } => SolverKind::Adam.name(),
            SolverSpec::Sr1 { .. } => SolverKind::Sr1.name(),
            SolverSpec::AdaHessian { .. } => SolverKind::Adahessian.name(),
        }
    }

    fn needs_tuning(&self) -> bool {
        matches!(
            self,
            SolverSpec::Lbfgs { rule: None, .. }
                | SolverSpec::Adam { lr: None }
                | SolverSpec::Sr1 { rule: None }
                | SolverSpec::AdaHessian { lr: None, .. }
        )
    }
}

/// Benchmark configuration.
#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    /// Inner steps granted to every solver.
    pub step_budget: usize,
    /// Record per-step vectors and emit cosine traces.
    pub cosine: bool,
    pub cosine_mode: CosineMode,
    /// Seed for tuning starts (held out from the evaluation starts).
    pub tuning_seed: u64,
    /// Number of held-out starts used by the learning-rate tuner.
    pub tuning_starts: usize,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        Self {
            step_budget: 64,
            cosine: false,
            cosine_mode: CosineMode::Displacement,
            tuning_seed: 7777,
            tuning_starts: 3,
        }
    }
}

/// Everything a benchmark run produces.
pub struct BenchmarkResult {
    pub problems: Vec<String>,
    pub solvers: Vec<String>,
    pub table: ProfileTable,
    /// (problem, solver, tuned rate) for every tuned cell.
    pub tuned_rates: Vec<(String, String, f64)>,
    /// `trajectories[p][s]`; `None` marks divergence.
    pub trajectories: Vec<Vec<Option<Trajectory>>>,
    /// Aggregated per-solver cosine traces (when requested).
    pub cosine_traces: Vec<Option<CosineTrace>>,
}

fn run_one(
    spec: &SolverSpec,
    objective: &BenchmarkObjective,
    x0: &[f64],
    budget: usize,
    lr: Option<f64>,
    record_vectors: bool,
) -> Option<Trajectory> {
    let result = match spec {
        SolverSpec::Learned { model, buffer_capacity, include_identity, .. } => lsr1::run(
            model,
            objective,
            x0,
            &RunOptions {
                steps: budget,
                buffer_capacity: *buffer_capacity,
                include_identity: *include_identity,
                record_vectors,
            },
        )
        .ok(),
        SolverSpec::Lbfgs { memory, rule } => {
            let rule = rule.unwrap_or(StepRule::Fixed(lr.expect("tuned rate")));
            run_lbfgs(objective, x0, budget, *memory, rule, record_vectors).ok()
        }
        SolverSpec::Adam { lr: fixed } => {
            let rate = fixed.or(lr).expect("tuned rate");
            Some(run_adam(objective, x0, budget, rate, record_vectors))
        }
        SolverSpec::Sr1 { rule } => {
            let rule = rule.unwrap_or(StepRule::Fixed(lr.expect("tuned rate")));
            run_sr1(objective, x0, budget, rule, record_vectors).ok()
        }
        SolverSpec::AdaHessian { lr: fixed, mode } => {
            let rate = fixed.or(lr).expect("tuned rate");
            Some(run_adahessian(objective, x0, budget, rate, *mode, record_vectors))
        }
    };
    // A run that went non-finite counts as diverged.
    result.filter(|t| t.final_point.iter().all(|v| v.is_finite()))
}

/// Execute every solver on every problem and assemble the profile table.
pub fn run_benchmark(
    problems: &[SuiteProblem],
    solvers: &[SolverSpec],
    opts: &BenchmarkOptions,
) -> Result<BenchmarkResult, EvalError> {
    if solvers.is_empty() {
        return Err(EvalError::EmptySolverSet);
    }
    if problems.is_empty() {
        return Err(EvalError::EmptyProblemSet);
    }

    // Tune unset baseline rates per (problem, solver) on held-out starts.
    let mut tuned: Vec<Vec<Option<f64>>> = vec![vec![None; solvers.len()]; problems.len()];
    let mut tuned_rates = Vec::new();
    for (pi, problem) in problems.iter().enumerate() {
        for (si, spec) in solvers.iter().enumerate() {
            if !spec.needs_tuning() {
                continue;
            }
            let mut rng =
                Rng::seed_from_u64(derive_seed(opts.tuning_seed, (pi * 64 + si) as u64));
            let n = problem.objective.dim();
            let x0s: Vec<Vec<f64>> =
                (0..opts.tuning_starts).map(|_| rng.uniform_vec(n, -2.0, 2.0)).collect();
            let lr = baselines::tune_fixed_lr(&problem.objective, &x0s, opts.step_budget, |lr, x0| {
                match run_one(spec, &problem.objective, x0, opts.step_budget, Some(lr), false) {
                    Some(t) => *t.values.last().unwrap_or(&f64::INFINITY),
                    None => f64::INFINITY,
                }
            });
            tuned[pi][si] = Some(lr);
            tuned_rates.push((problem.id.clone(), spec.name().to_string(), lr));
        }
    }

    // Problem x solver cells are independent; evaluate in parallel and
    // assemble in index order.
    let cells: Vec<(usize, usize)> = (0..problems.len())
        .flat_map(|p| (0..solvers.len()).map(move |s| (p, s)))
        .collect();
    let runs: Vec<Option<Trajectory>> = cells
        .par_iter()
        .map(|&(p, s)| {
            run_one(
                &solvers[s],
                &problems[p].objective,
                &problems[p].x0,
                opts.step_budget,
                tuned[p][s],
                opts.cosine,
            )
        })
        .collect();

    let mut trajectories: Vec<Vec<Option<Trajectory>>> = Vec::with_capacity(problems.len());
    let mut it = runs.into_iter();
    for _ in 0..problems.len() {
        trajectories.push((0..solvers.len()).map(|_| it.next().unwrap()).collect());
    }

    let finals: Vec<Vec<Option<Vec<f64>>>> = trajectories
        .iter()
        .map(|row| row.iter().map(|t| t.as_ref().map(|t| t.final_point.clone())).collect())
        .collect();
    let optima: Vec<Vec<f64>> = problems.iter().map(|p| p.objective.optimum()).collect();
    let table = ProfileTable::from_finals(
        problems.iter().map(|p| p.id.clone()).collect(),
        solvers.iter().map(|s| s.name().to_string()).collect(),
        &finals,
        &optima,
    );

    let cosine_traces: Vec<Option<CosineTrace>> = if opts.cosine {
        (0..solvers.len())
            .map(|s| {
                let traces: Vec<CosineTrace> = (0..problems.len())
                    .filter_map(|p| {
                        trajectories[p][s].as_ref().map(|t| {
                            cosine_to_newton(t, &problems[p].objective, opts.cosine_mode)
                        })
                    })
                    .collect();
                Some(aggregate_cosine_traces(&traces))
            })
            .collect()
    } else {
        vec![None; solvers.len()]
    };

    Ok(BenchmarkResult {
        problems: problems.iter().map(|p| p.id.clone()).collect(),
        solvers: solvers.iter().map(|s| s.name().to_string()).collect(),
        table,
        tuned_rates,
        trajectories,
        cosine_traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LsrOneModel, ModelConfig, NormMode};
    use crate::objectives::QuadraticObjective;

    #[test]
    fn hand_profile_example() {
        // m = [[0.2, 0.4], [0.3, 0.3]] -> r = [[1, 2], [1, 1]].
        let table = ProfileTable::from_measures(
            vec!["p1".into(), "p2".into()],
            vec!["A".into(), "B".into()],
            vec![vec![0.2, 0.4], vec![0.3, 0.3]],
        );
        assert_eq!(table.ratios[0][0], 1.0);
        assert_eq!(table.ratios[0][1], 2.0);
        assert_eq!(table.ratios[1][0], 1.0);
        assert_eq!(table.ratios[1][1], 1.0);
        assert_eq!(table.rho(0, 1.0), 1.0);
        assert_eq!(table.rho(1, 1.0), 0.5);
        assert_eq!(table.rho(1, 2.0), 1.0);
    }

    #[test]
    fn ties_give_ratio_one_to_both() {
        let table = ProfileTable::from_measures(
            vec!["p".into()],
            vec!["A".into(), "B".into()],
            vec![vec![0.5, 0.5]],
        );
        assert_eq!(table.ratios[0], vec![1.0, 1.0]);
        assert_eq!(table.rho(0, 1.0), 1.0);
        assert_eq!(table.rho(1, 1.0), 1.0);
    }

    #[test]
    fn exact_optimum_hit_keeps_ratio_one() {
        let finals = vec![vec![Some(vec![0.0, 0.0]), Some(vec![1.0, 0.0])]];
        let optima = vec![vec![0.0, 0.0]];
        let table = ProfileTable::from_finals(
            vec!["p".into()],
            vec!["exact".into(), "off".into()],
            &finals,
            &optima,
        );
        assert_eq!(table.measures[0][0], 0.0);
        assert_eq!(table.measures[0][1], 1.0);
        assert_eq!(table.ratios[0][0], 1.0);
        assert!(table.ratios[0][1] > 1e10);
    }

    #[test]
    fn diverged_solver_gets_worst_measure() {
        let finals = vec![vec![Some(vec![0.5, 0.0]), None]];
        let optima = vec![vec![0.0, 0.0]];
        let (m, _) = measures_from_finals(&finals, &optima);
        assert_eq!(m[0][0], 1.0); // worst among finite is itself
        assert_eq!(m[0][1], 1.0); // diverged pinned to worst
    }

    #[test]
    fn rho_is_monotone_and_terminal() {
        let mut rng = Rng::seed_from_u64(5);
        let measures: Vec<Vec<f64>> =
            (0..10).map(|_| (0..4).map(|_| rng.uniform(0.01, 1.0)).collect()).collect();
        let table = ProfileTable::from_measures(
            (0..10).map(|i| format!("p{i}")).collect(),
            (0..4).map(|i| format!("s{i}")).collect(),
            measures,
        );
        let tau_max = table.max_ratio();
        for s in 0..4 {
            let mut prev = 0.0;
            for i in 0..50 {
                let tau = 1.0 + (tau_max - 1.0) * i as f64 / 49.0;
                let r = table.rho(s, tau);
                assert!(r >= prev, "rho must be nondecreasing");
                prev = r;
            }
            assert_eq!(table.rho(s, tau_max), 1.0);
        }
        // Every problem has at least one best solver.
        let best_count: usize = (0..4).map(|s| table.ratios.iter().filter(|r| r[s] == 1.0).count()).sum();
        assert!(best_count >= 10);
    }

    #[test]
    fn auc_matches_quadrature() {
        let table = ProfileTable::from_measures(
            vec!["p1".into(), "p2".into()],
            vec!["A".into(), "B".into()],
            vec![vec![0.2, 0.4], vec![0.3, 0.3]],
        );
        // rho_B: 0.5 on [1, 2), 1.0 on [2, 5]: integral = 0.5 + 3 = 3.5.
        assert!((table.auc(1, 5.0) - 3.5).abs() < 1e-12);
        // rho_A == 1 everywhere: integral = 4.
        assert!((table.auc(0, 5.0) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_on_identity_preconditioner_hand_value() {
        // H = diag(1, 4), g = (1, 1), displacement along -g:
        // cos = g'H^{-1}g / (|g| |H^{-1}g|).
        let mut h = crate::linalg::Matrix::zeros(2, 2);
        h.set(0, 0, 1.0);
        h.set(1, 1, 4.0);
        let q = QuadraticObjective::new(h, vec![0.0, 0.0]).unwrap();
        let obj = BenchmarkObjective::Quadratic(q);
        // Build a one-step trajectory by hand at x with g = (1, 1): x = (1, 0.25).
        let x = vec![1.0, 0.25];
        let g = obj.gradient(&x);
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 1.0).abs() < 1e-12);
        let traj = Trajectory {
            initial_point: x.clone(),
            initial_value: obj.value(&x),
            values: vec![0.0],
            grad_norms: vec![0.0],
            dir_norms: vec![0.0],
            alpha_min: vec![0.1],
            alpha_max: vec![0.1],
            residuals: vec![0.0],
            final_point: vec![0.9, 0.15],
            pre_points: vec![x.clone()],
            directions: vec![vec![-1.0, -1.0]],
            displacements: vec![vec![-0.1, -0.1]],
        };
        let trace = cosine_to_newton(&traj, &obj, CosineMode::Displacement);
        let expect = 1.25 / ((2.0f64).sqrt() * (1.0f64 + 0.0625).sqrt());
        assert!((trace.mean_cosine[0] - expect).abs() < 1e-12, "{}", trace.mean_cosine[0]);
    }

    #[test]
    fn newton_trace_is_one_on_quadratics() {
        // A trajectory that moves along the exact Newton direction scores 1.
        let mut rng = Rng::seed_from_u64(31);
        let q = crate::objectives::quadratic_random(3, &mut rng, Some(100.0)).unwrap();
        let obj = BenchmarkObjective::Quadratic(q);
        let mut x = vec![1.0, -0.5, 0.25];
        let mut traj = Trajectory {
            initial_point: x.clone(),
            initial_value: obj.value(&x),
            values: vec![],
            grad_norms: vec![],
            dir_norms: vec![],
            alpha_min: vec![],
            alpha_max: vec![],
            residuals: vec![],
            final_point: vec![],
            pre_points: vec![],
            directions: vec![],
            displacements: vec![],
        };
        for _ in 0..3 {
            let d = obj.newton_direction(&x).unwrap();
            let scaled: Vec<f64> = d.iter().map(|v| 0.5 * v).collect();
            let x_new: Vec<f64> = x.iter().zip(&scaled).map(|(a, b)| a + b).collect();
            traj.pre_points.push(x.clone());
            traj.directions.push(d.clone());
            traj.displacements.push(scaled.clone());
            traj.values.push(obj.value(&x_new));
            x = x_new;
        }
        traj.final_point = x;
        let trace = cosine_to_newton(&traj, &obj, CosineMode::Displacement);
        for (c, v) in trace.mean_cosine.iter().zip(&trace.valid) {
            assert_eq!(*v, 1);
            assert!((c - 1.0).abs() < 1e-10, "cos {c}");
        }
    }

    #[test]
    fn zero_direction_is_flagged() {
        let q = QuadraticObjective::new(crate::linalg::Matrix::identity(2), vec![1.0, 0.0]).unwrap();
        let obj = BenchmarkObjective::Quadratic(q);
        let traj = Trajectory {
            initial_point: vec![1.0, 1.0],
            initial_value: 0.0,
            values: vec![0.0],
            grad_norms: vec![0.0],
            dir_norms: vec![0.0],
            alpha_min: vec![0.0],
            alpha_max: vec![0.0],
            residuals: vec![0.0],
            final_point: vec![1.0, 1.0],
            pre_points: vec![vec![1.0, 1.0]],
            directions: vec![vec![0.0, 0.0]],
            displacements: vec![vec![0.0, 0.0]],
        };
        let trace = cosine_to_newton(&traj, &obj, CosineMode::Displacement);
        assert_eq!(trace.zero_directions, 1);
        assert_eq!(trace.mean_cosine[0], 0.0);
        assert_eq!(trace.valid[0], 1);
    }

    #[test]
    fn suite_shapes() {
        let conds = [1.0, 100.0, 1000.0, 10000.0];
        let suite = build_suite(&[10, 20], &conds, 1, (-2.0, 2.0)).unwrap();
        assert_eq!(suite.len(), 12);
        let paper = build_suite(&[50, 100, 250, 500, 1000], &conds, 1, (-2.0, 2.0)).unwrap();
        assert_eq!(paper.len(), 30);
    }

    #[test]
    fn empty_solver_set_is_rejected() {
        let suite = build_suite(&[4], &[1.0], 3, (-2.0, 2.0)).unwrap();
        assert!(matches!(
            run_benchmark(&suite, &[], &BenchmarkOptions::default()),
            Err(EvalError::EmptySolverSet)
        ));
    }

    #[test]
    fn small_benchmark_runs_end_to_end() {
        let suite = build_suite(&[4, 6], &[1.0, 100.0], 3, (-2.0, 2.0)).unwrap();
        let model = LsrOneModel::init(
            ModelConfig { hidden_dim: 6, norm: NormMode::None, gamma1: 0.1, ..ModelConfig::default() },
            0,
        );
        let solvers = vec![
            SolverSpec::Learned {
                kind: SolverKind::Lsr1,
                model,
                buffer_capacity: 4,
                include_identity: true,
            },
            SolverSpec::Lbfgs { memory: 8, rule: None },
            SolverSpec::Adam { lr: None },
        ];
        let opts = BenchmarkOptions { step_budget: 20, ..BenchmarkOptions::default() };
        let result = run_benchmark(&suite, &solvers, &opts).unwrap();
        assert_eq!(result.problems.len(), 8);
        assert_eq!(result.solvers, vec!["lsr1", "lbfgs", "adam"]);
        // Tuned rates recorded for lbfgs and adam on every problem.
        assert_eq!(result.tuned_rates.len(), 16);
        // Profiles are total: terminal rho = 1 for every solver.
        let tau_max = result.table.max_ratio();
        for s in 0..result.solvers.len() {
            assert_eq!(result.table.rho(s, tau_max), 1.0);
        }
        // Measures bounded by 1 with the worst solver at 1.
        for row in &result.table.measures {
            assert!(row.iter().all(|&m| (0.0..=1.0).contains(&m)));
            assert!(row.iter().any(|&m| m == 1.0));
        }
    }
}
