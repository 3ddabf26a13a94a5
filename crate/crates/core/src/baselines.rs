//! Classical comparators: L-BFGS (two-loop recursion), Adam, classical SR1
//! with the standard skip safeguard, an AdaHessian variant with analytic or
//! Hutchinson Hessian diagonals, plus the exact line search on quadratics and
//! the step-size grid tuner used when baseline rates are unset.

use std::collections::VecDeque;

use crate::linalg::{self, Matrix};
use crate::lsr1::Trajectory;
use crate::objectives::BenchmarkObjective;
use crate::rng::Rng;

/// Curvature threshold below which an (s, y) pair is skipped.
const LBFGS_CURVATURE_EPS: f64 = 1e-10;
/// SR1 skip safeguard `|v'q| > r * |v| * |q|`.
const SR1_SKIP_THRESHOLD: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("exact line search requires d'Hd > 0, got {0:.3e}")]
    NonPositiveCurvature(f64),
    #[error("exact quadratic line search requires a quadratic objective")]
    NotQuadratic,
    #[error("unknown solver '{0}'; registered: {1}")]
    UnknownSolver(String, String),
}

/// Registered solver names for the CLI and profile tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverKind {
    Lsr1,
    Lsr1Noproj,
    Lbfgs,
    Adam,
    Sr1,
    Adahessian,
}

impl SolverKind {
    pub const ALL: [SolverKind; 6] = [
        SolverKind::Lsr1,
        SolverKind::Lsr1Noproj,
        SolverKind::Lbfgs,
        SolverKind::Adam,
        SolverKind::Sr1,
        SolverKind::Adahessian,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Lsr1 => "lsr1",
            SolverKind::Lsr1Noproj => "lsr1-noproj",
            SolverKind::Lbfgs => "lbfgs",
            SolverKind::Adam => "adam",
            SolverKind::Sr1 => "sr1",
            SolverKind::Adahessian => "adahessian",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, BaselineError> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
                BaselineError::UnknownSolver(name.to_string(), names.join(", "))
            })
    }
}

/// Step-size policy for the classical solvers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    Fixed(f64),
    /// Exact minimizer along the search direction; quadratic objectives only.
    ExactQuadratic,
}

/// Exact step for a quadratic: minimizes `f(x - a d)` at `a = (g'd)/(d'Hd)`,
/// the subtractive-update convention.
pub fn exact_quadratic_linesearch(h: &Matrix, g: &[f64], d: &[f64]) -> Result<f64, BaselineError> {
    let hd = h.matmul(&Matrix::col(d.to_vec()));
    let dhd = linalg::dot(d, hd.as_slice());
    if dhd <= 0.0 {
        return Err(BaselineError::NonPositiveCurvature(dhd));
    }
    Ok(linalg::dot(g, d) / dhd)
}

// --- L-BFGS ---

/// Two-loop-recursion L-BFGS memory.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    memory: usize,
    /// (s, y, rho) with rho = 1 / y's.
    pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)>,
}

impl LbfgsState {
    pub fn new(memory: usize) -> Self {
        assert!(memory >= 1, "memory must be >= 1");
        Self { memory, pairs: VecDeque::with_capacity(memory) }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Store a curvature pair; pairs with `s'y <= 1e-10` are skipped.
    pub fn observe(&mut self, s: Vec<f64>, y: Vec<f64>) {
        let sy = linalg::dot(&s, &y);
        if sy <= LBFGS_CURVATURE_EPS {
            return;
        }
        if self.pairs.len() == self.memory {
            self.pairs.pop_front();
        }
        self.pairs.push_back((s, y, 1.0 / sy));
    }

    /// Search direction `-H g` via the two-loop recursion with the
    /// `gamma = s'y / y'y` initial scaling; steepest descent when empty.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        if self.pairs.is_empty() {
            for v in &mut q {
                *v = -*v;
            }
            return q;
        }
        let mut alphas = vec![0.0; self.pairs.len()];
        for (i, (s, y, rho)) in self.pairs.iter().enumerate().rev() {
            let a = rho * linalg::dot(s, &q);
            alphas[i] = a;
            linalg::axpy(-a, y, &mut q);
        }
        let (s_last, y_last, _) = self.pairs.back().expect("non-empty");
        let gamma = linalg::dot(s_last, y_last) / linalg::dot(y_last, y_last);
        for v in &mut q {
            *v *= gamma;
        }
        for (i, (s, y, rho)) in self.pairs.iter().enumerate() {
            let beta = rho * linalg::dot(y, &q);
            linalg::axpy(alphas[i] - beta, s, &mut q);
        }
        for v in &mut q {
            *v = -*v;
        }
        q
    }
}

// --- Adam ---

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// Standard bias-corrected Adam update, in place.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        assert_eq!(x.len(), g.len(), "adam dimension mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// --- Classical SR1 ---

/// Dense classical SR1 state: the inverse-Hessian estimate plus the skip
/// threshold applied when the update denominator is near orthogonal.
#[derive(Debug, Clone)]
pub struct Sr1State {
    b: Matrix,
    pub skip_threshold: f64,
}

impl Sr1State {
    pub fn new(dim: usize) -> Self {
        Self { b: Matrix::identity(dim), skip_threshold: SR1_SKIP_THRESHOLD }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.b
    }

    /// Rank-one update `B += v v' / (v'q)` with `v = p - B q`, skipped when
    /// `|v'q| <= r |v| |q|`. Returns whether the update fired.
    pub fn update(&mut self, p: &[f64], q: &[f64]) -> bool {
        let bq = self.b.matmul(&Matrix::col(q.to_vec()));
        let v = linalg::sub(p, bq.as_slice());
        let denom = linalg::dot(&v, q);
        if denom.abs() <= self.skip_threshold * linalg::norm(&v) * linalg::norm(q) {
            return false;
        }
        let n = p.len();
        for i in 0..n {
            for j in 0..n {
                self.b.set(i, j, self.b.get(i, j) + v[i] * v[j] / denom);
            }
        }
        true
    }

    /// Quasi-Newton direction `-B g`.
    pub fn direction(&self, g: &[f64]) -> Vec<f64> {
        self.b.matmul(&Matrix::col(g.to_vec())).into_vec().iter().map(|v| -v).collect()
    }
}

// --- AdaHessian ---

/// How the Hessian diagonal is obtained.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianDiagMode {
    /// Exact diagonal from the objective's analytic Hessian (deterministic).
    Analytic,
    /// Hutchinson estimator: mean of `z .* (H z)` over Rademacher probes.
    Hutchinson { probes: usize, seed: u64 },
}

/// Hutchinson estimate of `diag(H)` using Rademacher probes and dense
/// Hessian-vector products.
pub fn hutchinson_diag(
    objective: &BenchmarkObjective,
    x: &[f64],
    probes: usize,
    rng: &mut Rng,
) -> Vec<f64> {
    assert!(probes >= 1, "need at least one probe");
    let h = objective.hessian(x);
    let n = x.len();
    let mut acc = vec![0.0; n];
    for _ in 0..probes {
        let z: Vec<f64> = (0..n).map(|_| rng.rademacher()).collect();
        let hz = h.matmul(&Matrix::col(z.clone()));
        for i in 0..n {
            acc[i] += z[i] * hz.as_slice()[i];
        }
    }
    for v in &mut acc {
        *v /= probes as f64;
    }
    acc
}

/// Adam-like state whose second moment tracks squared Hessian diagonals.
#[derive(Debug, Clone)]
pub struct AdaHessianState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdaHessianState {
    pub fn new(dim: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// One update with the supplied Hessian diagonal estimate.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], hessian_diag: &[f64]) {
        assert_eq!(x.len(), g.len(), "adahessian dimension mismatch");
        assert_eq!(x.len(), hessian_diag.len(), "hessian diagonal dimension mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] =
                self.beta2 * self.v[i] + (1.0 - self.beta2) * hessian_diag[i] * hessian_diag[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// --- Trajectory runners ---

fn new_trajectory(objective: &BenchmarkObjective, x0: &[f64], steps: usize) -> Trajectory {
    Trajectory {
        initial_point: x0.to_vec(),
        initial_value: objective.value(x0),
        values: Vec::with_capacity(steps),
        grad_norms: Vec::with_capacity(steps),
        dir_norms: Vec::with_capacity(steps),
        alpha_min: Vec::with_capacity(steps),
        alpha_max: Vec::with_capacity(steps),
        residuals: Vec::with_capacity(steps),
        final_point: Vec::new(),
        pre_points: Vec::new(),
        directions: Vec::new(),
        displacements: Vec::new(),
    }
}

fn record_step(
    traj: &mut Trajectory,
    objective: &BenchmarkObjective,
    pre: &[f64],
    x: &[f64],
    direction: &[f64],
    step_size: f64,
    residual: f64,
    record_vectors: bool,
) {
    traj.values.push(objective.value(x));
    traj.grad_norms.push(linalg::norm(&objective.gradient(x)));
    traj.dir_norms.push(linalg::norm(direction));
    traj.alpha_min.push(step_size);
    traj.alpha_max.push(step_size);
    traj.residuals.push(residual);
    if record_vectors {
        traj.pre_points.push(pre.to_vec());
        traj.directions.push(direction.to_vec());
        traj.displacements.push(linalg::sub(x, pre));
    }
}

/// L-BFGS run. The recorded `direction` is the raw two-loop output (descent
/// aligned); a near-zero gradient freezes the iterate for the remaining
/// budget so fixed-length trajectories stay comparable.
pub fn run_lbfgs(
    objective: &BenchmarkObjective,
    x0: &[f64],
    steps: usize,
    memory: usize,
    rule: StepRule,
    record_vectors: bool,
) -> Result<Trajectory, BaselineError> {
    let mut traj = new_trajectory(objective, x0, steps);
    let mut state = LbfgsState::new(memory);
    let mut x = x0.to_vec();
    let mut g = objective.gradient(&x);
    for _ in 0..steps {
        let pre = x.clone();
        let d = state.direction(&g);
        let t = step_length(objective, &g, &d, rule)?;
        if t != 0.0 {
            let mut x_new = x.clone();
            linalg::axpy(t, &d, &mut x_new);
            let g_new = objective.gradient(&x_new);
            state.observe(linalg::sub(&x_new, &x), linalg::sub(&g_new, &g));
            x = x_new;
            g = g_new;
        }
        record_step(&mut traj, objective, &pre, &x, &d, t, 0.0, record_vectors);
    }
    traj.final_point = x;
    Ok(traj)
}

/// Step length along a descent direction `d` (the update is `x += t d`).
fn step_length(
    objective: &BenchmarkObjective,
    g: &[f64],
    d: &[f64],
    rule: StepRule,
) -> Result<f64, BaselineError> {
    match rule {
        StepRule::Fixed(lr) => Ok(lr),
        StepRule::ExactQuadratic => {
            let BenchmarkObjective::Quadratic(q) = objective else {
                return Err(BaselineError::NotQuadratic);
            };
            if linalg::norm(d) < 1e-300 {
                return Ok(0.0);
            }
            // The helper minimizes f(x - a u); pass u = -d for x += t d.
            let u: Vec<f64> = d.iter().map(|v| -v).collect();
            match exact_quadratic_linesearch(q.hessian_matrix(), g, &u) {
                Ok(alpha) => Ok(alpha),
                // Flat curvature along d means the quadratic is already
                // minimized in that subspace; hold position.
                Err(BaselineError::NonPositiveCurvature(_)) => Ok(0.0),
                Err(e) => Err(e),
            }
        }
    }
}

pub fn run_adam(
    objective: &BenchmarkObjective,
    x0: &[f64],
    steps: usize,
    lr: f64,
    record_vectors: bool,
) -> Trajectory {
    let mut traj = new_trajectory(objective, x0, steps);
    let mut state = AdamState::new(x0.len(), lr);
    let mut x = x0.to_vec();
    for _ in 0..steps {
        let pre = x.clone();
        let g = objective.gradient(&x);
        state.step(&mut x, &g);
        let d = linalg::sub(&x, &pre);
        record_step(&mut traj, objective, &pre, &x, &d, lr, 0.0, record_vectors);
    }
    traj.final_point = x;
    traj
}

/// Classical SR1 run; the residual column records the post-update secant
/// error `|| B q - p ||^2`.
pub fn run_sr1(
    objective: &BenchmarkObjective,
    x0: &[f64],
    steps: usize,
    rule: StepRule,
    record_vectors: bool,
) -> Result<Trajectory, BaselineError> {
    let mut traj = new_trajectory(objective, x0, steps);
    let mut state = Sr1State::new(x0.len());
    let mut x = x0.to_vec();
    let mut g = objective.gradient(&x);
    for _ in 0..steps {
        let pre = x.clone();
        let d = state.direction(&g);
        let t = step_length(objective, &g, &d, rule)?;
        let mut residual = 0.0;
        if t != 0.0 {
            let mut x_new = x.clone();
            linalg::axpy(t, &d, &mut x_new);
            let g_new = objective.gradient(&x_new);
            let p = linalg::sub(&x_new, &x);
            let q = linalg::sub(&g_new, &g);
            state.update(&p, &q);
            let bq = state.matrix().matmul(&Matrix::col(q.clone()));
            residual = p
                .iter()
                .zip(bq.as_slice())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            x = x_new;
            g = g_new;
        }
        record_step(&mut traj, objective, &pre, &x, &d, t, residual, record_vectors);
    }
    traj.final_point = x;
    Ok(traj)
}

pub fn run_adahessian(
    objective: &BenchmarkObjective,
    x0: &[f64],
    steps: usize,
    lr: f64,
    mode: HessianDiagMode,
    record_vectors: bool,
) -> Trajectory {
    let mut traj = new_trajectory(objective, x0, steps);
    let mut state = AdaHessianState::new(x0.len(), lr);
    let mut x = x0.to_vec();
    let mut hutch_rng = match mode {
        HessianDiagMode::Hutchinson { seed, .. } => Some(Rng::seed_from_u64(seed)),
        HessianDiagMode::Analytic => None,
    };
    for _ in 0..steps {
        let pre = x.clone();
        let g = objective.gradient(&x);
        let diag = match mode {
            HessianDiagMode::Analytic => objective.hessian_diag(&x),
            HessianDiagMode::Hutchinson { probes, .. } => {
                hutchinson_diag(objective, &x, probes, hutch_rng.as_mut().expect("rng"))
            }
        };
        state.step(&mut x, &g, &diag);
        let d = linalg::sub(&x, &pre);
        record_step(&mut traj, objective, &pre, &x, &d, lr, 0.0, record_vectors);
    }
    traj.final_point = x;
    traj
}

/// Log-spaced learning-rate grid on `[1e-4, 1]`, 13 points.
pub fn lr_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-4.0 + i as f64 / 3.0)).collect()
}

/// Pick the grid rate with the lowest mean final objective over the given
/// starts. Ties keep the smaller rate; non-finite outcomes lose.
pub fn tune_fixed_lr(
    objective: &BenchmarkObjective,
    x0s: &[Vec<f64>],
    _steps: usize,
    mut run_one: impl FnMut(f64, &[f64]) -> f64,
) -> f64 {
    let _ = objective;
    let grid = lr_grid();
    let mut best = (f64::INFINITY, grid[0]);
    for &lr in &grid {
        let mut total = 0.0;
        let mut ok = true;
        for x0 in x0s {
            let v = run_one(lr, x0);
            if !v.is_finite() {
                ok = false;
                break;
            }
            total += v;
        }
        if ok {
            let mean = total / x0s.len() as f64;
            if mean < best.0 {
                best = (mean, lr);
            }
        }
    }
    best.1
}
