//! Analytic benchmark objectives: random and diagonal quadratics, Rosenbrock,
//! and Rastrigin, each with value, gradient, Hessian, known optimum, and a
//! tape-expression form of the value and gradient so meta-gradients flow
//! through the inner gradients (curvature information reaches the tape).

use crate::autodiff::{Tape, Var};
use crate::linalg::{self, sym_eigen, Matrix};
use crate::rng::Rng;

/// Maximum hessian condition number accepted by [`BenchmarkObjective::newton_direction`].
const NEWTON_COND_LIMIT: f64 = 1e12;

/// Attempt cap for the condition-number rejection loop.
const REJECTION_CAP: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum ObjectiveError {
    #[error("condition number must be >= 1, got {0}")]
    InvalidConditionNumber(f64),
    #[error("gave up after {0} draws without meeting the condition-number bound")]
    RejectionBudgetExhausted(usize),
    #[error("hessian is singular or too ill-conditioned for a Newton step (condition {0:.3e})")]
    SingularHessian(f64),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    AsymmetricHessian(f64),
    #[error("matrix is not positive semi-definite (min eigenvalue {0:.3e})")]
    IndefiniteHessian(f64),
    #[error("{kind} requires dimension >= {min}, got {dim}")]
    DimensionTooSmall { kind: &'static str, min: usize, dim: usize },
}

/// Objective family selector used in configs and batch generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    Quadratic,
    Rosenbrock,
    Rastrigin,
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObjectiveKind::Quadratic => "quadratic",
            ObjectiveKind::Rosenbrock => "rosenbrock",
            ObjectiveKind::Rastrigin => "rastrigin",
        };
        f.write_str(s)
    }
}

/// `f(x) = 0.5 x^T H x + b^T x` with symmetric PSD `H`.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    h: Matrix,
    b: Vec<f64>,
    optimum: Vec<f64>,
}

impl QuadraticObjective {
    /// Validates symmetry (within 1e-12) and positive semi-definiteness
    /// (eigenvalues >= -1e-10) and precomputes the optimum `-H^{-1} b`.
    pub fn new(h: Matrix, b: Vec<f64>) -> Result<Self, ObjectiveError> {
        assert_eq!(h.rows(), h.cols(), "H must be square");
        assert_eq!(h.rows(), b.len(), "b length must match H");
        let asym = h.asymmetry();
        if asym > 1e-12 {
            return Err(ObjectiveError::AsymmetricHessian(asym));
        }
        let eig = sym_eigen(&h);
        let min_eig = eig.values.first().copied().unwrap_or(0.0);
        if min_eig < -1e-10 {
            return Err(ObjectiveError::IndefiniteHessian(min_eig));
        }
        let optimum = if b.iter().all(|&v| v == 0.0) {
            vec![0.0; b.len()]
        } else {
            let neg_b: Vec<f64> = b.iter().map(|v| -v).collect();
            eig.solve(&neg_b)
        };
        Ok(Self { h, b, optimum })
    }

    pub fn hessian_matrix(&self) -> &Matrix {
        &self.h
    }

    pub fn linear_term(&self) -> &[f64] {
        &self.b
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }
}

/// A benchmark objective with analytic derivatives and a known optimum.
#[derive(Debug, Clone)]
pub enum BenchmarkObjective {
    Quadratic(QuadraticObjective),
    Rosenbrock { dim: usize },
    Rastrigin { dim: usize },
}

impl BenchmarkObjective {
    pub fn rosenbrock(dim: usize) -> Result<Self, ObjectiveError> {
        if dim < 2 {
            return Err(ObjectiveError::DimensionTooSmall { kind: "rosenbrock", min: 2, dim });
        }
        Ok(Self::Rosenbrock { dim })
    }

    pub fn rastrigin(dim: usize) -> Result<Self, ObjectiveError> {
        if dim < 1 {
            return Err(ObjectiveError::DimensionTooSmall { kind: "rastrigin", min: 1, dim });
        }
        Ok(Self::Rastrigin { dim })
    }

    pub fn kind(&self) -> ObjectiveKind {
        match self {
            Self::Quadratic(_) => ObjectiveKind::Quadratic,
            Self::Rosenbrock { .. } => ObjectiveKind::Rosenbrock,
            Self::Rastrigin { .. } => ObjectiveKind::Rastrigin,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Quadratic(q) => q.dim(),
            Self::Rosenbrock { dim } | Self::Rastrigin { dim } => *dim,
        }
    }

    /// Global optimum: `-H^{-1} b` for quadratics, all-ones for Rosenbrock,
    /// the origin for Rastrigin.
    pub fn optimum(&self) -> Vec<f64> {
        match self {
            Self::Quadratic(q) => q.optimum.clone(),
            Self::Rosenbrock { dim } => vec![1.0; *dim],
            Self::Rastrigin { dim } => vec![0.0; *dim],
        }
    }

    pub fn optimum_value(&self) -> f64 {
        match self {
            Self::Quadratic(q) => self.value(&q.optimum),
            Self::Rosenbrock { .. } | Self::Rastrigin { .. } => 0.0,
        }
    }

    fn check_dim(&self, x: &[f64]) {
        assert_eq!(
            x.len(),
            self.dim(),
            "dimension mismatch: objective is {}-dimensional, point has {} entries",
            self.dim(),
            x.len()
        );
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.check_dim(x);
        match self {
            Self::Quadratic(q) => {
                let hx = q.h.matmul(&Matrix::col(x.to_vec()));
                0.5 * linalg::dot(x, hx.as_slice()) + linalg::dot(&q.b, x)
            }
            Self::Rosenbrock { .. } => x
                .windows(2)
                .map(|w| {
                    let u = w[1] - w[0] * w[0];
                    100.0 * u * u + (1.0 - w[0]) * (1.0 - w[0])
                })
                .sum(),
            Self::Rastrigin { dim } => {
                10.0 * *dim as f64
                    + x.iter()
                        .map(|&xi| xi * xi - 10.0 * (std::f64::consts::TAU * xi).cos())
                        .sum::<f64>()
            }
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.check_dim(x);
        match self {
            Self::Quadratic(q) => {
                let mut g = q.h.matmul(&Matrix::col(x.to_vec())).into_vec();
                linalg::axpy(1.0, &q.b, &mut g);
                g
            }
            Self::Rosenbrock { dim } => {
                let n = *dim;
                let mut g = vec![0.0; n];
                for i in 0..n - 1 {
                    let u = x[i + 1] - x[i] * x[i];
                    g[i] += -400.0 * x[i] * u + 2.0 * (x[i] - 1.0);
                    g[i + 1] += 200.0 * u;
                }
                g
            }
            Self::Rastrigin { .. } => x
                .iter()
                .map(|&xi| {
                    2.0 * xi + 20.0 * std::f64::consts::PI * (std::f64::consts::TAU * xi).sin()
                })
                .collect(),
        }
    }

    pub fn hessian(&self, x: &[f64]) -> Matrix {
        self.check_dim(x);
        match self {
            Self::Quadratic(q) => q.h.clone(),
            Self::Rosenbrock { dim } => {
                let n = *dim;
                let mut h = Matrix::zeros(n, n);
                for i in 0..n - 1 {
                    let dii = 1200.0 * x[i] * x[i] - 400.0 * x[i + 1] + 2.0;
                    h.set(i, i, h.get(i, i) + dii);
                    h.set(i + 1, i + 1, h.get(i + 1, i + 1) + 200.0);
                    h.set(i, i + 1, -400.0 * x[i]);
                    h.set(i + 1, i, -400.0 * x[i]);
                }
                h
            }
            Self::Rastrigin { dim } => {
                let n = *dim;
                let mut h = Matrix::zeros(n, n);
                for i in 0..n {
                    let c = (std::f64::consts::TAU * x[i]).cos();
                    h.set(i, i, 2.0 + 40.0 * std::f64::consts::PI * std::f64::consts::PI * c);
                }
                h
            }
        }
    }

    /// Diagonal of the Hessian without materializing it (used by the
    /// analytic AdaHessian variant).
    pub fn hessian_diag(&self, x: &[f64]) -> Vec<f64> {
        self.check_dim(x);
        match self {
            Self::Quadratic(q) => (0..q.dim()).map(|i| q.h.get(i, i)).collect(),
            Self::Rosenbrock { dim } => {
                let n = *dim;
                let mut d = vec![0.0; n];
                for i in 0..n - 1 {
                    d[i] += 1200.0 * x[i] * x[i] - 400.0 * x[i + 1] + 2.0;
                    d[i + 1] += 200.0;
                }
                d
            }
            Self::Rastrigin { .. } => x
                .iter()
                .map(|&xi| {
                    2.0 + 40.0
                        * std::f64::consts::PI
                        * std::f64::consts::PI
                        * (std::f64::consts::TAU * xi).cos()
                })
                .collect(),
        }
    }

    /// Newton direction `-H(x)^{-1} g(x)` via a dense symmetric eigensolve.
    /// Errs when the Hessian condition number exceeds 1e12, which callers use
    /// to skip cosine-similarity samples.
    pub fn newton_direction(&self, x: &[f64]) -> Result<Vec<f64>, ObjectiveError> {
        self.check_dim(x);
        let h = self.hessian(x);
        let eig = sym_eigen(&h);
        let cond = eig.condition_number();
        if !cond.is_finite() || cond > NEWTON_COND_LIMIT {
            return Err(ObjectiveError::SingularHessian(cond));
        }
        let g = self.gradient(x);
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        Ok(eig.solve(&neg_g))
    }

    /// Record the objective's constants on a tape; the returned handle builds
    /// value and gradient expressions at arbitrary points.
    pub fn on_tape(&self, tape: &mut Tape) -> TapedObjective {
        let constants = match self {
            Self::Quadratic(q) => {
                let h = tape.constant(q.h.clone());
                let b = tape.constant(Matrix::col(q.b.clone()));
                Some((h, b))
            }
            _ => None,
        };
        TapedObjective { kind: self.kind(), dim: self.dim(), constants }
    }
}

/// Objective constants bound to one tape.
pub struct TapedObjective {
    kind: ObjectiveKind,
    dim: usize,
    constants: Option<(Var, Var)>,
}

impl TapedObjective {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `f(x)` as a tape expression; `x` is an `N x 1` variable.
    pub fn value_expr(&self, tape: &mut Tape, x: Var) -> Var {
        assert_eq!(tape.shape(x), (self.dim, 1), "value_expr: x has wrong shape");
        match self.kind {
            ObjectiveKind::Quadratic => {
                let (h, b) = self.constants.expect("quadratic constants recorded");
                let hx = tape.matvec(h, x);
                let xhx = tape.dot(x, hx);
                let quad = tape.scale(xhx, 0.5);
                let lin = tape.dot(b, x);
                tape.add(quad, lin)
            }
            ObjectiveKind::Rosenbrock => {
                let n = self.dim;
                let head = tape.slice_rows(x, 0, n - 1);
                let tail = tape.slice_rows(x, 1, n);
                let hh = tape.mul(head, head);
                let u = tape.sub(tail, hh);
                let un = tape.norm_sq(u);
                let t1 = tape.scale(un, 100.0);
                let neg_head = tape.neg(head);
                let one_minus = tape.add_scalar(neg_head, 1.0);
                let t2 = tape.norm_sq(one_minus);
                tape.add(t1, t2)
            }
            ObjectiveKind::Rastrigin => {
                let n = self.dim as f64;
                let xsq = tape.norm_sq(x);
                let scaled = tape.scale(x, std::f64::consts::TAU);
                let c = tape.cos(scaled);
                let sc = tape.sum(c);
                let sc10 = tape.scale(sc, 10.0);
                let diff = tape.sub(xsq, sc10);
                tape.add_scalar(diff, 10.0 * n)
            }
        }
    }

    /// Analytic gradient as a tape expression, so second-order information
    /// flows into anything differentiated through it.
    pub fn grad_expr(&self, tape: &mut Tape, x: Var) -> Var {
        assert_eq!(tape.shape(x), (self.dim, 1), "grad_expr: x has wrong shape");
        match self.kind {
            ObjectiveKind::Quadratic => {
                let (h, b) = self.constants.expect("quadratic constants recorded");
                let hx = tape.matvec(h, x);
                tape.add(hx, b)
            }
            ObjectiveKind::Rosenbrock => {
                let n = self.dim;
                let head = tape.slice_rows(x, 0, n - 1);
                let tail = tape.slice_rows(x, 1, n);
                let hh = tape.mul(head, head);
                let u = tape.sub(tail, hh);
                let hu = tape.mul(head, u);
                let t1 = tape.scale(hu, -400.0);
                let hm1 = tape.add_scalar(head, -1.0);
                let t2 = tape.scale(hm1, 2.0);
                let g_head = tape.add(t1, t2);
                let g_tail = tape.scale(u, 200.0);
                let zero = tape.constant(Matrix::col(vec![0.0]));
                let a = tape.concat_rows(g_head, zero);
                let b = tape.concat_rows(zero, g_tail);
                tape.add(a, b)
            }
            ObjectiveKind::Rastrigin => {
                let two_x = tape.scale(x, 2.0);
                let scaled = tape.scale(x, std::f64::consts::TAU);
                let s = tape.sin(scaled);
                let s20pi = tape.scale(s, 20.0 * std::f64::consts::PI);
                tape.add(two_x, s20pi)
            }
        }
    }
}

/// Random quadratic per the generation recipe: `H = A^T A` with standard
/// normal `A`, optional condition-number rejection, unit Frobenius `H` and
/// unit Euclidean `b`. Training batches pass `max_cond = None`.
pub fn quadratic_random(
    n: usize,
    rng: &mut Rng,
    max_cond: Option<f64>,
) -> Result<QuadraticObjective, ObjectiveError> {
    assert!(n >= 1, "dimension must be >= 1");
    if let Some(c) = max_cond {
        if c < 1.0 {
            return Err(ObjectiveError::InvalidConditionNumber(c));
        }
    }
    let mut attempts = 0;
    let h = loop {
        attempts += 1;
        if attempts > REJECTION_CAP {
            return Err(ObjectiveError::RejectionBudgetExhausted(REJECTION_CAP));
        }
        let a = Matrix::from_vec(n, n, rng.normal_vec(n * n));
        let mut h = a.matmul_tn(&a);
        // A^T A is symmetric up to roundoff; make it exactly symmetric so the
        // PSD-validation in `QuadraticObjective::new` sees clean input.
        for i in 0..n {
            for j in (i + 1)..n {
                let avg = 0.5 * (h.get(i, j) + h.get(j, i));
                h.set(i, j, avg);
                h.set(j, i, avg);
            }
        }
        match max_cond {
            None => break h,
            Some(bound) => {
                let cond = sym_eigen(&h).condition_number();
                if cond <= bound {
                    break h;
                }
            }
        }
    };
    let mut h = h;
    let fro = h.frobenius_norm();
    h.scale_assign(1.0 / fro);
    let mut b = rng.normal_vec(n);
    let bn = linalg::norm(&b);
    for v in &mut b {
        *v /= bn;
    }
    QuadraticObjective::new(h, b)
}

/// Diagonal quadratic with `b = 0`: eigenvalues log-spaced on
/// `[1/cond, 1]`, then scaled to unit Frobenius norm.
pub fn quadratic_diagonal(n: usize, cond: f64) -> Result<QuadraticObjective, ObjectiveError> {
    assert!(n >= 1, "dimension must be >= 1");
    if cond < 1.0 {
        return Err(ObjectiveError::InvalidConditionNumber(cond));
    }
    let lo = -(cond.log10());
    let mut h = Matrix::zeros(n, n);
    for i in 0..n {
        let t = if n == 1 { 1.0 } else { i as f64 / (n - 1) as f64 };
        h.set(i, i, 10f64.powf(lo * (1.0 - t)));
    }
    let fro = h.frobenius_norm();
    h.scale_assign(1.0 / fro);
    QuadraticObjective::new(h, vec![0.0; n])
}

/// A batch of objectives and matching initial points, reproducible from its
/// seed.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch {
    pub objectives: Vec<BenchmarkObjective>,
    pub initial_points: Vec<Vec<f64>>,
    pub seed: u64,
}

impl ObjectiveBatch {
    /// Generate `count` problems of one family at dimension `dim`. Initial
    /// points are uniform on `[x0_lo, x0_hi]^dim`. Quadratic batches draw a
    /// fresh `H, b` per element; Rosenbrock/Rastrigin batches share the fixed
    /// objective and vary only the initial point.
    pub fn generate(
        kind: ObjectiveKind,
        dim: usize,
        count: usize,
        seed: u64,
        max_cond: Option<f64>,
        x0_range: (f64, f64),
    ) -> Result<Self, ObjectiveError> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut objectives = Vec::with_capacity(count);
        let mut initial_points = Vec::with_capacity(count);
        for _ in 0..count {
            let obj = match kind {
                ObjectiveKind::Quadratic => {
                    BenchmarkObjective::Quadratic(quadratic_random(dim, &mut rng, max_cond)?)
                }
                ObjectiveKind::Rosenbrock => BenchmarkObjective::rosenbrock(dim)?,
                ObjectiveKind::Rastrigin => BenchmarkObjective::rastrigin(dim)?,
            };
            initial_points.push(rng.uniform_vec(dim, x0_range.0, x0_range.1));
            objectives.push(obj);
        }
        Ok(Self { objectives, initial_points, seed })
    }

    pub fn len(&self) -> usize {
        self.objectives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objectives.is_empty()
    }
}
