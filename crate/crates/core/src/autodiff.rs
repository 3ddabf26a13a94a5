//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records operations in topological order with eagerly computed
//! forward values; [`Tape::backward`] sweeps the tape once in reverse and
//! accumulates adjoints. Nodes hold whole matrices, so the per-op overhead is
//! paid per layer rather than per scalar, which is what makes backpropagating
//! through K unrolled optimizer steps affordable.
//!
//! Shape violations, non-finite leaf values, and domain violations (`ln` or
//! `div` at zero) are programming errors and panic with a message naming the
//! offending shapes or elements; they are never silently turned into NaN.
//! Callers that expect zeros add an explicit epsilon instead.
//!
//! Broadcasting: binary elementwise ops accept equal shapes or a `1x1` scalar
//! on either side. Nothing else broadcasts implicitly; use
//! [`Tape::broadcast_rows`] to expand a row explicitly.

use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Sin(usize),
    Cos(usize),
    Abs(usize),
    PowScalar(usize, f64),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    NormSq(usize),
    Dot(usize, usize),
    MatMul(usize, usize),
    Outer(usize, usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize, usize),
    Prelu(usize, usize),
    ColMean(usize),
    BroadcastRows(usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

/// Append-only operation tape. Single-threaded; movable across threads but
/// never shared mutably. One tape per unrolled episode or batch element.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-leaf gradients produced by [`Tape::backward`].
///
/// Every `requires_grad` leaf is present; leaves unreachable from the root get
/// an explicit zero gradient of the leaf's shape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of `requires_grad` leaves covered.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Elementwise combine with scalar (`1x1`) broadcast on either side.
fn ew(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64, opname: &str) -> Matrix {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.is_scalar() {
        let s = b.get(0, 0);
        a.map(|x| f(x, s))
    } else if a.is_scalar() {
        let s = a.get(0, 0);
        b.map(|x| f(s, x))
    } else {
        panic!(
            "{opname}: shape mismatch {}x{} vs {}x{} (only scalar-with-array broadcasts)",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self { nodes: Vec::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Forward value of a node.
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    // --- Leaves ---

    /// Record a leaf. `requires_grad` leaves accumulate adjoints and appear in
    /// the gradient map. Panics on non-finite input values.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        assert!(
            value.all_finite(),
            "leaf rejected: value contains a non-finite entry (shape {}x{})",
            value.rows(),
            value.cols()
        );
        self.push(Op::Leaf { requires_grad }, value)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Matrix::scalar(v))
    }

    /// Copy of `v`'s value as a fresh constant leaf; gradients do not flow
    /// back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // --- Elementwise binary ---

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = ew(self.value(a), self.value(b), |x, y| x + y, "add");
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = ew(self.value(a), self.value(b), |x, y| x - y, "sub");
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = ew(self.value(a), self.value(b), |x, y| x * y, "mul");
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert!(
            self.value(b).as_slice().iter().all(|&x| x != 0.0),
            "div: denominator contains an exact zero; add an epsilon if zeros are expected"
        );
        let v = ew(self.value(a), self.value(b), |x, y| x / y, "div");
        self.push(Op::Div(a.0, b.0), v)
    }

    // --- Elementwise unary ---

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(Op::Neg(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        assert!(
            self.value(a).as_slice().iter().all(|&x| x > 0.0),
            "ln: argument contains a non-positive entry; add an epsilon if zeros are expected"
        );
        let v = self.value(a).map(f64::ln);
        self.push(Op::Ln(a.0), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        assert!(
            self.value(a).as_slice().iter().all(|&x| x >= 0.0),
            "sqrt: argument contains a negative entry"
        );
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a.0), v)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(Op::Sin(a.0), v)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(Op::Cos(a.0), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(Op::Abs(a.0), v)
    }

    /// Elementwise `a^p` for a constant exponent.
    pub fn pow_scalar(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        assert!(
            v.all_finite(),
            "pow_scalar: produced a non-finite entry (exponent {p})"
        );
        self.push(Op::PowScalar(a.0, p), v)
    }

    /// `c * a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a.0, c), v)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a.0), v)
    }

    // --- Reductions ---

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().sum();
        self.push(Op::Sum(a.0), Matrix::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert!(!m.is_empty(), "mean of an empty matrix");
        let s: f64 = m.as_slice().iter().sum::<f64>() / m.len() as f64;
        self.push(Op::Mean(a.0), Matrix::scalar(s))
    }

    /// Squared Euclidean norm of all entries.
    pub fn norm_sq(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).as_slice().iter().map(|x| x * x).sum();
        self.push(Op::NormSq(a.0), Matrix::scalar(s))
    }

    /// Inner product of two equal-shaped operands, flattened.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(
            ma.shape(),
            mb.shape(),
            "dot: shape mismatch {:?} vs {:?}",
            ma.shape(),
            mb.shape()
        );
        let s = crate::linalg::dot(ma.as_slice(), mb.as_slice());
        self.push(Op::Dot(a.0, b.0), Matrix::scalar(s))
    }

    // --- Matrix ops ---

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// `m * x` for a column vector `x`; thin wrapper over [`Tape::matmul`].
    pub fn matvec(&mut self, m: Var, x: Var) -> Var {
        assert_eq!(
            self.shape(x).1,
            1,
            "matvec: x must be a column vector, got {:?}",
            self.shape(x)
        );
        self.matmul(m, x)
    }

    /// Outer product `u v^T` of two column vectors.
    pub fn outer(&mut self, u: Var, v: Var) -> Var {
        let (mu, mv) = (self.value(u), self.value(v));
        assert_eq!(mu.cols(), 1, "outer: u must be a column vector, got {:?}", mu.shape());
        assert_eq!(mv.cols(), 1, "outer: v must be a column vector, got {:?}", mv.shape());
        let value = mu.matmul_nt(mv);
        self.push(Op::Outer(u.0, v.0), value)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a.0), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(
            ma.rows(),
            mb.rows(),
            "concat_cols: row mismatch {} vs {}",
            ma.rows(),
            mb.rows()
        );
        let (r, ca, cb) = (ma.rows(), ma.cols(), mb.cols());
        let mut out = Matrix::zeros(r, ca + cb);
        for i in 0..r {
            for j in 0..ca {
                out.set(i, j, ma.get(i, j));
            }
            for j in 0..cb {
                out.set(i, ca + j, mb.get(i, j));
            }
        }
        self.push(Op::ConcatCols(a.0, b.0), out)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(
            ma.cols(),
            mb.cols(),
            "concat_rows: column mismatch {} vs {}",
            ma.cols(),
            mb.cols()
        );
        let mut data = Vec::with_capacity(ma.len() + mb.len());
        data.extend_from_slice(ma.as_slice());
        data.extend_from_slice(mb.as_slice());
        let out = Matrix::from_vec(ma.rows() + mb.rows(), ma.cols(), data);
        self.push(Op::ConcatRows(a.0, b.0), out)
    }

    /// Rows `r0..r1` of `a`.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let m = self.value(a);
        assert!(
            r0 < r1 && r1 <= m.rows(),
            "slice_rows: invalid range {r0}..{r1} for {} rows",
            m.rows()
        );
        let c = m.cols();
        let data = m.as_slice()[r0 * c..r1 * c].to_vec();
        let out = Matrix::from_vec(r1 - r0, c, data);
        self.push(Op::SliceRows(a.0, r0, r1), out)
    }

    /// PReLU with a learnable scalar slope: `x if x > 0 else slope * x`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Var {
        assert!(
            self.value(slope).is_scalar(),
            "prelu: slope must be 1x1, got {:?}",
            self.shape(slope)
        );
        let s = self.value(slope).get(0, 0);
        let v = self.value(x).map(|t| if t > 0.0 { t } else { s * t });
        self.push(Op::Prelu(x.0, slope.0), v)
    }

    /// Column means of an `N x C` matrix as a `1 x C` row.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert!(m.rows() > 0, "col_mean of an empty matrix");
        let mut v = m.col_sums();
        v.scale_assign(1.0 / m.rows() as f64);
        self.push(Op::ColMean(a.0), v)
    }

    /// Repeat a `1 x C` row `n` times into an `n x C` matrix.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), 1, "broadcast_rows: input must be 1xC, got {:?}", m.shape());
        assert!(n >= 1, "broadcast_rows: n must be >= 1");
        let c = m.cols();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(m.as_slice());
        }
        self.push(Op::BroadcastRows(a.0), Matrix::from_vec(n, c, data))
    }

    // --- Backward ---

    /// Reverse sweep from a scalar root. Returns gradients for every
    /// `requires_grad` leaf (zeros for leaves the root does not reach).
    pub fn backward(&mut self, root: Var) -> Gradients {
        let root_shape = self.shape(root);
        assert_eq!(
            root_shape,
            (1, 1),
            "backward: root must be scalar-shaped, got {}x{}",
            root_shape.0,
            root_shape.1
        );
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = vec![None; n];
        adj[root.0] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { requires_grad: true } = node.op {
                let shape = node.value.shape();
                grads[i] = Some(match adj[i].take() {
                    Some(g) => g,
                    None => Matrix::zeros(shape.0, shape.1),
                });
            }
        }
        Gradients { grads }
    }

    fn accumulate(adj: &mut [Option<Matrix>], idx: usize, shape: (usize, usize), delta: Matrix) {
        // Unbroadcast: a scalar operand collects the sum of its expanded adjoint.
        let delta = if shape == delta.shape() {
            delta
        } else if shape == (1, 1) {
            Matrix::scalar(delta.as_slice().iter().sum())
        } else {
            panic!(
                "internal adjoint shape mismatch: node is {:?}, delta is {:?}",
                shape,
                delta.shape()
            );
        };
        match &mut adj[idx] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let val = |id: usize| -> &Matrix { &self.nodes[id].value };
        let shape_of = |id: usize| val(id).shape();
        match self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                Self::accumulate(adj, a, shape_of(a), g.clone());
                Self::accumulate(adj, b, shape_of(b), g.clone());
            }
            Op::Sub(a, b) => {
                Self::accumulate(adj, a, shape_of(a), g.clone());
                Self::accumulate(adj, b, shape_of(b), g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                Self::accumulate(adj, a, shape_of(a), ew(g, val(b), |x, y| x * y, "mul'"));
                Self::accumulate(adj, b, shape_of(b), ew(g, val(a), |x, y| x * y, "mul'"));
            }
            Op::Div(a, b) => {
                Self::accumulate(adj, a, shape_of(a), ew(g, val(b), |x, y| x / y, "div'"));
                let num = ew(g, val(a), |x, y| x * y, "div'");
                Self::accumulate(adj, b, shape_of(b), ew(&num, val(b), |x, y| -x / (y * y), "div'"));
            }
            Op::Neg(a) => Self::accumulate(adj, a, shape_of(a), g.map(|x| -x)),
            Op::Exp(a) => {
                Self::accumulate(adj, a, shape_of(a), g.zip_map(&self.nodes[i].value, |x, y| x * y))
            }
            Op::Ln(a) => Self::accumulate(adj, a, shape_of(a), g.zip_map(val(a), |x, y| x / y)),
            Op::Sqrt(a) => Self::accumulate(
                adj,
                a,
                shape_of(a),
                g.zip_map(&self.nodes[i].value, |x, y| x / (2.0 * y)),
            ),
            Op::Sin(a) => {
                Self::accumulate(adj, a, shape_of(a), g.zip_map(val(a), |x, y| x * y.cos()))
            }
            Op::Cos(a) => {
                Self::accumulate(adj, a, shape_of(a), g.zip_map(val(a), |x, y| -x * y.sin()))
            }
            Op::Abs(a) => Self::accumulate(
                adj,
                a,
                shape_of(a),
                g.zip_map(val(a), |x, y| x * if y > 0.0 { 1.0 } else if y < 0.0 { -1.0 } else { 0.0 }),
            ),
            Op::PowScalar(a, p) => Self::accumulate(
                adj,
                a,
                shape_of(a),
                g.zip_map(val(a), |x, y| x * p * y.powf(p - 1.0)),
            ),
            Op::Scale(a, c) => Self::accumulate(adj, a, shape_of(a), g.map(|x| c * x)),
            Op::AddScalar(a) => Self::accumulate(adj, a, shape_of(a), g.clone()),
            Op::Sum(a) => {
                let s = g.get(0, 0);
                let (r, c) = shape_of(a);
                Self::accumulate(adj, a, (r, c), Matrix::from_vec(r, c, vec![s; r * c]));
            }
            Op::Mean(a) => {
                let (r, c) = shape_of(a);
                let s = g.get(0, 0) / (r * c) as f64;
                Self::accumulate(adj, a, (r, c), Matrix::from_vec(r, c, vec![s; r * c]));
            }
            Op::NormSq(a) => {
                let s = g.get(0, 0);
                Self::accumulate(adj, a, shape_of(a), val(a).map(|x| 2.0 * s * x));
            }
            Op::Dot(a, b) => {
                let s = g.get(0, 0);
                Self::accumulate(adj, a, shape_of(a), val(b).map(|x| s * x));
                Self::accumulate(adj, b, shape_of(b), val(a).map(|x| s * x));
            }
            Op::MatMul(a, b) => {
                Self::accumulate(adj, a, shape_of(a), g.matmul_nt(val(b)));
                Self::accumulate(adj, b, shape_of(b), val(a).matmul_tn(g));
            }
            Op::Outer(u, v) => {
                Self::accumulate(adj, u, shape_of(u), g.matmul(val(v)));
                Self::accumulate(adj, v, shape_of(v), g.matmul_tn(val(u)));
            }
            Op::Transpose(a) => Self::accumulate(adj, a, shape_of(a), g.transpose()),
            Op::ConcatCols(a, b) => {
                let (r, ca) = shape_of(a);
                let cb = shape_of(b).1;
                let mut ga = Matrix::zeros(r, ca);
                let mut gb = Matrix::zeros(r, cb);
                for i in 0..r {
                    for j in 0..ca {
                        ga.set(i, j, g.get(i, j));
                    }
                    for j in 0..cb {
                        gb.set(i, j, g.get(i, ca + j));
                    }
                }
                Self::accumulate(adj, a, (r, ca), ga);
                Self::accumulate(adj, b, (r, cb), gb);
            }
            Op::ConcatRows(a, b) => {
                let (ra, c) = shape_of(a);
                let rb = shape_of(b).0;
                let ga = Matrix::from_vec(ra, c, g.as_slice()[..ra * c].to_vec());
                let gb = Matrix::from_vec(rb, c, g.as_slice()[ra * c..].to_vec());
                Self::accumulate(adj, a, (ra, c), ga);
                Self::accumulate(adj, b, (rb, c), gb);
            }
            Op::SliceRows(a, r0, _r1) => {
                let (r, c) = shape_of(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    for j in 0..c {
                        ga.set(r0 + i, j, g.get(i, j));
                    }
                }
                Self::accumulate(adj, a, (r, c), ga);
            }
            Op::Prelu(x, slope) => {
                let s = val(slope).get(0, 0);
                Self::accumulate(
                    adj,
                    x,
                    shape_of(x),
                    g.zip_map(val(x), |gi, xi| gi * if xi > 0.0 { 1.0 } else { s }),
                );
                let ds: f64 = g
                    .as_slice()
                    .iter()
                    .zip(val(x).as_slice())
                    .map(|(&gi, &xi)| if xi > 0.0 { 0.0 } else { gi * xi })
                    .sum();
                Self::accumulate(adj, slope, (1, 1), Matrix::scalar(ds));
            }
            Op::ColMean(a) => {
                let (r, c) = shape_of(a);
                let inv = 1.0 / r as f64;
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    for j in 0..c {
                        ga.set(i, j, g.get(0, j) * inv);
                    }
                }
                Self::accumulate(adj, a, (r, c), ga);
            }
            Op::BroadcastRows(a) => {
                Self::accumulate(adj, a, shape_of(a), g.col_sums());
            }
        }
    }
}

/// Worst relative discrepancy between the tape gradient and a central finite
/// difference, over every element of every leaf.
///
/// `build` creates the leaves from `points` (all marked `requires_grad`) and
/// returns the scalar root. Relative error uses
/// `|ad - fd| / max(|ad|, |fd|, floor)` where the floor is `1e-6` of the
/// largest analytic gradient entry, so coordinates that are numerically zero
/// on both sides do not produce spurious 0/0 blowups.
pub fn finite_difference_check<F>(build: F, points: &[Matrix], step: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(li, m)| (0..m.len()).map(move |ei| (li, ei)))
        .collect();
    finite_difference_check_coords(build, points, step, &coords)
}

/// As [`finite_difference_check`] but probing only the given
/// `(leaf index, element index)` coordinates. Used when the full parameter
/// set is too large to probe exhaustively.
pub fn finite_difference_check_coords<F>(
    build: F,
    points: &[Matrix],
    step: f64,
    coords: &[(usize, usize)],
) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(step > 0.0, "finite_difference_check: step must be positive");

    let eval = |pts: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        assert!(tape.value(root).is_scalar(), "finite_difference_check: root must be scalar");
        tape.value(root).get(0, 0)
    };

    // Analytic gradients once.
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|m| tape.leaf(m.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    let analytic: Vec<Matrix> = vars
        .iter()
        .map(|&v| grads.get(v).expect("leaf is requires_grad").clone())
        .collect();

    let grad_scale = analytic
        .iter()
        .flat_map(|g| g.as_slice().iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let floor = (1e-6 * grad_scale).max(1e-12);

    let mut worst = 0.0f64;
    let mut work: Vec<Matrix> = points.to_vec();
    for &(li, ei) in coords {
        let orig = work[li].as_slice()[ei];
        work[li].as_mut_slice()[ei] = orig + step;
        let fp = eval(&work);
        work[li].as_mut_slice()[ei] = orig - step;
        let fm = eval(&work);
        work[li].as_mut_slice()[ei] = orig;

        let fd = (fp - fm) / (2.0 * step);
        let ad = analytic[li].as_slice()[ei];
        let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn leaf_roundtrip_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col(vec![1.0, 2.0, 3.0]), true);
        assert_eq!(t.value(x).as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn disconnected_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let unused = t.leaf(Matrix::col(vec![0.0; 5]), true);
        let x = t.leaf(Matrix::scalar(2.0), true);
        let root = t.mul(x, x);
        let grads = t.backward(root);
        assert_eq!(grads.get(unused).unwrap().as_slice(), &[0.0; 5]);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[4.0]);
    }

    #[test]
    fn identity_matvec() {
        let mut t = Tape::new();
        let eye = t.constant(Matrix::identity(2));
        let x = t.leaf(Matrix::col(vec![3.0, 4.0]), true);
        let y = t.matvec(eye, x);
        assert_eq!(t.value(y).as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn outer_basis_vectors() {
        let mut t = Tape::new();
        let u = t.constant(Matrix::col(vec![1.0, 0.0]));
        let v = t.constant(Matrix::col(vec![0.0, 1.0]));
        let o = t.outer(u, v);
        assert_eq!(t.value(o).as_slice(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn prelu_definition() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col(vec![-4.0, 2.0]), true);
        let s = t.constant_scalar(0.25);
        let y = t.prelu(x, s);
        assert_eq!(t.value(y).as_slice(), &[-1.0, 2.0]);
    }

    #[test]
    fn quadratic_gradient() {
        // d/dx sum(x .* x) at [1, 2] is [2, 4].
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col(vec![1.0, 2.0]), true);
        let sq = t.mul(x, x);
        let root = t.sum(sq);
        let grads = t.backward(root);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn linear_form_gradient() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::col(vec![1.0, 2.0, 3.0]));
        let x = t.leaf(Matrix::col(vec![5.0, -1.0, 0.5]), true);
        let root = t.dot(w, x);
        let grads = t.backward(root);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn norm_sq_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col(vec![3.0, 4.0]), true);
        let root = t.norm_sq(x);
        assert_eq!(t.value(root).get(0, 0), 25.0);
        let grads = t.backward(root);
        assert_eq!(grads.get(x).unwrap().as_slice(), &[6.0, 8.0]);
    }

    #[test]
    fn backward_root_adjoint_is_one_and_sum_linearity() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col(vec![1.5, -0.5]), true);
        let a = t.norm_sq(x);
        let b = t.sum(x);
        let ga = t.backward(a);
        let gb = t.backward(b);
        let combined = t.add(a, b);
        let gc = t.backward(combined);
        let expect: Vec<f64> = ga
            .get(x)
            .unwrap()
            .as_slice()
            .iter()
            .zip(gb.get(x).unwrap().as_slice())
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(gc.get(x).unwrap().as_slice(), expect.as_slice());
    }

    #[test]
    fn no_grad_leaves_empty_map() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::scalar(3.0));
        let root = t.mul(x, x);
        let grads = t.backward(root);
        assert!(grads.is_empty());
    }

    #[test]
    #[should_panic(expected = "root must be scalar-shaped")]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col(vec![1.0, 2.0]), true);
        t.backward(x);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(4, 1));
        t.add(a, b);
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn non_finite_leaf_rejected() {
        let mut t = Tape::new();
        t.leaf(Matrix::col(vec![1.0, f64::NAN]), true);
    }

    #[test]
    #[should_panic(expected = "div: denominator contains an exact zero")]
    fn div_by_zero_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(1.0));
        let b = t.constant(Matrix::scalar(0.0));
        t.div(a, b);
    }

    #[test]
    fn fd_simple_square() {
        let err = finite_difference_check(
            |t, vars| {
                let x = vars[0];
                t.mul(x, x)
            },
            &[Matrix::scalar(1.0)],
            1e-5,
        );
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn fd_small_exponential() {
        // f = exp(0.001 x) at x = 0; analytic derivative 0.001.
        let err = finite_difference_check(
            |t, vars| {
                let s = t.scale(vars[0], 0.001);
                t.exp(s)
            },
            &[Matrix::scalar(0.0)],
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(Matrix::col(vec![0.3, -1.2, 2.5]), true);
            let e = t.exp(x);
            let s = t.sin(e);
            let r = t.norm_sq(s);
            t.value(r).get(0, 0)
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    /// Every registered op passes a central-difference check at 1e-5 on
    /// random inputs.
    #[test]
    fn fd_every_op() {
        let mut rng = Rng::seed_from_u64(42);
        let mut randm = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform(0.2, 1.7)).collect())
        };

        // Each case: (name, builder over leaves, leaf shapes).
        let a32 = randm(3, 2);
        let b32 = randm(3, 2);
        let m23 = randm(2, 3);
        let v3 = randm(3, 1);
        let v2 = randm(2, 1);
        let s11 = randm(1, 1);
        let row = randm(1, 4);

        type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
        let cases: Vec<(&str, Build, Vec<Matrix>)> = vec![
            ("add", Box::new(|t, v| { let y = t.add(v[0], v[1]); t.sum(y) }), vec![a32.clone(), b32.clone()]),
            ("add_bcast", Box::new(|t, v| { let y = t.add(v[0], v[1]); t.sum(y) }), vec![a32.clone(), s11.clone()]),
            ("sub", Box::new(|t, v| { let y = t.sub(v[0], v[1]); t.norm_sq(y) }), vec![a32.clone(), b32.clone()]),
            ("mul", Box::new(|t, v| { let y = t.mul(v[0], v[1]); t.sum(y) }), vec![a32.clone(), b32.clone()]),
            ("mul_bcast", Box::new(|t, v| { let y = t.mul(v[1], v[0]); t.sum(y) }), vec![s11.clone(), a32.clone()]),
            ("div", Box::new(|t, v| { let y = t.div(v[0], v[1]); t.sum(y) }), vec![a32.clone(), b32.clone()]),
            ("div_bcast", Box::new(|t, v| { let y = t.div(v[0], v[1]); t.sum(y) }), vec![a32.clone(), s11.clone()]),
            ("neg", Box::new(|t, v| { let y = t.neg(v[0]); t.norm_sq(y) }), vec![a32.clone()]),
            ("exp", Box::new(|t, v| { let y = t.exp(v[0]); t.sum(y) }), vec![a32.clone()]),
            ("ln", Box::new(|t, v| { let y = t.ln(v[0]); t.sum(y) }), vec![a32.clone()]),
            ("sqrt", Box::new(|t, v| { let y = t.sqrt(v[0]); t.sum(y) }), vec![a32.clone()]),
            ("sin", Box::new(|t, v| { let y = t.sin(v[0]); t.sum(y) }), vec![a32.clone()]),
            ("cos", Box::new(|t, v| { let y = t.cos(v[0]); t.sum(y) }), vec![a32.clone()]),
            ("abs", Box::new(|t, v| { let y = t.abs(v[0]); t.sum(y) }), vec![a32.clone()]),
            ("pow_scalar", Box::new(|t, v| { let y = t.pow_scalar(v[0], 1.7); t.sum(y) }), vec![a32.clone()]),
            ("scale", Box::new(|t, v| { let y = t.scale(v[0], -2.5); t.sum(y) }), vec![a32.clone()]),
            ("add_scalar", Box::new(|t, v| { let y = t.add_scalar(v[0], 3.0); t.norm_sq(y) }), vec![a32.clone()]),
            ("mean", Box::new(|t, v| t.mean(v[0])), vec![a32.clone()]),
            ("dot", Box::new(|t, v| t.dot(v[0], v[1])), vec![a32.clone(), b32.clone()]),
            ("matmul", Box::new(|t, v| { let y = t.matmul(v[0], v[1]); t.norm_sq(y) }), vec![m23.clone(), a32.clone()]),
            ("matvec", Box::new(|t, v| { let y = t.matvec(v[0], v[1]); t.norm_sq(y) }), vec![m23.clone(), v3.clone()]),
            ("outer", Box::new(|t, v| { let y = t.outer(v[0], v[1]); t.norm_sq(y) }), vec![v3.clone(), v2.clone()]),
            ("transpose", Box::new(|t, v| { let y = t.transpose(v[0]); let z = t.matmul(y, v[0]); t.sum(z) }), vec![a32.clone()]),
            ("concat_cols", Box::new(|t, v| { let y = t.concat_cols(v[0], v[1]); t.norm_sq(y) }), vec![a32.clone(), b32.clone()]),
            ("concat_rows", Box::new(|t, v| { let y = t.concat_rows(v[0], v[1]); t.norm_sq(y) }), vec![a32.clone(), b32.clone()]),
            ("slice_rows", Box::new(|t, v| { let y = t.slice_rows(v[0], 1, 3); t.norm_sq(y) }), vec![a32.clone()]),
            ("prelu", Box::new(|t, v| { let c = t.add_scalar(v[0], -1.0); let y = t.prelu(c, v[1]); t.sum(y) }), vec![a32.clone(), s11.clone()]),
            ("col_mean", Box::new(|t, v| { let y = t.col_mean(v[0]); t.norm_sq(y) }), vec![a32.clone()]),
            ("broadcast_rows", Box::new(|t, v| { let y = t.broadcast_rows(v[0], 3); let z = t.mul(y, v[1]); t.sum(z) }), vec![row.clone(), randm(3, 4)]),
        ];

        for (name, build, points) in cases {
            let err = finite_difference_check(|t, v| build(t, v), &points, 1e-5);
            assert!(err < 1e-5, "op {name}: fd error {err}");
        }
    }
}
