//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! Every differentiable value lives on a [`Tape`] and is addressed by a
//! copyable [`Var`] handle. The tape is rebuilt for each forward pass; calling
//! [`Tape::backward`] walks the recorded operations in exact reverse order and
//! returns one gradient buffer per node that requires it.
//!
//! All tensors are rank 2. Scalars are `[1, 1]` and per-row reductions are
//! `[N, 1]` columns.

use std::fmt;

use thiserror::Error;

/// Rows with a Euclidean norm at or below this value cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("l2_normalize: row {row} has norm {norm:e} (degenerate input)")]
    Degenerate { row: usize, norm: f64 },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("invalid data: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense two-dimensional array of `f64` in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(TensorError::Invalid(format!(
                "dimensions must be positive, got [{rows}, {cols}]"
            )));
        }
        if rows * cols != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape [{rows}, {cols}] needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            shape: vec![rows, cols],
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Invalid("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(1, 1, value)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Copies the listed rows, in order, into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            shape: vec![idx.len(), c],
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `C = op(A) · op(B)` where `op` optionally transposes. Transposes are
/// expressed as strides, so no copies are made. The single-threaded kernel
/// uses a fixed blocking order, which keeps results bit-reproducible.
pub fn matmul_raw(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    let (ar, ac) = if trans_a {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (br, bc) = if trans_b {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if ac != br {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: vec![ar, ac],
            right: vec![br, bc],
        });
    }
    // row-major strides of op(X): (row stride, col stride)
    let sa = if trans_a {
        (1, a.cols())
    } else {
        (a.cols(), 1)
    };
    let sb = if trans_b {
        (1, b.cols())
    } else {
        (b.cols(), 1)
    };
    let mut out = vec![0.0; ar * bc];
    if ar > 0 && bc > 0 && ac > 0 {
        // SAFETY: the pointers cover exactly the extents described by the
        // shapes and strides above, and `out` does not alias the inputs.
        unsafe {
            matrixmultiply::dgemm(
                ar,
                ac,
                bc,
                1.0,
                a.data.as_ptr(),
                sa.0 as isize,
                sa.1 as isize,
                b.data.as_ptr(),
                sb.0 as isize,
                sb.1 as isize,
                0.0,
                out.as_mut_ptr(),
                bc as isize,
                1,
            );
        }
    }
    Ok(Tensor {
        shape: vec![ar, bc],
        data: out,
    })
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { kind: Binary, a: Var, b: Var },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    Sum(Var),
    SumRows(Var),
    LogSumExpRows(Var),
    LogSumExpCols(Var),
    Diag(Var),
    ConcatCols(Var, Var),
    Transpose(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    DiagCrossEntropy { input: Var, local: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape if `v` is unreachable.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let s = &self.shapes[v.0];
                Tensor::zeros(s[0], s[1])
            }
        }
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => g,
            None => {
                let s = &self.shapes[v.0];
                Tensor::zeros(s[0], s[1])
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(2);
    for d in 0..2 {
        let (x, y) = (a[d], b[d]);
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(TensorError::ShapeMismatch {
                op,
                left: a.to_vec(),
                right: b.to_vec(),
            });
        }
    }
    Ok(out)
}

/// `f(a, b)` over the broadcast `shape`, walking rows so that neither
/// operand is indexed per element.
fn broadcast_zip(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (n, m) = (shape[0], shape[1]);
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ra = if a.shape[0] == 1 { a.row(0) } else { a.row(i) };
        let rb = if b.shape[0] == 1 { b.row(0) } else { b.row(i) };
        match (ra.len() == m, rb.len() == m) {
            (true, true) => out.extend(ra.iter().zip(rb).map(|(&x, &y)| f(x, y))),
            (true, false) => out.extend(ra.iter().map(|&x| f(x, rb[0]))),
            (false, true) => out.extend(rb.iter().map(|&y| f(ra[0], y))),
            (false, false) => out.extend(std::iter::repeat_n(f(ra[0], rb[0]), m)),
        }
    }
    out
}

/// Sums `g` down to `target` along broadcast axes.
fn reduce_to(g: Tensor, target: &[usize]) -> Tensor {
    if g.shape == target {
        return g;
    }
    let (r, c) = (g.rows(), g.cols());
    let mut out = Tensor::zeros(target[0], target[1]);
    for i in 0..r {
        let row = g.row(i);
        let dst = if target[0] == 1 { 0 } else { i };
        if target[1] == 1 {
            out.data[dst] += row.iter().fold(0.0, |acc, &x| acc + x);
        } else {
            for (o, &x) in out.data[dst * c..(dst + 1) * c].iter_mut().zip(row) {
                *o += x;
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.data.iter().all(|x| !x.is_nan()),
            "NaN produced by {op:?}"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_raw(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ`; the score matrix of two embedding blocks.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_raw(self.value(a), false, self.value(b), true)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            rg,
        ))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape = broadcast_shape(name, &sa, &sb)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = match kind {
            Binary::Add => broadcast_zip(va, vb, &shape, |x, y| x + y),
            Binary::Sub => broadcast_zip(va, vb, &shape, |x, y| x - y),
            Binary::Mul => broadcast_zip(va, vb, &shape, |x, y| x * y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape, data }, Op::Binary { kind, a, b }, rg))
    }

    /// Elementwise sum. Either operand may broadcast along a unit axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    /// Square root of a non-negative input. The gradient at exactly zero is
    /// taken to be zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data.iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `max(x, lo)`; gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, Op::ClampMin(a, lo), |x| x.max(lo))
    }

    /// `min(x, hi)`; gradient passes only where `x < hi`.
    pub fn clamp_max(&mut self, a: Var, hi: f64) -> Var {
        self.unary(a, Op::ClampMax(a, hi), |x| x.min(hi))
    }

    /// Sum of all elements as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().fold(0.0, |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `[N, M] -> [N, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let data: Vec<f64> = v
            .data
            .chunks(c)
            .map(|r| r.iter().fold(0.0, |acc, &x| acc + x))
            .collect();
        let n = data.len();
        let rg = self.rg(a);
        self.push(
            Tensor {
                shape: vec![n, 1],
                data,
            },
            Op::SumRows(a),
            rg,
        )
    }

    /// Stable `log Σ exp` along each row, `[N, M] -> [N, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let data: Vec<f64> = v.data.chunks(c).map(logsumexp_slice).collect();
        let n = data.len();
        let rg = self.rg(a);
        self.push(
            Tensor {
                shape: vec![n, 1],
                data,
            },
            Op::LogSumExpRows(a),
            rg,
        )
    }

    /// Stable `log Σ exp` down each column, `[N, M] -> [1, M]`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let data = col_logsumexp(self.value(a));
        let m = data.len();
        let rg = self.rg(a);
        self.push(
            Tensor {
                shape: vec![1, m],
                data,
            },
            Op::LogSumExpCols(a),
            rg,
        )
    }

    /// Cross-entropy of a square logit matrix whose targets sit on the
    /// diagonal: `mean_i(lse_i − S_ii)` along rows, columns, or the average
    /// of both. Softmax weights are kept for the backward pass.
    pub fn diag_cross_entropy(&mut self, a: Var, rows: bool, cols: bool) -> Result<Var> {
        let v = self.value(a);
        let n = v.rows();
        if n != v.cols() || n == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "diag_cross_entropy",
                left: v.shape.clone(),
                right: vec![n, n],
            });
        }
        if !rows && !cols {
            return Err(TensorError::Invalid(
                "diag_cross_entropy needs a direction".into(),
            ));
        }
        let w = 1.0 / (f64::from(u8::from(rows) + u8::from(cols)) * n as f64);
        let diag: f64 = (0..n).fold(0.0, |acc, i| acc + v.data[i * n + i]);
        let (lo, hi) = v
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| {
                (l.min(x), h.max(x))
            });
        let mut loss = 0.0;
        // dL/dS accumulated from each direction's softmax, minus the targets
        let mut grad = vec![0.0; n * n];
        if rows && cols && hi - lo < 600.0 {
            // one exp per entry, shifted by the global max; the spread bound
            // keeps every row and column sum well away from underflow
            let e: Vec<f64> = v.data.iter().map(|&x| (x - hi).exp()).collect();
            let mut col_sum = vec![0.0; n];
            let mut row_sum = vec![0.0; n];
            for (i, row) in e.chunks(n).enumerate() {
                for (c, &x) in col_sum.iter_mut().zip(row) {
                    *c += x;
                }
                row_sum[i] = row.iter().fold(0.0, |acc, &x| acc + x);
            }
            for (&r, &c) in row_sum.iter().zip(&col_sum) {
                loss += 2.0 * hi + r.ln() + c.ln();
            }
            let inv_c: Vec<f64> = col_sum.iter().map(|c| w / c).collect();
            for (i, (gr, er)) in grad.chunks_mut(n).zip(e.chunks(n)).enumerate() {
                let inv_r = w / row_sum[i];
                for ((g, &x), &ic) in gr.iter_mut().zip(er).zip(&inv_c) {
                    *g = x * (inv_r + ic);
                }
            }
            loss -= 2.0 * diag;
        } else {
            if rows {
                for (i, row) in v.data.chunks(n).enumerate() {
                    let lse = logsumexp_slice(row);
                    loss += lse;
                    for (gj, &x) in grad[i * n..(i + 1) * n].iter_mut().zip(row) {
                        *gj += w * (x - lse).exp();
                    }
                }
                loss -= diag;
            }
            if cols {
                let lse = col_logsumexp(v);
                loss += lse.iter().sum::<f64>();
                for (gr, row) in grad.chunks_mut(n).zip(v.data.chunks(n)) {
                    for ((gj, &x), &l) in gr.iter_mut().zip(row).zip(&lse) {
                        *gj += w * (x - l).exp();
                    }
                }
                loss -= diag;
            }
        }
        let k = f64::from(u8::from(rows) + u8::from(cols));
        for i in 0..n {
            grad[i * n + i] -= k * w;
        }
        let value = Tensor::scalar(loss * w);
        let rg = self.rg(a);
        let local = Tensor {
            shape: vec![n, n],
            data: grad,
        };
        Ok(self.push(value, Op::DiagCrossEntropy { input: a, local }, rg))
    }

    /// Diagonal of a square matrix as an `[N, 1]` column.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != v.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "diag",
                left: v.shape.clone(),
                right: vec![v.rows(), v.rows()],
            });
        }
        let n = v.rows();
        let data = (0..n).map(|i| v.data[i * n + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![n, 1],
                data,
            },
            Op::Diag(a),
            rg,
        ))
    }

    /// `[N, A] ++ [N, B] -> [N, A + B]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: va.shape.clone(),
                right: vb.shape.clone(),
            });
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![n, ca + cb],
                data,
            },
            Op::ConcatCols(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.len());
        for (row_idx, row) in v.data.chunks(c).enumerate() {
            let norm = row.iter().fold(0.0, |acc, &x| acc + x * x).sqrt();
            if norm.is_nan() || norm <= NORM_EPS {
                return Err(TensorError::Degenerate { row: row_idx, norm });
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let shape = v.shape.clone();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor { shape, data },
            Op::L2Normalize { input: a, norms },
            rg,
        ))
    }

    /// Row-wise dot products of two equally shaped blocks, `[N, D] -> [N, 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "row_dot",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let m = self.mul(a, b)?;
        Ok(self.sum_rows(m))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        let ls = self.shape(loss);
        if ls != [1, 1] {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            // only leaves and the loss keep their gradients
            if matches!(node.op, Op::Leaf) || id == loss.0 {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    // C = A·B → dA = G·Bᵀ ; C = A·Bᵀ → dA = G·B
                    let ga = matmul_raw(g, false, vb, !trans_b).expect("matmul grad");
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    // C = A·B → dB = Aᵀ·G ; C = A·Bᵀ → dB = Gᵀ·A
                    let gb = if *trans_b {
                        matmul_raw(g, true, va, false)
                    } else {
                        matmul_raw(va, true, g, false)
                    }
                    .expect("matmul grad");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                match kind {
                    Binary::Add | Binary::Sub => {
                        if self.rg(*a) {
                            self.accumulate(grads, *a, reduce_to(g.clone(), &sa));
                        }
                        if self.rg(*b) {
                            let mut gb = reduce_to(g.clone(), &sb);
                            if matches!(kind, Binary::Sub) {
                                gb.data.iter_mut().for_each(|x| *x = -*x);
                            }
                            self.accumulate(grads, *b, gb);
                        }
                    }
                    Binary::Mul => {
                        let (va, vb) = (self.value(*a), self.value(*b));
                        let shape = &out.shape;
                        if self.rg(*a) {
                            let full = Tensor {
                                shape: shape.clone(),
                                data: broadcast_zip(g, vb, shape, |g, y| g * y),
                            };
                            self.accumulate(grads, *a, reduce_to(full, &sa));
                        }
                        if self.rg(*b) {
                            let full = Tensor {
                                shape: shape.clone(),
                                data: broadcast_zip(g, va, shape, |g, x| g * x),
                            };
                            self.accumulate(grads, *b, reduce_to(full, &sb));
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let ga = zip_map(g, x, |g, x| if x > 0.0 { g } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(g, out, |g, y| g * y);
                self.accumulate(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_map(g, self.value(*a), |g, x| g / x);
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = zip_map(g, out, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, s) => {
                let ga = g.map(|x| x * s);
                self.accumulate(grads, *a, ga);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ClampMin(a, lo) => {
                let ga = zip_map(g, self.value(*a), |g, x| if x > *lo { g } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::ClampMax(a, hi) => {
                let ga = zip_map(g, self.value(*a), |g, x| if x < *hi { g } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = self.shape(*a);
                self.accumulate(grads, *a, Tensor::full(s[0], s[1], g.item()));
            }
            Op::SumRows(a) => {
                let s = self.shape(*a);
                let mut ga = Tensor::zeros(s[0], s[1]);
                for i in 0..s[0] {
                    ga.data[i * s[1]..(i + 1) * s[1]].fill(g.data[i]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.rows(), c);
                for i in 0..x.rows() {
                    let lse = out.data[i];
                    for j in 0..c {
                        ga.data[i * c + j] = g.data[i] * (x.data[i * c + j] - lse).exp();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::DiagCrossEntropy { input, local } => {
                let gv = g.item();
                self.accumulate(grads, *input, local.map(|x| x * gv));
            }
            Op::LogSumExpCols(a) => {
                let x = self.value(*a);
                let c = x.cols();
                let mut ga = Tensor::zeros(x.rows(), c);
                for i in 0..x.rows() {
                    for j in 0..c {
                        ga.data[i * c + j] = g.data[j] * (x.data[i * c + j] - out.data[j]).exp();
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Diag(a) => {
                let n = out.rows();
                let mut ga = Tensor::zeros(n, n);
                for i in 0..n {
                    ga.data[i * n + i] = g.data[i];
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let n = out.rows();
                let mut ga = Vec::with_capacity(n * ca);
                let mut gb = Vec::with_capacity(n * cb);
                for row in g.data.chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                if self.rg(*a) {
                    let t = Tensor {
                        shape: vec![n, ca],
                        data: ga,
                    };
                    self.accumulate(grads, *a, t);
                }
                if self.rg(*b) {
                    let t = Tensor {
                        shape: vec![n, cb],
                        data: gb,
                    };
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::L2Normalize { input, norms } => {
                // dx = (dy − y·⟨y, dy⟩) / ‖x‖
                let c = out.cols();
                let mut ga = Tensor::zeros(out.rows(), c);
                for (i, &norm) in norms.iter().enumerate() {
                    let y = &out.data[i * c..(i + 1) * c];
                    let dy = &g.data[i * c..(i + 1) * c];
                    let proj = y.iter().zip(dy).fold(0.0, |acc, (a, b)| acc + a * b);
                    for j in 0..c {
                        ga.data[i * c + j] = (dy[j] - y[j] * proj) / norm;
                    }
                }
                self.accumulate(grads, *input, ga);
            }
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: g.shape.clone(),
        data: g.data.iter().zip(&x.data).map(|(&a, &b)| f(a, b)).collect(),
    }
}

fn col_logsumexp(v: &Tensor) -> Vec<f64> {
    let c = v.cols();
    let mut m = vec![f64::NEG_INFINITY; c];
    for row in v.data.chunks(c) {
        for (mj, &x) in m.iter_mut().zip(row) {
            *mj = mj.max(x);
        }
    }
    let mut s = vec![0.0; c];
    for row in v.data.chunks(c) {
        for ((sj, &x), &mj) in s.iter_mut().zip(row).zip(&m) {
            *sj += (x - mj).exp();
        }
    }
    m.iter()
        .zip(&s)
        .map(|(&mj, &sj)| if mj.is_finite() { mj + sj.ln() } else { mj })
        .collect()
}

/// `max + ln Σ exp(x − max)`.
pub fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s = xs.iter().fold(0.0, |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let b = tape.param(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[1.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn odd_row_counts_use_remainder_path() {
        let a = Tensor::from_vec(5, 3, (0..15).map(f64::from).collect()).unwrap();
        let b = Tensor::from_vec(3, 2, (0..6).map(f64::from).collect()).unwrap();
        let c = matmul_raw(&a, false, &b, false).unwrap();
        for i in 0..5 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert_eq!(c.get(i, j), want);
            }
        }
        let ct = matmul_raw(&b, true, &a, true).unwrap();
        assert_eq!(ct, c.transpose());
    }

    #[test]
    fn relu_and_add_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[-1.0, 0.0, 2.0]]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.constant(Tensor::zeros(1, 3));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
    }

    #[test]
    fn relu_gradient_only_where_positive() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[-1.0, 0.0, 2.0]]));
        let r = tape.relu(x);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[1.0, 0.0]]));
        assert!(matches!(
            tape.log(x),
            Err(TensorError::Domain { op: "log", .. })
        ));
    }

    #[test]
    fn logsumexp_cases() {
        assert!((logsumexp_slice(&[0.0; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!((logsumexp_slice(&[1000.0, 0.0]) - 1000.0).abs() < 1e-9);
        assert!((logsumexp_slice(&[2.0, 0.0]) - 2.126928011042972).abs() < 1e-9);
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[2.0, 0.0], &[1000.0, 0.0]]));
        let r = tape.logsumexp_rows(x);
        assert!((tape.value(r).get(0, 0) - 2.126928011042972).abs() < 1e-9);
        let c = tape.logsumexp_cols(x);
        assert!((tape.value(c).get(0, 0) - 1000.0).abs() < 1e-9);
        assert!((tape.value(c).get(0, 1) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn normalize_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[3.0, 4.0], &[0.0, 1.0]]));
        let y = tape.l2_normalize(x).unwrap();
        let v = tape.value(y);
        assert!((v.get(0, 0) - 0.6).abs() < 1e-15 && (v.get(0, 1) - 0.8).abs() < 1e-15);
        assert_eq!(v.row(1), &[0.0, 1.0]);
        let z = tape.constant(t(&[&[1.0, 1.0], &[0.0, 0.0]]));
        assert!(matches!(
            tape.l2_normalize(z),
            Err(TensorError::Degenerate { row: 1, .. })
        ));
    }

    #[test]
    fn backward_contract() {
        let mut tape = Tape::new();
        assert_eq!(tape.backward(Var(0)).err(), Some(TensorError::EmptyTape));
        let x = tape.param(Tensor::full(2, 2, 3.0));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let c = tape.constant(Tensor::scalar(5.0));
        let g = tape.backward(c).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0; 4]);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 4]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::full(1, 3, 2.0));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap(); // 2x²
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[8.0; 3]);
    }

    #[test]
    fn broadcast_bias_gradient_reduces() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(3, 2, 1.0));
        let b = tape.param(t(&[&[0.5, -0.5]]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        let col = tape.param(t(&[&[1.0], &[2.0], &[3.0]]));
        let z = tape.mul(y, col).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(b).data(), &[6.0, 6.0]);
        assert_eq!(g.wrt(col).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sqrt_gradient_zero_at_origin() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[&[0.0, 4.0]]));
        let y = tape.sqrt(x).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.25]);
    }
}
