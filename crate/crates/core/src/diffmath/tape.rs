//! Reverse-mode gradient accumulation over a recorded sequence of dense
//! matrix operations.
//!
//! Every operation appends a node holding its value and the identities of its
//! inputs. [`Tape::backward`] walks the record in reverse and accumulates
//! adjoints. Nodes that do not depend on any gradient-requiring leaf are
//! skipped.

use std::sync::atomic::{AtomicU64, Ordering};

use super::linalg::{self, Mat};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Sqrt(Var),
    Square(Var),
    ClampMin(Var, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExpCols(Var),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ReshapeRowMajor(Var),
    Tril(Var, bool),
    DiagPart(Var),
    DiagEmbed(Var),
    Cholesky(Var),
    SolveLower(Var, Var),
    SolveLowerT(Var, Var),
    SeKernel {
        x: Var,
        z: Var,
        log_ls: Var,
        log_sf: Var,
    },
    StraightThrough(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// A single recording. Confined to one thread.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        &self.nodes[v.idx]
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    /// Value of a 1×1 variable.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(shape(m), (1, 1));
        m[(0, 0)]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, idx }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.idx < self.nodes.len()
    }

    /// Leaf that gradients are tracked for.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Mat::from_element(1, 1, value))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.constant(Mat::from_row_slice(1, values.len(), values))
    }

    /// Copy of `v` with gradient flow cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(shape(va), shape(vb), "add shape mismatch");
        let value = va + vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(shape(va), shape(vb), "sub shape mismatch");
        let value = va - vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(shape(va), shape(vb), "mul shape mismatch");
        let value = va.component_mul(vb);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(shape(va), shape(vb), "div shape mismatch");
        let value = va.component_div(vb);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `a` (r×c) plus a broadcast row (1×c).
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.nrows(), 1);
        assert_eq!(va.ncols(), vr.ncols(), "add_row width mismatch");
        let mut value = va.clone();
        for j in 0..value.ncols() {
            let r = vr[(0, j)];
            value.column_mut(j).add_scalar_mut(r);
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    /// `a` (r×c) times a broadcast row (1×c), elementwise.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let va = self.value(a);
        let vr = self.value(row);
        assert_eq!(vr.nrows(), 1);
        assert_eq!(va.ncols(), vr.ncols(), "mul_row width mismatch");
        let mut value = va.clone();
        for j in 0..value.ncols() {
            let r = vr[(0, j)];
            value.column_mut(j).scale_mut(r);
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// `a` (r×c) plus a broadcast column (r×1).
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let va = self.value(a);
        let vc = self.value(col);
        assert_eq!(vc.ncols(), 1);
        assert_eq!(va.nrows(), vc.nrows(), "add_col height mismatch");
        let mut value = va.clone();
        for j in 0..value.ncols() {
            for i in 0..value.nrows() {
                value[(i, j)] += vc[(i, 0)];
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(value, Op::AddCol(a, col), rg)
    }

    /// `a` (r×c) times a broadcast column (r×1), elementwise.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let va = self.value(a);
        let vc = self.value(col);
        assert_eq!(vc.ncols(), 1);
        assert_eq!(va.nrows(), vc.nrows(), "mul_col height mismatch");
        let mut value = va.clone();
        for j in 0..value.ncols() {
            for i in 0..value.nrows() {
                value[(i, j)] *= vc[(i, 0)];
            }
        }
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).add_scalar(c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddConst(a), rg)
    }

    /// `a` times a 1×1 variable.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a) * sv;
        let rg = self.rg(&[a, s]);
        self.push(value, Op::MulScalar(a, s), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(
            va.ncols(),
            vb.nrows(),
            "matmul inner dimension mismatch {:?} x {:?}",
            shape(va),
            shape(vb)
        );
        let value = va * vb;
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    // ---- elementwise unary ----

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sqrt(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push(value, Op::Square(a), rg)
    }

    /// `max(a, floor)` elementwise; no gradient where clamped.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|x| x.max(floor));
        let rg = self.rg(&[a]);
        self.push(value, Op::ClampMin(a, floor), rg)
    }

    // ---- reductions ----

    /// Sum of all entries (1×1).
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Mat::from_element(1, 1, s), Op::Sum(a), rg)
    }

    /// Column sums, collapsing rows (1×c).
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).row_sum();
        let value = Mat::from_row_slice(1, value.ncols(), value.as_slice());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row sums, collapsing columns (r×1).
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).column_sum();
        let value = Mat::from_column_slice(value.nrows(), 1, value.as_slice());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    /// Per-row log-sum-exp with max subtraction (r×1).
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = Mat::zeros(va.nrows(), 1);
        for i in 0..va.nrows() {
            let row = va.row(i);
            let m = row.max();
            if m == f64::NEG_INFINITY {
                value[(i, 0)] = f64::NEG_INFINITY;
                continue;
            }
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            value[(i, 0)] = m + s.ln();
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSumExpCols(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for i in 0..va.nrows() {
            let row = va.row(i);
            let m = row.max();
            let s: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let lse = m + s.ln();
            for j in 0..va.ncols() {
                value[(i, j)] = va[(i, j)] - lse;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut value = va.clone();
        for i in 0..va.nrows() {
            let m = va.row(i).max();
            let mut s = 0.0;
            for j in 0..va.ncols() {
                let e = (va[(i, j)] - m).exp();
                value[(i, j)] = e;
                s += e;
            }
            for j in 0..va.ncols() {
                value[(i, j)] /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    // ---- structural ----

    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Var {
        let va = self.value(a);
        let value = va.select_columns(cols.iter());
        let rg = self.rg(&[a]);
        self.push(value, Op::SelectCols(a, cols.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let cols: Vec<usize> = (start..start + len).collect();
        self.select_cols(a, &cols)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.nrows(), rows, "concat_cols height mismatch");
            value.columns_mut(off, vp.ncols()).copy_from(vp);
            off += vp.ncols();
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).ncols();
        let rows: usize = parts.iter().map(|p| self.value(*p).nrows()).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.ncols(), cols, "concat_rows width mismatch");
            value.rows_mut(off, vp.nrows()).copy_from(vp);
            off += vp.nrows();
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Row gather; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).select_rows(rows.iter());
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, rows.to_vec()), rg)
    }

    /// Reinterpret the row-major flattening of `a` as an `rows`×`cols` matrix.
    pub fn reshape_row_major(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = (0..va.nrows())
            .flat_map(|i| (0..va.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| va[(i, j)])
            .collect();
        let value = Mat::from_row_slice(rows, cols, &flat);
        let rg = self.rg(&[a]);
        self.push(value, Op::ReshapeRowMajor(a), rg)
    }

    pub fn tril(&mut self, a: Var, strict: bool) -> Var {
        let value = linalg::tril(self.value(a), strict);
        let rg = self.rg(&[a]);
        self.push(value, Op::Tril(a, strict), rg)
    }

    /// Diagonal of a square matrix as a column.
    pub fn diag_part(&mut self, a: Var) -> Var {
        let d = self.value(a).diagonal();
        let value = Mat::from_column_slice(d.nrows(), 1, d.as_slice());
        let rg = self.rg(&[a]);
        self.push(value, Op::DiagPart(a), rg)
    }

    /// Square diagonal matrix from a column or row vector.
    pub fn diag_embed(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len();
        let mut value = Mat::zeros(n, n);
        for (i, v) in va.iter().enumerate() {
            value[(i, i)] = *v;
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::DiagEmbed(a), rg)
    }

    // ---- linear algebra ----

    /// Recorded Cholesky factorization (no jitter).
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let l = linalg::cholesky(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(l, Op::Cholesky(a), rg))
    }

    /// Cholesky with the kernel jitter policy. The jitter is recorded as
    /// `level · mean(diag(a))` so it is differentiated along with `a`.
    pub fn cholesky_jittered(&mut self, a: Var) -> Result<Var> {
        let (_, eps) = linalg::cholesky_jittered(self.value(a))?;
        let n = self.value(a).nrows();
        let level = eps / linalg::jitter_amount(self.value(a), 1.0);
        let d = self.diag_part(a);
        let mean_diag = self.sum(d);
        let scaled = self.scale(mean_diag, level / n as f64);
        let eye = self.constant(Mat::identity(n, n));
        let jitter = self.mul_scalar(eye, scaled);
        let aj = self.add(a, jitter);
        self.cholesky(aj)
    }

    /// `L⁻¹ B` for lower-triangular `L`.
    pub fn solve_lower(&mut self, l: Var, b: Var) -> Var {
        let value = linalg::solve_lower(self.value(l), self.value(b));
        let rg = self.rg(&[l, b]);
        self.push(value, Op::SolveLower(l, b), rg)
    }

    /// `L⁻ᵀ B` for lower-triangular `L`.
    pub fn solve_lower_t(&mut self, l: Var, b: Var) -> Var {
        let value = linalg::solve_lower_t(self.value(l), self.value(b));
        let rg = self.rg(&[l, b]);
        self.push(value, Op::SolveLowerT(l, b), rg)
    }

    /// Squared-exponential ARD cross-covariance between the rows of `x`
    /// (B×P) and `z` (M×P), with log length-scales (1×P) and log signal std
    /// (1×1).
    pub fn se_kernel(&mut self, x: Var, z: Var, log_ls: Var, log_sf: Var) -> Var {
        let vx = self.value(x);
        let vz = self.value(z);
        let vl = self.value(log_ls);
        let sf2 = (2.0 * self.scalar_value(log_sf)).exp();
        let p = vx.ncols();
        assert_eq!(vz.ncols(), p, "kernel input dimension mismatch");
        assert_eq!(vl.len(), p, "length-scale count mismatch");
        let inv_ls2: Vec<f64> = vl.iter().map(|l| (-2.0 * l).exp()).collect();
        let (b, m) = (vx.nrows(), vz.nrows());
        let mut value = Mat::zeros(b, m);
        for j in 0..m {
            for i in 0..b {
                let mut d2 = 0.0;
                for (q, il) in inv_ls2.iter().enumerate() {
                    let d = vx[(i, q)] - vz[(j, q)];
                    d2 += d * d * il;
                }
                value[(i, j)] = sf2 * (-0.5 * d2).exp();
            }
        }
        let rg = self.rg(&[x, z, log_ls, log_sf]);
        self.push(
            value,
            Op::SeKernel {
                x,
                z,
                log_ls,
                log_sf,
            },
            rg,
        )
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Mat) -> Var {
        assert_eq!(shape(self.value(soft)), shape(&hard));
        let rg = self.rg(&[soft]);
        self.push(hard, Op::StraightThrough(soft), rg)
    }

    // ---- reverse pass ----

    /// Reverse accumulation from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.owns(output) {
            return Err(Error::GraphError(
                "output was not recorded on this tape".into(),
            ));
        }
        let out = self.value(output);
        if shape(out) != (1, 1) {
            return Err(Error::GraphError(format!(
                "objective must be a scalar, got {}x{}",
                out.nrows(),
                out.ncols()
            )));
        }
        let mut grads: Vec<Option<Mat>> = vec![None; output.idx + 1];
        grads[output.idx] = Some(Mat::from_element(1, 1, 1.0));
        for i in (0..=output.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, delta: Mat) {
        if !self.nodes[v.idx].requires_grad {
            return;
        }
        match &mut grads[v.idx] {
            Some(g) => *g += delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.node(*a).requires_grad {
                    self.acc(grads, *a, g.component_mul(self.value(*b)));
                }
                if self.node(*b).requires_grad {
                    self.acc(grads, *b, g.component_mul(self.value(*a)));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.node(*a).requires_grad {
                    self.acc(grads, *a, g.component_div(vb));
                }
                if self.node(*b).requires_grad {
                    // d(a/b)/db = -y/b
                    let d = -g.component_mul(y).component_div(vb);
                    self.acc(grads, *b, d);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.node(*row).requires_grad {
                    let s = g.row_sum();
                    self.acc(grads, *row, Mat::from_row_slice(1, s.ncols(), s.as_slice()));
                }
            }
            Op::MulRow(a, row) => {
                let vr = self.value(*row);
                if self.node(*a).requires_grad {
                    let mut d = g.clone();
                    for j in 0..d.ncols() {
                        d.column_mut(j).scale_mut(vr[(0, j)]);
                    }
                    self.acc(grads, *a, d);
                }
                if self.node(*row).requires_grad {
                    let s = g.component_mul(self.value(*a)).row_sum();
                    self.acc(grads, *row, Mat::from_row_slice(1, s.ncols(), s.as_slice()));
                }
            }
            Op::AddCol(a, col) => {
                self.acc(grads, *a, g.clone());
                if self.node(*col).requires_grad {
                    let s = g.column_sum();
                    self.acc(grads, *col, Mat::from_column_slice(s.nrows(), 1, s.as_slice()));
                }
            }
            Op::MulCol(a, col) => {
                let vc = self.value(*col);
                if self.node(*a).requires_grad {
                    let mut d = g.clone();
                    for j in 0..d.ncols() {
                        for i in 0..d.nrows() {
                            d[(i, j)] *= vc[(i, 0)];
                        }
                    }
                    self.acc(grads, *a, d);
                }
                if self.node(*col).requires_grad {
                    let s = g.component_mul(self.value(*a)).column_sum();
                    self.acc(grads, *col, Mat::from_column_slice(s.nrows(), 1, s.as_slice()));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g * *s),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let sv = self.scalar_value(*s);
                if self.node(*a).requires_grad {
                    self.acc(grads, *a, g * sv);
                }
                if self.node(*s).requires_grad {
                    let d = g.component_mul(self.value(*a)).sum();
                    self.acc(grads, *s, Mat::from_element(1, 1, d));
                }
            }
            Op::MatMul(a, b) => {
                if self.node(*a).requires_grad {
                    self.acc(grads, *a, g * self.value(*b).transpose());
                }
                if self.node(*b).requires_grad {
                    self.acc(grads, *b, self.value(*a).tr_mul(g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Exp(a) => self.acc(grads, *a, g.component_mul(y)),
            Op::Log(a) => self.acc(grads, *a, g.component_div(self.value(*a))),
            Op::Tanh(a) => {
                let d = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi));
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi));
                self.acc(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = g.zip_map(self.value(*a), |gi, xi| gi * sigmoid(xi));
                self.acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(y, |gi, yi| gi * 0.5 / yi);
                self.acc(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gi, xi| 2.0 * gi * xi);
                self.acc(grads, *a, d);
            }
            Op::ClampMin(a, floor) => {
                let d = g.zip_map(self.value(*a), |gi, xi| if xi > *floor { gi } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Mat::from_element(r, c, g[(0, 0)]));
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let d = Mat::from_fn(r, c, |_, j| g[(0, j)]);
                self.acc(grads, *a, d);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let d = Mat::from_fn(r, c, |i, _| g[(i, 0)]);
                self.acc(grads, *a, d);
            }
            Op::LogSumExpCols(a) => {
                let va = self.value(*a);
                let d = Mat::from_fn(va.nrows(), va.ncols(), |i, j| {
                    if y[(i, 0)] == f64::NEG_INFINITY {
                        0.0
                    } else {
                        g[(i, 0)] * (va[(i, j)] - y[(i, 0)]).exp()
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::LogSoftmaxRows(a) => {
                let gs = g.column_sum();
                let d = Mat::from_fn(y.nrows(), y.ncols(), |i, j| {
                    g[(i, j)] - y[(i, j)].exp() * gs[i]
                });
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let dot = g.component_mul(y).column_sum();
                let d = Mat::from_fn(y.nrows(), y.ncols(), |i, j| {
                    y[(i, j)] * (g[(i, j)] - dot[i])
                });
                self.acc(grads, *a, d);
            }
            Op::SelectCols(a, cols) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (k, &col) in cols.iter().enumerate() {
                    let mut dst = d.column_mut(col);
                    dst += g.column(k);
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if self.node(*p).requires_grad {
                        self.acc(grads, *p, g.columns(off, w).into_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.value(*p).nrows();
                    if self.node(*p).requires_grad {
                        self.acc(grads, *p, g.rows(off, h).into_owned());
                    }
                    off += h;
                }
            }
            Op::GatherRows(a, rows) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (k, &row) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(row);
                    dst += g.row(k);
                }
                self.acc(grads, *a, d);
            }
            Op::ReshapeRowMajor(a) => {
                let (r, c) = self.shape(*a);
                let flat: Vec<f64> = (0..g.nrows())
                    .flat_map(|i| (0..g.ncols()).map(move |j| (i, j)))
                    .map(|(i, j)| g[(i, j)])
                    .collect();
                self.acc(grads, *a, Mat::from_row_slice(r, c, &flat));
            }
            Op::Tril(a, strict) => self.acc(grads, *a, linalg::tril(g, *strict)),
            Op::DiagPart(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for i in 0..r.min(c) {
                    d[(i, i)] = g[(i, 0)];
                }
                self.acc(grads, *a, d);
            }
            Op::DiagEmbed(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Mat::zeros(r, c);
                for (k, v) in d.iter_mut().enumerate() {
                    *v = g[(k, k)];
                }
                self.acc(grads, *a, d);
            }
            Op::Cholesky(a) => {
                // symmetric adjoint: S = L⁻ᵀ Φ(Lᵀ L̄) L⁻¹, Ā = ½(S + Sᵀ)
                let l = y;
                let lbar = linalg::tril(g, false);
                let mut p = l.tr_mul(&lbar);
                for j in 0..p.ncols() {
                    for i in 0..p.nrows() {
                        if i < j {
                            p[(i, j)] = 0.0;
                        } else if i == j {
                            p[(i, j)] *= 0.5;
                        }
                    }
                }
                // L⁻ᵀ P L⁻¹ = L⁻ᵀ (L⁻ᵀ Pᵀ)ᵀ
                let tmp = linalg::solve_lower_t(l, &p.transpose());
                let s = linalg::solve_lower_t(l, &tmp.transpose());
                let d = (&s + s.transpose()) * 0.5;
                self.acc(grads, *a, d);
            }
            Op::SolveLower(l, b) => {
                let vl = self.value(*l);
                let bbar = linalg::solve_lower_t(vl, g);
                if self.node(*l).requires_grad {
                    let d = linalg::tril(&(-(&bbar * y.transpose())), false);
                    self.acc(grads, *l, d);
                }
                self.acc(grads, *b, bbar);
            }
            Op::SolveLowerT(l, b) => {
                let vl = self.value(*l);
                let bbar = linalg::solve_lower(vl, g);
                if self.node(*l).requires_grad {
                    let d = linalg::tril(&(-(y * bbar.transpose())), false);
                    self.acc(grads, *l, d);
                }
                self.acc(grads, *b, bbar);
            }
            Op::SeKernel {
                x,
                z,
                log_ls,
                log_sf,
            } => self.se_kernel_backward(y, g, *x, *z, *log_ls, *log_sf, grads),
            Op::StraightThrough(soft) => self.acc(grads, *soft, g.clone()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn se_kernel_backward(
        &self,
        k: &Mat,
        g: &Mat,
        x: Var,
        z: Var,
        log_ls: Var,
        log_sf: Var,
        grads: &mut [Option<Mat>],
    ) {
        let vx = self.value(x);
        let vz = self.value(z);
        let vl = self.value(log_ls);
        let p = vx.ncols();
        let inv_ls2: Vec<f64> = vl.iter().map(|l| (-2.0 * l).exp()).collect();
        let (b, m) = (vx.nrows(), vz.nrows());
        let need_x = self.node(x).requires_grad;
        let need_z = self.node(z).requires_grad;
        let mut dx = Mat::zeros(b, p);
        let mut dz = Mat::zeros(m, p);
        let mut dl = vec![0.0; p];
        let mut dsf = 0.0;
        for j in 0..m {
            for i in 0..b {
                let gk = g[(i, j)] * k[(i, j)];
                if gk == 0.0 {
                    continue;
                }
                dsf += 2.0 * gk;
                for q in 0..p {
                    let d = vx[(i, q)] - vz[(j, q)];
                    let t = d * inv_ls2[q];
                    dl[q] += gk * d * t;
                    if need_x {
                        dx[(i, q)] -= gk * t;
                    }
                    if need_z {
                        dz[(j, q)] += gk * t;
                    }
                }
            }
        }
        if need_x {
            self.acc(grads, x, dx);
        }
        if need_z {
            self.acc(grads, z, dz);
        }
        let (lr, lc) = self.shape(log_ls);
        self.acc(grads, log_ls, Mat::from_row_slice(lr, lc, &dl));
        self.acc(grads, log_sf, Mat::from_element(1, 1, dsf));
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the objective with respect to `v`. `None` when the
    /// objective does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to a leaf, zero-filled if the objective does not
    /// depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Result<Mat> {
        if v.tape != self.tape || !tape.owns(v) {
            return Err(Error::GraphError(
                "variable was not recorded on the differentiated tape".into(),
            ));
        }
        let (r, c) = tape.shape(v);
        Ok(self.get(v).cloned().unwrap_or_else(|| Mat::zeros(r, c)))
    }
}
