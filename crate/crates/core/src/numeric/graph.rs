//! Define-by-run reverse-mode tape.
//!
//! Every forward op appends a node holding its value and enough saved state to
//! apply its backward rule. Nodes are appended in evaluation order, so a
//! reverse sweep is a valid topological order. Parameters enter the tape
//! through [`Graph::param`] and receive their gradients in [`Graph::backward`].

use std::collections::HashMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{ParamRegistry, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

/// How a strided convolution handles a window count that is not integral.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRounding {
    /// `(H + 2p - k) % stride != 0` is a dimension error.
    Exact,
    /// Trailing rows/columns that do not fill a window are skipped.
    Floor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Operation kinds, used for error messages, fault injection and gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    MatMulT,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Affine,
    MulScalar,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    Transpose,
    Reshape,
    ConcatCols,
    ConcatRows,
    SliceCols,
    Index,
    MeanRows,
    Sum,
    Conv2d,
    BatchNorm,
    Dropout,
    SegmentSoftmax,
    SegmentPool,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Leaf,
        OpKind::Param,
        OpKind::MatMul,
        OpKind::MatMulT,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::AddRow,
        OpKind::Scale,
        OpKind::Affine,
        OpKind::MulScalar,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Softmax,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SliceCols,
        OpKind::Index,
        OpKind::MeanRows,
        OpKind::Sum,
        OpKind::Conv2d,
        OpKind::BatchNorm,
        OpKind::Dropout,
        OpKind::SegmentSoftmax,
        OpKind::SegmentPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Param => "param",
            OpKind::MatMul => "matmul",
            OpKind::MatMulT => "matmul_t",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::Scale => "scale",
            OpKind::Affine => "affine",
            OpKind::MulScalar => "mul_scalar",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Index => "index",
            OpKind::MeanRows => "mean_rows",
            OpKind::Sum => "sum",
            OpKind::Conv2d => "conv2d",
            OpKind::BatchNorm => "batch_norm",
            OpKind::Dropout => "dropout",
            OpKind::SegmentSoftmax => "segment_softmax",
            OpKind::SegmentPool => "segment_pool",
        }
    }
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown operation '{s}'")))
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Affine(Var, T),
    MulScalar(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Index(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Dropout(Var, Vec<T>),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentPool(Var, Var, Vec<usize>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Affine(..) => OpKind::Affine,
            Op::MulScalar(..) => OpKind::MulScalar,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::Index(..) => OpKind::Index,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::Sum(_) => OpKind::Sum,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Dropout(..) => OpKind::Dropout,
            Op::SegmentSoftmax(..) => OpKind::SegmentSoftmax,
            Op::SegmentPool(..) => OpKind::SegmentPool,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch-norm epsilon and running-statistics momentum.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<usize, Var>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            fault: None,
        }
    }

    /// Test hook: the backward rule of `kind` propagates a gradient scaled by 1.5.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First element; the value of a scalar node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let kind = op.kind();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{kind} produced a non-finite value")));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::SegmentPool(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceCols(a, _)
            | Op::Index(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Dropout(a, _)
            | Op::SegmentSoftmax(a, _) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }

    // ---------------------------------------------------------------- leaves

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf)
    }

    /// Lifts the parameter at `path` onto the tape. Repeated calls within one
    /// recording return the same node, so gradients from every use are summed.
    pub fn param(&mut self, reg: &ParamRegistry<T>, path: &str) -> Result<Var> {
        let idx = reg
            .index_of(path)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{path}'")))?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        let (_, t) = reg.by_index(idx);
        let mut value = t.clone();
        value.clear_grad();
        let v = self.push(value, Op::Param(idx))?;
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul: [{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_t lhs")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_t rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul_t: [{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        self.push(Tensor::new(&[m, n], out)?, Op::MatMulT(a, b))
    }

    /// `x · W + b` with `x: [m×i]`, `W: [i×o]`, `b: [1×o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- elementwise

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    /// Adds a `[1×n]` row to every row of `a: [m×n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.value(a).rows_cols();
        if self.value(row).len() != n {
            return Err(Error::dim(format!(
                "add_row: row of {} entries for {n} columns",
                self.value(row).len()
            )));
        }
        let ta = self.value(a);
        let r = self.value(row).data();
        let mut data = ta.data().to_vec();
        for c in data.chunks_mut(n) {
            for (x, &y) in c.iter_mut().zip(r) {
                *x += y;
            }
        }
        let t = Tensor::new(ta.shape(), data)?;
        self.push(t, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let t = self.map(a, |x| x * s);
        self.push(t, Op::Scale(a, s))
    }

    /// `s·a + shift`.
    pub fn affine(&mut self, a: Var, s: T, shift: T) -> Result<Var> {
        let t = self.map(a, |x| x * s + shift);
        self.push(t, Op::Affine(a, s))
    }

    /// `a` times the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim(format!(
                "mul_scalar: factor has shape {:?}",
                self.shape(s)
            )));
        }
        let k = self.scalar(s);
        let t = self.map(a, |x| x * k);
        self.push(t, Op::MulScalar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, T::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    /// Softmax along the last axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let (_, n) = ta.rows_cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape(), data)?;
        self.push(t, Op::Softmax(a))
    }

    // ---------------------------------------------------------------- shape

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = matrix_dims(ta, "transpose")?;
        let src = ta.data();
        let mut data = Vec::with_capacity(m * n);
        for j in 0..n {
            for i in 0..m {
                data.push(src[i * n + j]);
            }
        }
        self.push(Tensor::new(&[n, m], data)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.value(a).data().to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    /// Concatenates along the last axis; all inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols: no inputs"));
        }
        let rows = self.value(parts[0]).rows_cols().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if r != rows {
                return Err(Error::dim(format!("concat_cols: {r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(&[rows, total], data)?, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks matrices (or row vectors) along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows: no inputs"));
        }
        let cols = self.value(parts[0]).rows_cols().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if c != cols {
                return Err(Error::dim(format!("concat_rows: {c} columns vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Tensor::new(&[rows, cols], data)?, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.value(a).rows_cols();
        if width == 0 || start + width > n {
            return Err(Error::dim(format!(
                "slice_cols: [{start}, {}) out of {n} columns",
                start + width
            )));
        }
        let src = self.value(a).data();
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + width].iter().copied())
            .collect();
        self.push(Tensor::new(&[m, width], data)?, Op::SliceCols(a, start))
    }

    /// Element `i` of the flattened tensor, as a `[1×1]` node.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        if i >= n {
            return Err(Error::dim(format!("index {i} out of {n}")));
        }
        let x = self.value(a).data()[i];
        self.push(Tensor::new(&[1, 1], vec![x])?, Op::Index(a, i))
    }

    // ---------------------------------------------------------------- reductions

    /// Column means of `[m×n]`, as `[1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).rows_cols();
        let mut acc = vec![T::zero(); n];
        for row in self.value(a).data().chunks(n) {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s += x;
            }
        }
        let inv = T::one() / T::of(m as f64);
        acc.iter_mut().for_each(|x| *x *= inv);
        self.push(Tensor::new(&[1, n], acc)?, Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        let s = self.sum(sq)?;
        let n = self.value(pred).len();
        self.scale(s, T::one() / T::of(n as f64))
    }

    // ---------------------------------------------------------------- layers

    /// Cross-correlation of `input: [C×H×W]` with `kernel: [F×C×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_with(input, kernel, stride, pad, ConvRounding::Exact)
    }

    pub fn conv2d_with(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        pad: usize,
        rounding: ConvRounding,
    ) -> Result<Var> {
        let (c, h, w) = match self.shape(input) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(Error::dim(format!("conv2d input must be CxHxW, got {s:?}"))),
        };
        let (f, kc, k) = match self.shape(kernel) {
            [f, kc, k1, k2] if k1 == k2 => (*f, *kc, *k1),
            s => return Err(Error::dim(format!("conv2d kernel must be FxCxkxk, got {s:?}"))),
        };
        if kc != c {
            return Err(Error::dim(format!("conv2d: kernel has {kc} channels, input {c}")));
        }
        if k % 2 == 0 {
            return Err(Error::dim(format!("conv2d: kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride 0"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!("conv2d: {h}x{w} (pad {pad}) smaller than kernel {k}")));
        }
        let (sh, sw) = (h + 2 * pad - k, w + 2 * pad - k);
        if rounding == ConvRounding::Exact && (sh % stride != 0 || sw % stride != 0) {
            return Err(Error::dim(format!(
                "conv2d: ({h}+2*{pad}-{k})/{stride} or ({w}+2*{pad}-{k})/{stride} is not integral"
            )));
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            f,
            k,
            stride,
            pad,
            oh: sh / stride + 1,
            ow: sw / stride + 1,
        };
        let cols = im2col(self.value(input).data(), &geom);
        let ckk = c * k * k;
        let hw = geom.oh * geom.ow;
        let mut out = vec![T::zero(); f * hw];
        T::gemm(
            f,
            ckk,
            hw,
            T::one(),
            self.value(kernel).data(),
            (ckk as isize, 1),
            &cols,
            (hw as isize, 1),
            T::zero(),
            &mut out,
            (hw as isize, 1),
        );
        let t = Tensor::new(&[f, geom.oh, geom.ow], out)?;
        self.push(
            t,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        )
    }

    /// Batch normalization of `x: [N×C]` over the batch axis.
    ///
    /// `running_mean` / `running_var` are read in eval mode and updated with
    /// momentum [`BN_MOMENTUM`] in train mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut [T],
        running_var: &mut [T],
        mode: Mode,
    ) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(x), "batch_norm")?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(v).len() != c {
                return Err(Error::dim(format!("batch_norm: {what} has {} entries for {c} channels", self.value(v).len())));
            }
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm: running statistics length"));
        }
        let train = mode == Mode::Train;
        if train && n < 2 {
            return Err(Error::dim(format!("batch_norm: train mode needs N >= 2, got {n}")));
        }
        let eps = T::of(BN_EPS);
        let xs = self.value(x).data();
        let (mean, var) = if train {
            let inv_n = T::one() / T::of(n as f64);
            let mut mean = vec![T::zero(); c];
            for row in xs.chunks(c) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m *= inv_n);
            let mut var = vec![T::zero(); c];
            for row in xs.chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_n);
            (mean, var)
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(n * c);
        let mut out = Vec::with_capacity(n * c);
        for row in xs.chunks(c) {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        if train {
            let mom = T::of(BN_MOMENTUM);
            for j in 0..c {
                running_mean[j] = (T::one() - mom) * running_mean[j] + mom * mean[j];
                running_var[j] = (T::one() - mom) * running_var[j] + mom * var[j];
            }
        }
        let t = Tensor::new(&[n, c], out)?;
        self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        )
    }

    /// Inverted dropout. Identity in eval mode or at rate 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let t = Tensor::new(tx.shape(), data)?;
        self.push(t, Op::Dropout(x, mask))
    }

    /// Softmax of a column of scores within each segment
    /// `[offsets[i], offsets[i+1])`.
    pub fn segment_softmax(&mut self, scores: Var, offsets: &[usize]) -> Result<Var> {
        let n = self.value(scores).len();
        check_offsets(offsets, n)?;
        let mut data = self.value(scores).data().to_vec();
        for s in offsets.windows(2) {
            if s[1] > s[0] {
                softmax_in_place(&mut data[s[0]..s[1]]);
            }
        }
        let t = Tensor::new(self.shape(scores), data)?;
        self.push(t, Op::SegmentSoftmax(scores, offsets.to_vec()))
    }

    /// Weighted sum of rows of `rows: [n×d]` within each segment, using
    /// per-row `weights: [n]`; empty segments produce zero rows.
    pub fn segment_pool(&mut self, weights: Var, rows: Var, offsets: &[usize]) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(rows), "segment_pool rows")?;
        if self.value(weights).len() != n {
            return Err(Error::dim(format!(
                "segment_pool: {} weights for {n} rows",
                self.value(weights).len()
            )));
        }
        check_offsets(offsets, n)?;
        let segs = offsets.len() - 1;
        let w = self.value(weights).data();
        let h = self.value(rows).data();
        let mut out = vec![T::zero(); segs * d];
        for (i, s) in offsets.windows(2).enumerate() {
            let o = &mut out[i * d..(i + 1) * d];
            for j in s[0]..s[1] {
                let wj = w[j];
                for (acc, &x) in o.iter_mut().zip(&h[j * d..(j + 1) * d]) {
                    *acc += wj * x;
                }
            }
        }
        let t = Tensor::new(&[segs, d], out)?;
        self.push(t, Op::SegmentPool(weights, rows, offsets.to_vec()))
    }

    // ---------------------------------------------------------------- backward

    /// Accumulates `d loss / d param` into the grad slots of `reg` (`+=`) and
    /// clears the tape.
    pub fn backward(&mut self, loss: Var, reg: &mut ParamRegistry<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Param(idx) = self.nodes[i].op {
                let (_, t) = reg.by_index_mut(idx);
                if t.len() != g.len() {
                    return Err(Error::contract("parameter changed shape during recording"));
                }
                t.accumulate_grad(&g);
                continue;
            }
            if self.fault == Some(self.nodes[i].op.kind()) {
                g.iter_mut().for_each(|x| *x *= T::of(1.5));
            }
            self.backprop_node(i, &g, &mut grads);
        }
        self.nodes.clear();
        self.param_vars.clear();
        Ok(())
    }

    /// Discards the tape without computing gradients.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();
        // Returns the (lazily zeroed) gradient buffer of `v`, or None when `v`
        // does not need one.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
                } else {
                    None
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.rows_cols();
                let n = nodes[b.0].value.rows_cols().1;
                if let Some(ga) = slot!(*a) {
                    // ga += g · bᵀ
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), val(*b), (1, n as isize), T::one(), ga, (k as isize, 1));
                }
                if let Some(gb) = slot!(*b) {
                    // gb += aᵀ · g
                    T::gemm(k, m, n, T::one(), val(*a), (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = nodes[a.0].value.rows_cols();
                let n = nodes[b.0].value.rows_cols().0;
                if let Some(ga) = slot!(*a) {
                    // ga += g · b
                    T::gemm(m, n, k, T::one(), g, (n as isize, 1), val(*b), (k as isize, 1), T::one(), ga, (k as isize, 1));
                }
                if let Some(gb) = slot!(*b) {
                    // gb += gᵀ · a
                    T::gemm(n, m, k, T::one(), g, (1, n as isize), val(*a), (k as isize, 1), T::one(), gb, (k as isize, 1));
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot!(*b) {
                    gb.iter_mut().zip(g).for_each(|(s, &x)| *s -= x);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    for ((s, &x), &y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *s += x * y;
                    }
                }
                if let Some(gb) = slot!(*b) {
                    for ((s, &x), &y) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *s += x * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
                if let Some(gr) = slot!(*row) {
                    let n = gr.len();
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::Scale(a, s) | Op::Affine(a, s) => {
                if let Some(ga) = slot!(*a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * *s;
                    }
                }
            }
            Op::MulScalar(a, s) => {
                let k = val(*s)[0];
                let dot: T = g.iter().zip(val(*a)).map(|(&x, &y)| x * y).sum();
                if let Some(ga) = slot!(*a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * k;
                    }
                }
                if let Some(gs) = slot!(*s) {
                    gs[0] += dot;
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d += x;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += x * (T::one() - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += x * y * (T::one() - y);
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = slot!(*a) {
                    let n = nodes[i].value.rows_cols().1;
                    softmax_backward(ga, g, out, n);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = slot!(*a) {
                    let (m, n) = nodes[a.0].value.rows_cols();
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot!(*a) {
                    add_into(ga, g);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = nodes[i].value.rows_cols();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.rows_cols().1;
                    if let Some(gp) = slot!(p) {
                        for r in 0..rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if let Some(gp) = slot!(p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                if let Some(ga) = slot!(*a) {
                    let n = nodes[a.0].value.rows_cols().1;
                    let (m, w) = nodes[i].value.rows_cols();
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Index(a, ix) => {
                if let Some(ga) = slot!(*a) {
                    ga[*ix] += g[0];
                }
            }
            Op::MeanRows(a) => {
                if let Some(ga) = slot!(*a) {
                    let (m, n) = nodes[a.0].value.rows_cols();
                    let inv = T::one() / T::of(m as f64);
                    for row in ga.chunks_mut(n) {
                        for (d, &x) in row.iter_mut().zip(g) {
                            *d += x * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let ckk = geom.c * geom.k * geom.k;
                let hw = geom.oh * geom.ow;
                if let Some(gk) = slot!(*kernel) {
                    // gK += g · colsᵀ
                    T::gemm(geom.f, hw, ckk, T::one(), g, (hw as isize, 1), cols, (1, hw as isize), T::one(), gk, (ckk as isize, 1));
                }
                if nodes[input.0].requires_grad {
                    let mut gcols = vec![T::zero(); ckk * hw];
                    T::gemm(ckk, geom.f, hw, T::one(), val(*kernel), (1, ckk as isize), g, (hw as isize, 1), T::zero(), &mut gcols, (hw as isize, 1));
                    if let Some(gi) = slot!(*input) {
                        col2im_add(&gcols, geom, gi);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c) = nodes[i].value.rows_cols();
                let gam = val(*gamma).to_vec();
                if let Some(gg) = slot!(*gamma) {
                    for (r, row) in g.chunks(c).enumerate() {
                        for j in 0..c {
                            gg[j] += row[j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = slot!(*beta) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gx) = slot!(*x) {
                    if *train {
                        let mut sum_g = vec![T::zero(); c];
                        let mut sum_gx = vec![T::zero(); c];
                        for (r, row) in g.chunks(c).enumerate() {
                            for j in 0..c {
                                let gh = row[j] * gam[j];
                                sum_g[j] += gh;
                                sum_gx[j] += gh * xhat[r * c + j];
                            }
                        }
                        let nn = T::of(n as f64);
                        for (r, row) in g.chunks(c).enumerate() {
                            for j in 0..c {
                                let gh = row[j] * gam[j];
                                gx[r * c + j] += inv_std[j] / nn * (nn * gh - sum_g[j] - xhat[r * c + j] * sum_gx[j]);
                            }
                        }
                    } else {
                        for (r, row) in g.chunks(c).enumerate() {
                            for j in 0..c {
                                gx[r * c + j] += row[j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = slot!(*a) {
                    for ((d, &x), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += x * m;
                    }
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                if let Some(ga) = slot!(*a) {
                    for s in offsets.windows(2) {
                        let (lo, hi) = (s[0], s[1]);
                        if hi > lo {
                            softmax_backward(&mut ga[lo..hi], &g[lo..hi], &out[lo..hi], hi - lo);
                        }
                    }
                }
            }
            Op::SegmentPool(w, rows, offsets) => {
                let d = nodes[rows.0].value.rows_cols().1;
                let h = val(*rows).to_vec();
                let wv = val(*w).to_vec();
                if let Some(gw) = slot!(*w) {
                    for (s, seg) in offsets.windows(2).enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for j in seg[0]..seg[1] {
                            gw[j] += gs.iter().zip(&h[j * d..(j + 1) * d]).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if let Some(gh) = slot!(*rows) {
                    for (s, seg) in offsets.windows(2).enumerate() {
                        let gs = &g[s * d..(s + 1) * d];
                        for j in seg[0]..seg[1] {
                            for (dst, &x) in gh[j * d..(j + 1) * d].iter_mut().zip(gs) {
                                *dst += wv[j] * x;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

fn softmax_backward<T: Scalar>(ga: &mut [T], g: &[T], y: &[T], n: usize) {
    for ((gar, gr), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
        for ((d, &x), &yy) in gar.iter_mut().zip(gr).zip(yr) {
            *d += yy * (x - dot);
        }
    }
}

fn check_offsets(offsets: &[usize], n: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n {
        return Err(Error::dim(format!("segment offsets must run from 0 to {n}")));
    }
    if offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::dim("segment offsets must be non-decreasing"));
    }
    Ok(())
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.oh * g.ow;
    let mut cols = vec![T::zero(); g.c * g.k * g.k * hw];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, gx: &mut [T]) {
    let hw = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            gx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
