//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Values
//! are stored flat and row-major; rank-1 tensors of length `n` act as `n×1`
//! columns wherever an operation needs two dimensions.
//!
//! Non-smooth points use fixed conventions: `abs` has subgradient 0 at 0, `sqrt`
//! and `l2_norm_rows` pass zero gradient through an exactly-zero output, and
//! `powf` has zero gradient at 0.

use std::sync::Arc;

use crate::error::{ensure, Error, Result};
use crate::linalg::gemm;

/// A dense array with optional accumulated gradient; the unit of parameter
/// storage outside a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        ensure!(
            expected == values.len(),
            "shape {shape:?} needs {expected} values, got {}",
            values.len()
        );
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        ensure!(
            g.len() == self.values.len(),
            "gradient of length {} for tensor of length {}",
            g.len(),
            self.values.len()
        );
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    MatMulConst { a: Var, b: Arc<[f64]>, n: usize },
    AddBias(Var, Var),
    MulCol(Var, Var),
    Conv1d { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Abs(Var),
    Powf(Var, f64),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    FrameExtract { x: Var, hop: usize },
    OverlapAdd { x: Var, hop: usize },
    L2NormRows(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (*n, 1),
        [r, c] => (*r, *c),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Copies a tensor into the graph as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), t.requires_grad)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(Op::Leaf, t.shape, t.values, false))
    }

    /// A differentiable input.
    pub fn variable(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.push(Op::Leaf, t.shape, t.values, true))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = self.node(v);
        assert_eq!(n.value.len(), 1, "node {} is not a scalar", v.0);
        n.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if the node was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    fn elementwise_pair(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.node(a).value.len(), self.node(b).value.len());
        ensure!(
            la == lb || lb == 1,
            "{what}: shapes {:?} and {:?} are incompatible",
            self.node(a).shape,
            self.node(b).shape
        );
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let va = &self.node(a).value;
        let vb = &self.node(b).value;
        let value: Vec<f64> = if vb.len() == 1 {
            let s = vb[0];
            va.iter().map(|x| f(*x, s)).collect()
        } else {
            va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect()
        };
        let shape = self.node(a).shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(op, shape, value, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.node(a).value.iter().map(|x| f(*x)).collect();
        let shape = self.node(a).shape.clone();
        let rg = self.node(a).requires_grad;
        self.push(op, shape, value, rg)
    }

    /// `a + b`; `b` may be a single element broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "add")?;
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "sub")?;
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "mul")?;
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise_pair(a, b, "div")?;
        ensure!(
            self.node(b).value.iter().all(|&v| v != 0.0),
            "div: division by zero"
        );
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::MulScalar(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Matrix product of `a` (m×k) and `b` (k×n).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows_cols(&self.node(a).shape);
        let (k2, n) = rows_cols(&self.node(b).shape);
        ensure!(
            k == k2,
            "matmul: inner dimensions differ ({:?} · {:?})",
            self.node(a).shape,
            self.node(b).shape
        );
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, &self.node(a).value, false, &self.node(b).value, false, &mut value, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], value, rg))
    }

    /// Product of `a` (m×k) with a fixed, shared k×n matrix that takes no gradient.
    ///
    /// Used for transform bases, which are large and identical across graphs.
    pub fn matmul_const(&mut self, a: Var, b: Arc<[f64]>, k: usize, n: usize) -> Result<Var> {
        let (m, ka) = rows_cols(&self.node(a).shape);
        ensure!(
            ka == k && b.len() == k * n,
            "matmul_const: {:?} · [{k}, {n}] (buffer of {})",
            self.node(a).shape,
            b.len()
        );
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, &self.node(a).value, false, &b, false, &mut value, false);
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::MatMulConst { a, b, n }, vec![m, n], value, rg))
    }

    /// Adds a length-`c` bias to every row of an r×c matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        ensure!(
            self.node(bias).value.len() == c,
            "add_bias: bias of length {} for {c} columns",
            self.node(bias).value.len()
        );
        let b = &self.node(bias).value;
        let mut value = self.node(x).value.clone();
        for row in value.chunks_mut(c.max(1)).take(r) {
            row.iter_mut().zip(b).for_each(|(v, b)| *v += b);
        }
        let shape = self.node(x).shape.clone();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), shape, value, rg))
    }

    /// `x·w + b` for x (r×i), w (i×o), b (o).
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    /// Scales row `r` of an r×c matrix by `s[r]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        ensure!(
            self.node(s).value.len() == r,
            "mul_col: {} scales for {r} rows",
            self.node(s).value.len()
        );
        let sv = &self.node(s).value;
        let mut value = self.node(x).value.clone();
        for (row, s) in value.chunks_mut(c.max(1)).zip(sv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let shape = self.node(x).shape.clone();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Op::MulCol(x, s), shape, value, rg))
    }

    /// Stride-1 "same" convolution along the rows of x (T×cin) with an odd-sized
    /// kernel w (K×cin×cout) and optional bias (cout).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (t, cin) = rows_cols(&self.node(x).shape);
        let wshape = self.node(w).shape.clone();
        ensure!(
            wshape.len() == 3 && wshape[1] == cin,
            "conv1d: kernel shape {wshape:?} does not match {cin} input channels"
        );
        let (kernel, cout) = (wshape[0], wshape[2]);
        ensure!(kernel % 2 == 1, "conv1d: kernel size must be odd, got {kernel}");
        if let Some(b) = b {
            ensure!(
                self.node(b).value.len() == cout,
                "conv1d: bias of length {} for {cout} output channels",
                self.node(b).value.len()
            );
        }
        let mut value = vec![0.0; t * cout];
        let xv = &self.node(x).value;
        let wv = &self.node(w).value;
        for j in 0..kernel {
            if let Some((dst, src, n)) = conv_tap(t, kernel, j) {
                gemm(
                    n,
                    cin,
                    cout,
                    &xv[src * cin..(src + n) * cin],
                    false,
                    &wv[j * cin * cout..(j + 1) * cin * cout],
                    false,
                    &mut value[dst * cout..(dst + n) * cout],
                    true,
                );
            }
        }
        if let Some(b) = b {
            let bv = &self.node(b).value;
            for row in value.chunks_mut(cout) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        let rg = self.rg(&parents);
        Ok(self.push(Op::Conv1d { x, w, b }, vec![t, cout], value, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.node(a).value.iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.node(a).value.iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    /// `x^p` for non-negative `x`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        if let Some(bad) = self.node(a).value.iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("powf of negative value {bad}")));
        }
        Ok(self.unary(a, Op::Powf(a, p), |x| x.powf(p)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.node(a).value.iter().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::Sum(a), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.node(a).value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.node(a).requires_grad;
        self.push(Op::Mean(a), vec![1], vec![s], rg)
    }

    /// Concatenates along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat: no inputs");
        ensure!(axis <= 1, "concat: axis must be 0 or 1");
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| rows_cols(&self.node(*p).shape)).collect();
        let (rows0, cols0) = dims[0];
        let (shape, value) = if axis == 0 {
            ensure!(
                dims.iter().all(|d| d.1 == cols0),
                "concat: column counts differ: {dims:?}"
            );
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut value = Vec::with_capacity(rows * cols0);
            for p in parts {
                value.extend_from_slice(&self.node(*p).value);
            }
            let shape = if self.node(parts[0]).shape.len() == 1 {
                vec![rows]
            } else {
                vec![rows, cols0]
            };
            (shape, value)
        } else {
            ensure!(
                dims.iter().all(|d| d.0 == rows0),
                "concat: row counts differ: {dims:?}"
            );
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut value = Vec::with_capacity(rows0 * cols);
            for r in 0..rows0 {
                for (p, (_, c)) in parts.iter().zip(&dims) {
                    value.extend_from_slice(&self.node(*p).value[r * c..(r + 1) * c]);
                }
            }
            (vec![rows0, cols], value)
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            shape,
            value,
            rg,
        ))
    }

    /// Rows `start..end` (elements, for rank-1 inputs).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        ensure!(start < end && end <= r, "slice_rows: {start}..{end} out of 0..{r}");
        let value = self.node(x).value[start * c..end * c].to_vec();
        let shape = if self.node(x).shape.len() == 1 {
            vec![end - start]
        } else {
            vec![end - start, c]
        };
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceRows { x, start }, shape, value, rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = rows_cols(&self.node(x).shape);
        ensure!(start < end && end <= c, "slice_cols: {start}..{end} out of 0..{c}");
        let w = end - start;
        let src = &self.node(x).value;
        let mut value = Vec::with_capacity(r * w);
        for row in 0..r {
            value.extend_from_slice(&src[row * c + start..row * c + end]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::SliceCols { x, start }, vec![r, w], value, rg))
    }

    /// Frames a rank-1 signal into a T×k matrix with frame `t` covering
    /// samples `t·hop .. t·hop + k`.
    pub fn frame_extract(&mut self, x: Var, k: usize, hop: usize) -> Result<Var> {
        let len = self.node(x).value.len();
        ensure!(k >= 1 && hop >= 1, "frame_extract: window and hop must be positive");
        ensure!(len >= k, "frame_extract: signal of {len} samples shorter than window {k}");
        let count = (len - k) / hop + 1;
        let src = &self.node(x).value;
        let mut value = Vec::with_capacity(count * k);
        for t in 0..count {
            value.extend_from_slice(&src[t * hop..t * hop + k]);
        }
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::FrameExtract { x, hop }, vec![count, k], value, rg))
    }

    /// Sums the rows of a T×k matrix at offsets `t·hop` into a rank-1 signal.
    pub fn overlap_add(&mut self, frames: Var, hop: usize) -> Result<Var> {
        let (t, k) = rows_cols(&self.node(frames).shape);
        ensure!(hop >= 1 && t >= 1, "overlap_add: need at least one frame and a positive hop");
        let value = crate::dsp::overlap_add(&self.node(frames).value, k, hop);
        let len = value.len();
        let rg = self.node(frames).requires_grad;
        Ok(self.push(Op::OverlapAdd { x: frames, hop }, vec![len], value, rg))
    }

    /// Per-row Euclidean norm `sqrt(Σ x² + eps)`, returned as a rank-1 tensor.
    pub fn l2_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        ensure!(eps >= 0.0, "l2_norm_rows: eps must be non-negative");
        let (r, c) = rows_cols(&self.node(x).shape);
        let value: Vec<f64> = self.node(x)
            .value
            .chunks(c.max(1))
            .take(r)
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::L2NormRows(x), vec![r], value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        ensure!(
            n == self.node(x).value.len(),
            "reshape: {:?} → {shape:?} changes the element count",
            self.node(x).shape
        );
        let value = self.node(x).value.clone();
        let rg = self.node(x).requires_grad;
        Ok(self.push(Op::Reshape(x), shape, value, rg))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every reachable
    /// node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.node(loss).value.len() == 1,
            "backward: loss must be a scalar, got shape {:?}",
            self.node(loss).shape
        );
        if self.backward_done {
            return Err(Error::InvalidState(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(nodes, grads, node, &g);
            grads[i] = Some(g);
        }
        Ok(())
    }
}

/// Row ranges for kernel tap `j` of a same-padded convolution:
/// (first output row, first input row, row count).
fn conv_tap(t: usize, kernel: usize, j: usize) -> Option<(usize, usize, usize)> {
    let pad = kernel / 2;
    // input row = output row + j − pad
    let (dst, src) = if j >= pad { (0, j - pad) } else { (pad - j, 0) };
    let n = t.saturating_sub(dst.max(src));
    (n > 0).then_some((dst, src, n))
}

fn accumulate<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

/// Gradient of an elementwise-broadcast operand: full-size or summed to one element.
fn add_broadcast(target: &mut [f64], contrib: impl Iterator<Item = f64>) {
    if target.len() == 1 {
        target[0] += contrib.sum::<f64>();
    } else {
        target.iter_mut().zip(contrib).for_each(|(t, c)| *t += c);
    }
}

fn bval(nodes: &[Node], b: Var, i: usize) -> f64 {
    let v = &nodes[b.0].value;
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn unary_grad(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    g: &[f64],
    f: impl Fn(usize) -> f64,
) {
    if let Some(ga) = accumulate(nodes, grads, a) {
        ga.iter_mut().zip(g).enumerate().for_each(|(i, (t, g))| *t += g * f(i));
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            unary_grad(nodes, grads, *a, g, |_| 1.0);
            if let Some(gb) = accumulate(nodes, grads, *b) {
                add_broadcast(gb, g.iter().copied());
            }
        }
        Op::Sub(a, b) => {
            unary_grad(nodes, grads, *a, g, |_| 1.0);
            if let Some(gb) = accumulate(nodes, grads, *b) {
                add_broadcast(gb, g.iter().map(|g| -g));
            }
        }
        Op::Mul(a, b) => {
            unary_grad(nodes, grads, *a, g, |i| bval(nodes, *b, i));
            let av = &nodes[a.0].value;
            if let Some(gb) = accumulate(nodes, grads, *b) {
                add_broadcast(gb, g.iter().zip(av).map(|(g, a)| g * a));
            }
        }
        Op::Div(a, b) => {
            unary_grad(nodes, grads, *a, g, |i| 1.0 / bval(nodes, *b, i));
            let av = &nodes[a.0].value;
            let contrib: Vec<f64> = g
                .iter()
                .zip(av)
                .enumerate()
                .map(|(i, (g, a))| {
                    let bv = bval(nodes, *b, i);
                    -g * a / (bv * bv)
                })
                .collect();
            if let Some(gb) = accumulate(nodes, grads, *b) {
                add_broadcast(gb, contrib.into_iter());
            }
        }
        Op::AddScalar(a) => unary_grad(nodes, grads, *a, g, |_| 1.0),
        Op::MulScalar(a, s) => unary_grad(nodes, grads, *a, g, |_| *s),
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(&nodes[a.0].shape);
            let (_, n) = rows_cols(&nodes[b.0].shape);
            let bv = &nodes[b.0].value;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                // dA = G · Bᵀ
                gemm(m, n, k, g, false, bv, true, ga, true);
            }
            let av = &nodes[a.0].value;
            if let Some(gb) = accumulate(nodes, grads, *b) {
                // dB = Aᵀ · G
                gemm(k, m, n, av, true, g, false, gb, true);
            }
        }
        Op::MatMulConst { a, b, n } => {
            let (m, k) = rows_cols(&nodes[a.0].shape);
            if let Some(ga) = accumulate(nodes, grads, *a) {
                gemm(m, *n, k, g, false, b, true, ga, true);
            }
        }
        Op::AddBias(x, b) => {
            unary_grad(nodes, grads, *x, g, |_| 1.0);
            let c = nodes[b.0].value.len();
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for row in g.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(t, g)| *t += g);
                }
            }
        }
        Op::MulCol(x, s) => {
            let (_, c) = rows_cols(&nodes[x.0].shape);
            let sv = &nodes[s.0].value;
            unary_grad(nodes, grads, *x, g, |i| sv[i / c]);
            let xv = &nodes[x.0].value;
            if let Some(gs) = accumulate(nodes, grads, *s) {
                for (r, t) in gs.iter_mut().enumerate() {
                    *t += (0..c).map(|j| g[r * c + j] * xv[r * c + j]).sum::<f64>();
                }
            }
        }
        Op::Conv1d { x, w, b } => {
            let (t, cin) = rows_cols(&nodes[x.0].shape);
            let wshape = &nodes[w.0].shape;
            let (kernel, cout) = (wshape[0], wshape[2]);
            let wv = &nodes[w.0].value;
            if let Some(gx) = accumulate(nodes, grads, *x) {
                for j in 0..kernel {
                    if let Some((dst, src, n)) = conv_tap(t, kernel, j) {
                        gemm(
                            n,
                            cout,
                            cin,
                            &g[dst * cout..(dst + n) * cout],
                            false,
                            &wv[j * cin * cout..(j + 1) * cin * cout],
                            true,
                            &mut gx[src * cin..(src + n) * cin],
                            true,
                        );
                    }
                }
            }
            let xv = &nodes[x.0].value;
            if let Some(gw) = accumulate(nodes, grads, *w) {
                for j in 0..kernel {
                    if let Some((dst, src, n)) = conv_tap(t, kernel, j) {
                        gemm(
                            cin,
                            n,
                            cout,
                            &xv[src * cin..(src + n) * cin],
                            true,
                            &g[dst * cout..(dst + n) * cout],
                            false,
                            &mut gw[j * cin * cout..(j + 1) * cin * cout],
                            true,
                        );
                    }
                }
            }
            if let Some(b) = b {
                if let Some(gb) = accumulate(nodes, grads, *b) {
                    for row in g.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(t, g)| *t += g);
                    }
                }
            }
        }
        Op::Relu(a) => {
            let av = &nodes[a.0].value;
            unary_grad(nodes, grads, *a, g, |i| if av[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::LeakyRelu(a, slope) => {
            let av = &nodes[a.0].value;
            unary_grad(nodes, grads, *a, g, |i| if av[i] > 0.0 { 1.0 } else { *slope });
        }
        Op::Tanh(a) => unary_grad(nodes, grads, *a, g, |i| 1.0 - y[i] * y[i]),
        Op::Exp(a) => unary_grad(nodes, grads, *a, g, |i| y[i]),
        Op::Log(a) => {
            let av = &nodes[a.0].value;
            unary_grad(nodes, grads, *a, g, |i| 1.0 / av[i]);
        }
        Op::Sqrt(a) => unary_grad(nodes, grads, *a, g, |i| {
            if y[i] > 0.0 {
                0.5 / y[i]
            } else {
                0.0
            }
        }),
        Op::Abs(a) => {
            let av = &nodes[a.0].value;
            unary_grad(nodes, grads, *a, g, |i| {
                if av[i] > 0.0 {
                    1.0
                } else if av[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Powf(a, p) => {
            let av = &nodes[a.0].value;
            unary_grad(nodes, grads, *a, g, |i| {
                if av[i] > 0.0 {
                    p * av[i].powf(p - 1.0)
                } else {
                    0.0
                }
            });
        }
        Op::Sum(a) => {
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().for_each(|t| *t += g[0]);
            }
        }
        Op::Mean(a) => {
            let n = nodes[a.0].value.len().max(1) as f64;
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().for_each(|t| *t += g[0] / n);
            }
        }
        Op::Concat { parts, axis } => {
            if *axis == 0 {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(gp) = accumulate(nodes, grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(t, g)| *t += g);
                    }
                    offset += n;
                }
            } else {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for p in parts {
                    let (_, c) = rows_cols(&nodes[p.0].shape);
                    if let Some(gp) = accumulate(nodes, grads, *p) {
                        for r in 0..rows {
                            gp[r * c..(r + 1) * c]
                                .iter_mut()
                                .zip(&g[r * total + offset..r * total + offset + c])
                                .for_each(|(t, g)| *t += g);
                        }
                    }
                    offset += c;
                }
            }
        }
        Op::SliceRows { x, start } => {
            let (_, c) = rows_cols(&nodes[x.0].shape);
            if let Some(gx) = accumulate(nodes, grads, *x) {
                gx[start * c..start * c + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(t, g)| *t += g);
            }
        }
        Op::SliceCols { x, start } => {
            let (_, c) = rows_cols(&nodes[x.0].shape);
            let (rows, w) = rows_cols(&node.shape);
            if let Some(gx) = accumulate(nodes, grads, *x) {
                for r in 0..rows {
                    gx[r * c + start..r * c + start + w]
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(t, g)| *t += g);
                }
            }
        }
        Op::FrameExtract { x, hop } => {
            let (count, k) = rows_cols(&node.shape);
            if let Some(gx) = accumulate(nodes, grads, *x) {
                for t in 0..count {
                    gx[t * hop..t * hop + k]
                        .iter_mut()
                        .zip(&g[t * k..(t + 1) * k])
                        .for_each(|(a, g)| *a += g);
                }
            }
        }
        Op::OverlapAdd { x, hop } => {
            let (count, k) = rows_cols(&nodes[x.0].shape);
            if let Some(gx) = accumulate(nodes, grads, *x) {
                for t in 0..count {
                    gx[t * k..(t + 1) * k]
                        .iter_mut()
                        .zip(&g[t * hop..t * hop + k])
                        .for_each(|(a, g)| *a += g);
                }
            }
        }
        Op::L2NormRows(x) => {
            let (_, c) = rows_cols(&nodes[x.0].shape);
            let xv = &nodes[x.0].value;
            if let Some(gx) = accumulate(nodes, grads, *x) {
                for (i, t) in gx.iter_mut().enumerate() {
                    let norm = y[i / c];
                    if norm > 0.0 {
                        *t += g[i / c] * xv[i] / norm;
                    }
                }
            }
        }
        Op::Reshape(x) => unary_grad(nodes, grads, *x, g, |_| 1.0),
    }
}

/// Largest relative discrepancy between the analytic gradient of scalar `f` at
/// `x` and central differences with step `h`.
///
/// The relative error of coordinate `i` is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    ensure!(h > 0.0, "grad_check: step must be positive");
    let mut g = Graph::new();
    let xv = g.variable(x.shape().to_vec(), x.values().to_vec())?;
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(|v| v.to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.shape().to_vec(), values)?;
        let out = f(&mut g, v)?;
        Ok(g.scalar(out))
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.values().to_vec();
        plus[i] += h;
        let mut minus = x.values().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(x: &[f64], shape: Vec<usize>, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Vec<f64> {
        let mut g = Graph::new();
        let v = g.variable(shape, x.to_vec()).unwrap();
        let loss = f(&mut g, v).unwrap();
        g.backward(loss).unwrap();
        g.grad(v).map(<[f64]>::to_vec).unwrap_or_default()
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.mul_scalar(v, 3.5);
                let s = g.add_scalar(s, 2.0);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn abs_kink_probed_away_from_zero() {
        let x = Tensor::new(vec![3], vec![0.4, -0.9, 1.3]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.add_scalar(v, -0.1);
                let a = g.abs(s);
                let sq = g.square(a)?;
                let t = g.add(a, sq)?;
                Ok(g.sum(t))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn kinks_use_zero_subgradient() {
        let d = grads_of(&[0.0, 0.0], vec![2], |g, v| {
            let a = g.abs(v);
            Ok(g.sum(a))
        });
        assert_eq!(d, vec![0.0, 0.0]);
        let d = grads_of(&[0.0], vec![1], |g, v| {
            let r = g.sqrt(v)?;
            Ok(g.sum(r))
        });
        assert_eq!(d, vec![0.0]);
        let d = grads_of(&[0.0, 0.0], vec![1, 2], |g, v| {
            let n = g.l2_norm_rows(v, 1e-12)?;
            Ok(g.sum(n))
        });
        assert!(d.iter().all(|v| v.is_finite() && v.abs() < 1e-6));
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        let x = [0.5, -2.0, 3.0];
        let twice = grads_of(&x, vec![3], |g, v| {
            let p = g.mul(v, v)?;
            let s = g.add(p, v)?;
            Ok(g.sum(s))
        });
        let once = grads_of(&x, vec![3], |g, v| {
            let p = g.square(v)?;
            let s = g.add(p, v)?;
            Ok(g.sum(s))
        });
        assert_eq!(twice, once);
        assert_eq!(twice, vec![2.0, -3.0, 7.0]);
    }

    #[test]
    fn broadcast_operand_gradient_is_summed() {
        let mut g = Graph::new();
        let a = g.variable(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = g.variable(vec![1], vec![2.0]).unwrap();
        let p = g.mul(a, s).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap(), &[6.0]);
        assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_matches_hand_values() {
        let mut g = Graph::new();
        let a = g.variable(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = g.variable(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[17.0, 39.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        // dL/dA = 1·bᵀ per row, dL/dB = column sums of A
        assert_eq!(g.grad(a).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn conv1d_matches_direct_loop() {
        let (t, cin, cout, k) = (5, 2, 3, 3);
        let x: Vec<f64> = (0..t * cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..k * cin * cout).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut g = Graph::new();
        let xv = g.constant(vec![t, cin], x.clone()).unwrap();
        let wv = g.constant(vec![k, cin, cout], w.clone()).unwrap();
        let y = g.conv1d(xv, wv, None).unwrap();
        for r in 0..t {
            for o in 0..cout {
                let mut acc = 0.0;
                for j in 0..k {
                    let src = r as isize + j as isize - (k / 2) as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for i in 0..cin {
                        acc += x[src as usize * cin + i] * w[(j * cin + i) * cout + o];
                    }
                }
                assert!((g.value(y)[r * cout + o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn framing_and_overlap_add_are_adjoint() {
        let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut g = Graph::new();
        let xv = g.constant(vec![12], x.clone()).unwrap();
        let f = g.frame_extract(xv, 4, 2).unwrap();
        let frames = g.shape(f)[0];
        let y: Vec<f64> = (0..frames * 4).map(|i| (i as f64 * 0.7).cos()).collect();
        let yv = g.constant(vec![frames, 4], y.clone()).unwrap();
        let o = g.overlap_add(yv, 2).unwrap();
        let lhs: f64 = g.value(f).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(g.value(o)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let v = g.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(v), Err(Error::InvalidArgument(_))));
        let l = g.sum(v);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::InvalidState(_))));
        g.reset_grads();
        g.backward(l).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let v = g.variable(vec![2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(g.log(v), Err(Error::Domain(_))));
        assert!(matches!(g.sqrt(v), Err(Error::Domain(_))));
        assert!(matches!(g.powf(v, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn disconnected_inputs_have_no_gradient() {
        let mut g = Graph::new();
        let a = g.variable(vec![1], vec![1.0]).unwrap();
        let b = g.variable(vec![1], vec![2.0]).unwrap();
        let c = g.constant(vec![1], vec![3.0]).unwrap();
        let l = g.mul(a, c).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[3.0]);
        assert!(g.grad(b).is_none());
        assert!(g.grad(c).is_none());

        let mut g = Graph::new();
        let k = g.constant(vec![1], vec![1.0]).unwrap();
        let l = g.exp(k);
        g.backward(l).unwrap();
        assert!(g.grad(k).is_none());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            grads_of(&[0.3, -0.2, 0.9, 1.4, -0.6, 0.1], vec![2, 3], |g, v| {
                let t = g.tanh(v);
                let e = g.exp(t);
                let n = g.l2_norm_rows(e, 1e-12)?;
                let m = g.mean(n);
                g.powf(m, 1.5)
            })
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
