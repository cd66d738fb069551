//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every value is an n-dimensional array of `f64` stored row-major. A
//! [`Tape`] records one forward graph; [`Tape::backward`] replays the ops in
//! exact reverse order, accumulating adjoints additively so fan-out needs no
//! special casing. Two gradient-shaping identities are first-class ops:
//! [`Tape::grad_reverse`] (identity forward, `-lambda` times the adjoint on
//! the way back) and [`Tape::stop_gradient`] (identity forward, zero adjoint
//! back). The harness in [`gradcheck`] knows how to linearize both so even
//! their declared Jacobians can be verified numerically.
//!
//! Ops validate shapes up front and check outputs for NaN/Inf, so a graph
//! that builds is a graph whose forward values are finite.

pub mod gradcheck;

use thiserror::Error;

/// Errors raised while building or differentiating a graph.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: invalid argument: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax row {row} has no unmasked entries")]
    DegenerateRow { row: usize },
    #[error("gradient check aborted: {0}")]
    GradCheckAborted(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A plain value holder: shape, row-major data, and an optional gradient
/// written back by the training loop after [`Tape::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {:?} does not cover {} elements",
            shape,
            data.len()
        );
        Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(&[1, 1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, g: Option<Vec<f64>>) {
        if let Some(ref g) = g {
            assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        }
        self.grad = g;
    }

    /// Adds `g` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let slot = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (dst, src) in slot.iter_mut().zip(g) {
            *dst += src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Op records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    AddScalar { x: usize },
    AddRow { x: usize, row: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Ln { x: usize },
    Sqrt { x: usize },
    Abs { x: usize },
    Clamp { x: usize, lo: f64, hi: f64 },
    SumAll { x: usize },
    MeanAll { x: usize },
    MeanRows { x: usize },
    SoftmaxRows { x: usize, mask: Option<Vec<bool>> },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    L2NormalizeRows { x: usize, eps: f64 },
    Conv1d { x: usize, kernel: usize },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatCols { xs: Vec<usize> },
    ConcatRows { xs: Vec<usize> },
    GradReverse { x: usize, lambda: f64 },
    StopGradient,
    CrossEntropyLogits { logits: usize, target: usize },
}

/// Finite-difference evaluation mode. `Capture` records the input of every
/// gradient-shaping op during a baseline pass; `Replay` substitutes the
/// recorded baselines so the forward value moves with the *declared* Jacobian
/// (`-lambda` through grad_reverse, zero through stop_gradient), which is what
/// makes those ops numerically checkable. See [`gradcheck`].
#[derive(Debug, Clone)]
pub(crate) enum FdMode {
    Capture { saved: Vec<Vec<f64>> },
    Replay { saved: std::rc::Rc<Vec<Vec<f64>>>, cursor: usize },
}

/// One recorded forward graph.
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, NodeId)>,
    fd: Option<FdMode>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            fd: None,
        }
    }

    pub(crate) fn with_fd(mode: FdMode) -> Self {
        let mut t = Tape::new();
        t.fd = Some(mode);
        t
    }

    pub(crate) fn take_fd_trace(&mut self) -> Vec<Vec<f64>> {
        match self.fd.take() {
            Some(FdMode::Capture { saved }) => saved,
            _ => Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id.0]
    }

    /// Gradient of the last [`backward`](Self::backward) target w.r.t. `id`,
    /// if any adjoint reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Named parameter leaves registered via [`param`](Self::param), in
    /// registration order.
    pub fn param_nodes(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match *self.shapes[id.0] {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::ShapeMismatch {
                op,
                detail: format!("expected a 2-d tensor, got shape {s:?}"),
            }),
        }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs: bool, name: &'static str) -> Result<NodeId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        self.shapes.push(shape);
        self.values.push(data);
        self.needs_grad.push(needs);
        self.ops.push(op);
        self.grads.push(None);
        Ok(NodeId(self.values.len() - 1))
    }

    // -- leaves --------------------------------------------------------------

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Result<NodeId> {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone(), t.requires_grad, "leaf")
    }

    /// Leaf that participates in gradient checks, checkpoints, and optimizer
    /// steps: registered by name so callers can pair gradients with the
    /// owning parameter after backward.
    pub fn param(&mut self, name: impl Into<String>, t: &Tensor) -> Result<NodeId> {
        let id = self.leaf(t)?;
        self.params.push((name.into(), id));
        Ok(id)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        self.push(Op::Leaf, shape.to_vec(), data, false, "constant")
    }

    pub fn scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(&[1, 1], vec![v])
    }

    // -- ops -----------------------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions {ka} vs {kb}"),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.values[a.0];
            let bv = &self.values[b.0];
            for i in 0..m {
                let arow = &av[i * ka..(i + 1) * ka];
                let orow = &mut out[i * n..(i + 1) * n];
                for (p, &aval) in arow.iter().enumerate() {
                    if aval == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    for (o, &bval) in orow.iter_mut().zip(brow) {
                        *o += aval * bval;
                    }
                }
            }
        }
        let needs = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(Op::Matmul { a: a.0, b: b.0 }, vec![m, n], out, needs, "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "transpose")?;
        let v = &self.values[x.0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let needs = self.needs_grad[x.0];
        self.push(Op::Transpose { x: x.0 }, vec![n, m], out, needs, "transpose")
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(TensorError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shapes[a.0], self.shapes[b.0]),
            });
        }
        let out: Vec<f64> =
            self.values[a.0].iter().zip(&self.values[b.0]).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shapes[a.0].clone();
        let needs = self.needs_grad[a.0] || self.needs_grad[b.0];
        self.push(op, shape, out, needs, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_elementwise(a, b, "div", |x, y| x / y, Op::Div { a: a.0, b: b.0 })
    }

    fn unary(
        &mut self,
        x: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let out: Vec<f64> = self.values[x.0].iter().map(|&v| f(v)).collect();
        let shape = self.shapes[x.0].clone();
        let needs = self.needs_grad[x.0];
        self.push(op, shape, out, needs, name)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, "scale", |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.unary(x, "add_scalar", |v| v + c, Op::AddScalar { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(
            x,
            "sigmoid",
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid { x: x.0 },
        )
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "ln", f64::ln, Op::Ln { x: x.0 })
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "sqrt", f64::sqrt, Op::Sqrt { x: x.0 })
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, "abs", f64::abs, Op::Abs { x: x.0 })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(TensorError::InvalidArg {
                op: "clamp",
                detail: format!("lo {lo} must be below hi {hi}"),
            });
        }
        self.unary(x, "clamp", |v| v.clamp(lo, hi), Op::Clamp { x: x.0, lo, hi })
    }

    /// Row vector (`1 x n`) added to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "add_row")?;
        let (rr, rc) = self.dims2(row, "add_row")?;
        if rr != 1 || rc != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                detail: format!("row {rr}x{rc} against matrix {m}x{n}"),
            });
        }
        let rv = self.values[row.0].clone();
        let out: Vec<f64> = self.values[x.0]
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(&rv).map(|(&a, &b)| a + b).collect::<Vec<_>>())
            .collect();
        let needs = self.needs_grad[x.0] || self.needs_grad[row.0];
        self.push(Op::AddRow { x: x.0, row: row.0 }, vec![m, n], out, needs, "add_row")
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.values[x.0].iter().sum();
        let needs = self.needs_grad[x.0];
        self.push(Op::SumAll { x: x.0 }, vec![1, 1], vec![s], needs, "sum_all")
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values[x.0].len();
        if n == 0 {
            return Err(TensorError::InvalidArg { op: "mean_all", detail: "empty tensor".into() });
        }
        let s: f64 = self.values[x.0].iter().sum::<f64>() / n as f64;
        let needs = self.needs_grad[x.0];
        self.push(Op::MeanAll { x: x.0 }, vec![1, 1], vec![s], needs, "mean_all")
    }

    /// Column means: `m x n` down to `1 x n`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "mean_rows")?;
        if m == 0 {
            return Err(TensorError::InvalidArg { op: "mean_rows", detail: "no rows".into() });
        }
        let v = &self.values[x.0];
        let mut out = vec![0.0; n];
        for row in v.chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let needs = self.needs_grad[x.0];
        self.push(Op::MeanRows { x: x.0 }, vec![1, n], out, needs, "mean_rows")
    }

    /// Row-wise softmax. `mask`, when given, marks entries that participate;
    /// masked-out entries are exactly zero in the output and receive no
    /// gradient. A row with every entry masked out is an error.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    detail: format!("mask length {} vs {} entries", mk.len(), m * n),
                });
            }
        }
        let v = &self.values[x.0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let keep = |j: usize| mask.map_or(true, |mk| mk[i * n + j]);
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if keep(j) && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        let needs = self.needs_grad[x.0];
        self.push(
            Op::SoftmaxRows { x: x.0, mask: mask.map(|m| m.to_vec()) },
            vec![m, n],
            out,
            needs,
            "softmax_rows",
        )
    }

    /// Per-row normalization to zero mean / unit variance (biased variance),
    /// then elementwise `gain` and `bias` (both `1 x n`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        let (gr, gc) = self.dims2(gain, "layer_norm")?;
        let (br, bc) = self.dims2(bias, "layer_norm")?;
        if gr != 1 || gc != n || br != 1 || bc != n {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gain {gr}x{gc} / bias {br}x{bc} against {m}x{n}"),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArg {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let v = &self.values[x.0];
            let g = &self.values[gain.0];
            let b = &self.values[bias.0];
            for i in 0..m {
                let row = &v[i * n..(i + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mean) * inv * g[j] + b[j];
                }
            }
        }
        let needs = self.needs_grad[x.0] || self.needs_grad[gain.0] || self.needs_grad[bias.0];
        self.push(
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
            vec![m, n],
            out,
            needs,
            "layer_norm",
        )
    }

    /// Scales each row to unit Euclidean length; `eps` keeps zero rows finite
    /// (they stay zero).
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "l2_normalize_rows")?;
        if !(eps > 0.0) {
            return Err(TensorError::InvalidArg {
                op: "l2_normalize_rows",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let v = &self.values[x.0];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let ss: f64 = row.iter().map(|&x| x * x).sum();
            let inv = 1.0 / (ss + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = row[j] * inv;
            }
        }
        let needs = self.needs_grad[x.0];
        self.push(Op::L2NormalizeRows { x: x.0, eps }, vec![m, n], out, needs, "l2_normalize_rows")
    }

    /// 1-d convolution over rows (frames). `x` is `t x d_in`, `kernel` is
    /// `k x d_in x d_out`, output is `t x d_out` under "same" padding: `k/2`
    /// zero rows on the left, `(k-1)/2` on the right, so an even kernel pads
    /// one extra on the left.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (t, d_in) = self.dims2(x, "conv1d")?;
        let kshape = self.shapes[kernel.0].clone();
        let [k, kd_in, d_out] = match *kshape.as_slice() {
            [a, b, c] => [a, b, c],
            ref s => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    detail: format!("kernel must be 3-d, got {s:?}"),
                })
            }
        };
        if kd_in != d_in {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!("kernel input width {kd_in} vs data width {d_in}"),
            });
        }
        if t == 0 || k == 0 || k > t + k - 1 {
            return Err(TensorError::InvalidArg {
                op: "conv1d",
                detail: format!("kernel of length {k} cannot slide over {t} padded frames"),
            });
        }
        let pad_left = k / 2;
        let mut out = vec![0.0; t * d_out];
        {
            let xv = &self.values[x.0];
            let kv = &self.values[kernel.0];
            for ti in 0..t {
                let orow = &mut out[ti * d_out..(ti + 1) * d_out];
                for j in 0..k {
                    let src = ti as isize + j as isize - pad_left as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xv[src as usize * d_in..(src as usize + 1) * d_in];
                    let kslab = &kv[j * d_in * d_out..(j + 1) * d_in * d_out];
                    for (i, &xval) in xrow.iter().enumerate() {
                        if xval == 0.0 {
                            continue;
                        }
                        let krow = &kslab[i * d_out..(i + 1) * d_out];
                        for (o, &kval) in orow.iter_mut().zip(krow) {
                            *o += xval * kval;
                        }
                    }
                }
            }
        }
        let needs = self.needs_grad[x.0] || self.needs_grad[kernel.0];
        self.push(Op::Conv1d { x: x.0, kernel: kernel.0 }, vec![t, d_out], out, needs, "conv1d")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(TensorError::InvalidArg {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of 0..{m}", start + len),
            });
        }
        let out = self.values[x.0][start * n..(start + len) * n].to_vec();
        let needs = self.needs_grad[x.0];
        self.push(Op::SliceRows { x: x.0, start }, vec![len, n], out, needs, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(TensorError::InvalidArg {
                op: "slice_cols",
                detail: format!("cols {start}..{} out of 0..{n}", start + len),
            });
        }
        let v = &self.values[x.0];
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        let needs = self.needs_grad[x.0];
        self.push(Op::SliceCols { x: x.0, start }, vec![m, len], out, needs, "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_cols", detail: "no inputs".into() });
        }
        let (m, _) = self.dims2(xs[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &x in xs {
            let (mi, ni) = self.dims2(x, "concat_cols")?;
            if mi != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {m} vs {mi}"),
                });
            }
            widths.push(ni);
            total += ni;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.values[x.0][i * w..(i + 1) * w]);
            }
        }
        let needs = xs.iter().any(|&x| self.needs_grad[x.0]);
        self.push(
            Op::ConcatCols { xs: xs.iter().map(|x| x.0).collect() },
            vec![m, total],
            out,
            needs,
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(TensorError::InvalidArg { op: "concat_rows", detail: "no inputs".into() });
        }
        let (_, n) = self.dims2(xs[0], "concat_rows")?;
        let mut rows = 0;
        for &x in xs {
            let (mi, ni) = self.dims2(x, "concat_rows")?;
            if ni != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("col counts {n} vs {ni}"),
                });
            }
            rows += mi;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &x in xs {
            out.extend_from_slice(&self.values[x.0]);
        }
        let needs = xs.iter().any(|&x| self.needs_grad[x.0]);
        self.push(
            Op::ConcatRows { xs: xs.iter().map(|x| x.0).collect() },
            vec![rows, n],
            out,
            needs,
            "concat_rows",
        )
    }

    /// Identity forward; multiplies the adjoint by `-lambda` on the way back.
    pub fn grad_reverse(&mut self, x: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda >= 0.0) {
            return Err(TensorError::InvalidArg {
                op: "grad_reverse",
                detail: format!("lambda must be non-negative, got {lambda}"),
            });
        }
        let shape = self.shapes[x.0].clone();
        let data = match &mut self.fd {
            Some(FdMode::Capture { saved }) => {
                saved.push(self.values[x.0].clone());
                self.values[x.0].clone()
            }
            Some(FdMode::Replay { saved, cursor }) => {
                let base = &saved[*cursor];
                *cursor += 1;
                // Move the output along the declared Jacobian (-lambda) so a
                // finite-difference probe sees what backward claims.
                self.values[x.0]
                    .iter()
                    .zip(base)
                    .map(|(&x, &b)| b - lambda * (x - b))
                    .collect()
            }
            None => self.values[x.0].clone(),
        };
        let needs = self.needs_grad[x.0];
        self.push(Op::GradReverse { x: x.0, lambda }, shape, data, needs, "grad_reverse")
    }

    /// Identity forward; the adjoint stops here.
    pub fn stop_gradient(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.shapes[x.0].clone();
        let data = match &mut self.fd {
            Some(FdMode::Capture { saved }) => {
                saved.push(self.values[x.0].clone());
                self.values[x.0].clone()
            }
            Some(FdMode::Replay { saved, cursor }) => {
                let base = saved[*cursor].clone();
                *cursor += 1;
                base
            }
            None => self.values[x.0].clone(),
        };
        self.push(Op::StopGradient, shape, data, false, "stop_gradient")
    }

    /// Softmax cross-entropy of a `1 x k` logit row against a class index,
    /// fused for numerical stability.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let (r, k) = self.dims2(logits, "cross_entropy_logits")?;
        if r != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_logits",
                detail: format!("expected a 1-row logit vector, got {r} rows"),
            });
        }
        if target >= k {
            return Err(TensorError::InvalidArg {
                op: "cross_entropy_logits",
                detail: format!("target {target} out of {k} classes"),
            });
        }
        let z = &self.values[logits.0];
        let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + z.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let loss = lse - z[target];
        let needs = self.needs_grad[logits.0];
        self.push(
            Op::CrossEntropyLogits { logits: logits.0, target },
            vec![1, 1],
            vec![loss],
            needs,
            "cross_entropy_logits",
        )
    }

    // -- backward ------------------------------------------------------------

    /// Accumulates gradients of a scalar `loss` into every reachable node
    /// that requires them. Adjoints add across fan-out; nothing flows into
    /// constants or through [`stop_gradient`](Self::stop_gradient).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(TensorError::InvalidArg {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shapes[loss.0]),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for id in (0..self.ops.len()).rev() {
            if !self.needs_grad[id] {
                continue;
            }
            let Some(g) = self.grads[id].take() else { continue };
            self.dispatch(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
        grads[idx].get_or_insert_with(|| vec![0.0; len])
    }

    fn dispatch(&mut self, id: usize, g: &[f64]) -> Result<()> {
        // Split borrows: values/shapes read-only, grads written.
        let op = self.ops[id].clone();
        let values = &self.values;
        let shapes = &self.shapes;
        let needs = &self.needs_grad;
        let grads = &mut self.grads;
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shapes[a][0], shapes[a][1]);
                let n = shapes[b][1];
                if needs[a] {
                    let bv = &values[b];
                    let da = Self::accum(grads, a, m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            darow[p] += acc;
                        }
                    }
                }
                if needs[b] {
                    let av = &values[a];
                    let db = Self::accum(grads, b, k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (p, &aval) in arow.iter().enumerate() {
                            if aval == 0.0 {
                                continue;
                            }
                            let dbrow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                dbrow[j] += aval * grow[j];
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if needs[x] {
                    let (m, n) = (shapes[x][0], shapes[x][1]);
                    let dx = Self::accum(grads, x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for (idx, sign) in [(a, 1.0), (b, 1.0)] {
                    if needs[idx] {
                        let d = Self::accum(grads, idx, g.len());
                        for (d, &gv) in d.iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                for (idx, sign) in [(a, 1.0), (b, -1.0)] {
                    if needs[idx] {
                        let d = Self::accum(grads, idx, g.len());
                        for (d, &gv) in d.iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if needs[a] {
                    let bv = &values[b];
                    let da = Self::accum(grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if needs[b] {
                    let av = &values[a];
                    let db = Self::accum(grads, b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div { a, b } => {
                if needs[a] {
                    let bv = &values[b];
                    let da = Self::accum(grads, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] / bv[i];
                    }
                }
                if needs[b] {
                    let av = &values[a];
                    let bv = &values[b];
                    let db = Self::accum(grads, b, g.len());
                    for i in 0..g.len() {
                        db[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Scale { x, c } => {
                if needs[x] {
                    let dx = Self::accum(grads, x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::AddScalar { x } => {
                if needs[x] {
                    let dx = Self::accum(grads, x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::AddRow { x, row } => {
                let n = shapes[row][1];
                if needs[x] {
                    let dx = Self::accum(grads, x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if needs[row] {
                    let dr = Self::accum(grads, row, n);
                    for chunk in g.chunks(n) {
                        for (d, &gv) in dr.iter_mut().zip(chunk) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if needs[x] {
                    let y = &values[id];
                    let dx = Self::accum(grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Tanh { x } => {
                if needs[x] {
                    let y = &values[id];
                    let dx = Self::accum(grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Ln { x } => {
                if needs[x] {
                    let xv = &values[x];
                    let dx = Self::accum(grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Sqrt { x } => {
                if needs[x] {
                    let y = &values[id];
                    let dx = Self::accum(grads, x, g.len());
                    for i in 0..g.len() {
                        // Subgradient 0 at the origin keeps zero-norm inputs
                        // from poisoning the rest of the graph with NaNs.
                        if y[i] > 0.0 {
                            dx[i] += g[i] / (2.0 * y[i]);
                        }
                    }
                }
            }
            Op::Abs { x } => {
                if needs[x] {
                    let xv = &values[x];
                    let dx = Self::accum(grads, x, g.len());
                    for i in 0..g.len() {
                        dx[i] += g[i] * if xv[i] > 0.0 { 1.0 } else if xv[i] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if needs[x] {
                    let xv = &values[x];
                    let dx = Self::accum(grads, x, g.len());
                    for i in 0..g.len() {
                        if xv[i] > lo && xv[i] < hi {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if needs[x] {
                    let len = values[x].len();
                    let dx = Self::accum(grads, x, len);
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { x } => {
                if needs[x] {
                    let len = values[x].len();
                    let dx = Self::accum(grads, x, len);
                    let gv = g[0] / len as f64;
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::MeanRows { x } => {
                if needs[x] {
                    let (m, n) = (shapes[x][0], shapes[x][1]);
                    let dx = Self::accum(grads, x, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] += g[j] / m as f64;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x, mask } => {
                if needs[x] {
                    let (m, n) = (shapes[x][0], shapes[x][1]);
                    let y = &values[id];
                    let dx = Self::accum(grads, x, m * n);
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            let keep = mask.as_ref().map_or(true, |mk| mk[i * n + j]);
                            if keep {
                                dx[i * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = (shapes[x][0], shapes[x][1]);
                let xv = &values[x];
                let gv = &values[gain];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    if needs[gain] || needs[x] {
                        // xh recomputed; cheaper than saving it per row.
                        if needs[gain] {
                            let dg = Self::accum(grads, gain, n);
                            for j in 0..n {
                                dg[j] += gr[j] * (row[j] - mean) * inv;
                            }
                        }
                        if needs[x] {
                            let mut mean_q = 0.0;
                            let mut mean_qx = 0.0;
                            for j in 0..n {
                                let q = gr[j] * gv[j];
                                let xh = (row[j] - mean) * inv;
                                mean_q += q;
                                mean_qx += q * xh;
                            }
                            mean_q /= n as f64;
                            mean_qx /= n as f64;
                            let dx = Self::accum(grads, x, m * n);
                            for j in 0..n {
                                let q = gr[j] * gv[j];
                                let xh = (row[j] - mean) * inv;
                                dx[i * n + j] += (q - mean_q - xh * mean_qx) * inv;
                            }
                        }
                    }
                    if needs[bias] {
                        let db = Self::accum(grads, bias, n);
                        for j in 0..n {
                            db[j] += gr[j];
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                if needs[x] {
                    let (m, n) = (shapes[x][0], shapes[x][1]);
                    let xv = &values[x];
                    let dx = Self::accum(grads, x, m * n);
                    for i in 0..m {
                        let row = &xv[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let ss: f64 = row.iter().map(|&v| v * v).sum();
                        let inv = 1.0 / (ss + eps).sqrt();
                        let dot: f64 = row.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let inv3 = inv * inv * inv;
                        for j in 0..n {
                            dx[i * n + j] += gr[j] * inv - row[j] * dot * inv3;
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel } => {
                let (t, d_in) = (shapes[x][0], shapes[x][1]);
                let (k, d_out) = (shapes[kernel][0], shapes[kernel][2]);
                let pad_left = k / 2;
                if needs[kernel] {
                    let xv = &values[x];
                    let dk = Self::accum(grads, kernel, k * d_in * d_out);
                    for ti in 0..t {
                        let grow = &g[ti * d_out..(ti + 1) * d_out];
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad_left as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let xrow = &xv[src as usize * d_in..(src as usize + 1) * d_in];
                            let dkslab = &mut dk[j * d_in * d_out..(j + 1) * d_in * d_out];
                            for (i, &xval) in xrow.iter().enumerate() {
                                if xval == 0.0 {
                                    continue;
                                }
                                let dkrow = &mut dkslab[i * d_out..(i + 1) * d_out];
                                for (d, &gval) in dkrow.iter_mut().zip(grow) {
                                    *d += xval * gval;
                                }
                            }
                        }
                    }
                }
                if needs[x] {
                    let kv = &values[kernel];
                    let dx = Self::accum(grads, x, t * d_in);
                    for ti in 0..t {
                        let grow = &g[ti * d_out..(ti + 1) * d_out];
                        for j in 0..k {
                            let src = ti as isize + j as isize - pad_left as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let kslab = &kv[j * d_in * d_out..(j + 1) * d_in * d_out];
                            let dxrow =
                                &mut dx[src as usize * d_in..(src as usize + 1) * d_in];
                            for i in 0..d_in {
                                let krow = &kslab[i * d_out..(i + 1) * d_out];
                                let mut acc = 0.0;
                                for o in 0..d_out {
                                    acc += krow[o] * grow[o];
                                }
                                dxrow[i] += acc;
                            }
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs[x] {
                    let (m, n) = (shapes[x][0], shapes[x][1]);
                    let dx = Self::accum(grads, x, m * n);
                    for (i, gv) in g.iter().enumerate() {
                        dx[start * n + i] += gv;
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if needs[x] {
                    let (m, n) = (shapes[x][0], shapes[x][1]);
                    let len = shapes[id][1];
                    let dx = Self::accum(grads, x, m * n);
                    for i in 0..m {
                        for j in 0..len {
                            dx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let m = shapes[id][0];
                let total = shapes[id][1];
                let mut offset = 0;
                for &xi in &xs {
                    let w = shapes[xi][1];
                    if needs[xi] {
                        let dx = Self::accum(grads, xi, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                dx[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { xs } => {
                let n = shapes[id][1];
                let mut offset = 0;
                for &xi in &xs {
                    let mi = shapes[xi][0];
                    if needs[xi] {
                        let dx = Self::accum(grads, xi, mi * n);
                        for (d, &gv) in dx.iter_mut().zip(&g[offset..offset + mi * n]) {
                            *d += gv;
                        }
                    }
                    offset += mi * n;
                }
            }
            Op::GradReverse { x, lambda } => {
                if needs[x] {
                    let dx = Self::accum(grads, x, g.len());
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d -= lambda * gv;
                    }
                }
            }
            Op::StopGradient => {}
            Op::CrossEntropyLogits { logits, target } => {
                if needs[logits] {
                    let z = &values[logits];
                    let k = z.len();
                    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = z.iter().map(|&v| (v - mx).exp()).sum();
                    let dz = Self::accum(grads, logits, k);
                    for j in 0..k {
                        let p = (z[j] - mx).exp() / denom;
                        dz[j] += g[0] * (p - if j == target { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(())
    }
}
