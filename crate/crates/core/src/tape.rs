//! Reverse-mode differentiation over a Wengert tape.
//!
//! The forward pass records primitive operations (matrix-vector product,
//! elementwise add/multiply, relu, tanh, sigmoid, softmax-cross-entropy, and
//! a few structural helpers) in the order they execute; nodes are appended,
//! so inputs always precede their consumers. `backward` replays the record in
//! exact reverse order, accumulating adjoints with the chain rule. The result
//! is deterministic: the same tape always yields bit-identical gradients.

use crate::tensor::{NumericsError, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out = M v, with M of shape (r, c) and v of length c.
    MatVec { m: Var, v: Var },
    /// out = a + b, elementwise.
    Add { a: Var, b: Var },
    /// out = a * b, elementwise.
    Mul { a: Var, b: Var },
    /// out = x * c for a constant c.
    Scale { x: Var, c: f64 },
    /// out = 1 - x, elementwise.
    OneMinus { x: Var },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    /// out[i][j] = m[i][j] * signs[j]: constant per-column scaling.
    ScaleColumns { m: Var, signs: Vec<f64> },
    /// out = x * mask elementwise for a constant mask (dropout).
    ConstMul { x: Var, mask: Vec<f64> },
    /// out = s * v where s is scalar and v a vector.
    Broadcast { s: Var, v: Var },
    /// out = table[row, :] for a rank-2 table.
    EmbedRow { table: Var, row: usize },
    /// out = x.flat[offset .. offset + len], reshaped.
    Slice { x: Var, offset: usize },
    /// out = -log softmax(logits)[target]; softmax probabilities are cached
    /// at record time for the backward rule.
    SoftmaxXent {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward pass and differentiates it.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register an input tensor. Leaves are what `backward` reports
    /// gradients for (every node gets an adjoint; leaves are just the ones
    /// with no inputs of their own).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = self.nodes[m.0].value.dims2();
        let vec = &self.nodes[v.0].value;
        if vec.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "matvec",
                lhs: self.nodes[m.0].value.shape().to_vec(),
                rhs: vec.shape().to_vec(),
            });
        }
        let md = self.nodes[m.0].value.data();
        let vd = vec.data();
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &md[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for j in 0..cols {
                acc += row[j] * vd[j];
            }
            out[i] = acc;
        }
        self.push(Tensor::vector(out)?, Op::MatVec { m, v }, "matvec")
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.nodes[a.0].value.shape();
        let sb = self.nodes[b.0].value.shape();
        if sa != sb {
            return Err(NumericsError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Add { a, b }, "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale { x, c }, "scale")
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| 1.0 - v)
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::OneMinus { x }, "one_minus")
    }

    /// Elementwise max(0, x). The subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| v.max(0.0))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Relu { x }, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Tanh { x }, "tanh")
    }

    /// Elementwise 1/(1+exp(-x)); output strictly inside (0, 1).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|v| sigmoid_scalar(*v))
            .collect();
        let shape = self.nodes[x.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Sigmoid { x }, "sigmoid")
    }

    /// Multiply column j of a rank-2 tensor by `signs[j]`.
    pub fn scale_columns(&mut self, m: Var, signs: &[f64]) -> Result<Var> {
        let (rows, cols) = self.nodes[m.0].value.dims2();
        if signs.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_columns",
                lhs: self.nodes[m.0].value.shape().to_vec(),
                rhs: vec![signs.len()],
            });
        }
        let md = self.nodes[m.0].value.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = md[i * cols + j] * signs[j];
            }
        }
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::ScaleColumns {
                m,
                signs: signs.to_vec(),
            },
            "scale_columns",
        )
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn const_mul(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if mask.len() != xv.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "const_mul",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f64> = xv.data().iter().zip(mask).map(|(a, b)| a * b).collect();
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::ConstMul {
                x,
                mask: mask.to_vec(),
            },
            "const_mul",
        )
    }

    /// Scalar node times vector node.
    pub fn broadcast_mul(&mut self, s: Var, v: Var) -> Result<Var> {
        if !self.nodes[s.0].value.is_scalar() {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_mul",
                lhs: self.nodes[s.0].value.shape().to_vec(),
                rhs: self.nodes[v.0].value.shape().to_vec(),
            });
        }
        let sv = self.nodes[s.0].value.item();
        let out: Vec<f64> = self.nodes[v.0].value.data().iter().map(|x| x * sv).collect();
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Broadcast { s, v }, "broadcast_mul")
    }

    /// Select row `row` of a rank-2 table as a vector (embedding lookup).
    pub fn embed_row(&mut self, table: Var, row: usize) -> Result<Var> {
        let (rows, cols) = self.nodes[table.0].value.dims2();
        if row >= rows {
            return Err(NumericsError::IndexOutOfRange {
                op: "embed_row",
                index: row,
                size: rows,
            });
        }
        let out = self.nodes[table.0].value.data()[row * cols..(row + 1) * cols].to_vec();
        self.push(Tensor::vector(out)?, Op::EmbedRow { table, row }, "embed_row")
    }

    /// Contiguous slice of the flat buffer, reshaped to `shape`.
    pub fn slice(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let xv = &self.nodes[x.0].value;
        if offset + len > xv.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice",
                index: offset + len,
                size: xv.len(),
            });
        }
        let out = xv.data()[offset..offset + len].to_vec();
        self.push(Tensor::new(shape.to_vec(), out)?, Op::Slice { x, offset }, "slice")
    }

    /// Scalar loss -log softmax(logits)[target]. Always >= 0; the cached
    /// softmax sums to 1 up to rounding.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if target >= lv.len() {
            return Err(NumericsError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: target,
                size: lv.len(),
            });
        }
        let probs = softmax(lv.data());
        let loss = -probs[target].ln();
        self.push(
            Tensor::scalar(loss)?,
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Smallest |x| fed into any relu on this tape; None when no relu was
    /// recorded. Gradient checks use this to detect kink-adjacent points
    /// where central differences are unreliable.
    pub fn min_abs_relu_input(&self) -> Option<f64> {
        let mut min = None;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for v in self.nodes[x.0].value.data() {
                    let a = v.abs();
                    if min.is_none_or(|m| a < m) {
                        min = Some(a);
                    }
                }
            }
        }
        min
    }

    /// Reverse sweep from a scalar loss node. Returns one adjoint per node;
    /// callers read the ones for their leaves. Operations are visited in
    /// exact reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(NumericsError::LossNotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = adj[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    adj[idx] = Some(up);
                    continue;
                }
                Op::MatVec { m, v } => {
                    let (rows, cols) = self.nodes[m.0].value.dims2();
                    let md = self.nodes[m.0].value.data();
                    let vd = self.nodes[v.0].value.data();
                    {
                        let gm = grad_slot(&mut adj, m.0, rows * cols);
                        for i in 0..rows {
                            let d = up[i];
                            let row = &mut gm[i * cols..(i + 1) * cols];
                            for j in 0..cols {
                                row[j] += d * vd[j];
                            }
                        }
                    }
                    {
                        let gv = grad_slot(&mut adj, v.0, cols);
                        for i in 0..rows {
                            let d = up[i];
                            let row = &md[i * cols..(i + 1) * cols];
                            for j in 0..cols {
                                gv[j] += row[j] * d;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut adj, a.0, &up, |u, _| u, &[]);
                    accumulate(&mut adj, b.0, &up, |u, _| u, &[]);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let bv = self.nodes[b.0].value.data().to_vec();
                    accumulate(&mut adj, a.0, &up, |u, o| u * o, &bv);
                    let av = self.nodes[a.0].value.data().to_vec();
                    accumulate(&mut adj, b.0, &up, |u, o| u * o, &av);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    accumulate(&mut adj, x.0, &up, |u, _| u * c, &[]);
                }
                Op::OneMinus { x } => {
                    let x = *x;
                    accumulate(&mut adj, x.0, &up, |u, _| -u, &[]);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xin = self.nodes[x.0].value.data().to_vec();
                    accumulate(&mut adj, x.0, &up, |u, o| if o > 0.0 { u } else { 0.0 }, &xin);
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let y = self.nodes[idx].value.data().to_vec();
                    accumulate(&mut adj, x.0, &up, |u, o| u * (1.0 - o * o), &y);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let y = self.nodes[idx].value.data().to_vec();
                    accumulate(&mut adj, x.0, &up, |u, o| u * o * (1.0 - o), &y);
                }
                Op::ScaleColumns { m, signs } => {
                    let m = *m;
                    let (rows, cols) = self.nodes[m.0].value.dims2();
                    let signs = signs.clone();
                    let gm = grad_slot(&mut adj, m.0, rows * cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            gm[i * cols + j] += up[i * cols + j] * signs[j];
                        }
                    }
                }
                Op::ConstMul { x, mask } => {
                    let x = *x;
                    let mask = mask.clone();
                    accumulate(&mut adj, x.0, &up, |u, o| u * o, &mask);
                }
                Op::Broadcast { s, v } => {
                    let (s, v) = (*s, *v);
                    let sv = self.nodes[s.0].value.item();
                    let vd = self.nodes[v.0].value.data().to_vec();
                    {
                        let gs = grad_slot(&mut adj, s.0, 1);
                        gs[0] += up.iter().zip(&vd).map(|(u, x)| u * x).sum::<f64>();
                    }
                    accumulate(&mut adj, v.0, &up, |u, _| u * sv, &[]);
                }
                Op::EmbedRow { table, row } => {
                    let (table, row) = (*table, *row);
                    let (rows, cols) = self.nodes[table.0].value.dims2();
                    let gt = grad_slot(&mut adj, table.0, rows * cols);
                    for j in 0..cols {
                        gt[row * cols + j] += up[j];
                    }
                }
                Op::Slice { x, offset } => {
                    let (x, offset) = (*x, *offset);
                    let n = self.nodes[x.0].value.len();
                    let gx = grad_slot(&mut adj, x.0, n);
                    for (j, u) in up.iter().enumerate() {
                        gx[offset + j] += u;
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    target,
                    probs,
                } => {
                    let (logits, target) = (*logits, *target);
                    let probs = probs.clone();
                    let gl = grad_slot(&mut adj, logits.0, probs.len());
                    let d = up[0];
                    for (j, p) in probs.iter().enumerate() {
                        let indicator = if j == target { 1.0 } else { 0.0 };
                        gl[j] += d * (p - indicator);
                    }
                }
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            adjoints: adj,
        })
    }
}

fn grad_slot<'a>(adj: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    if adj[idx].is_none() {
        adj[idx] = Some(vec![0.0; len]);
    }
    adj[idx].as_mut().unwrap()
}

/// adj[target] += f(upstream[i], other[i]), allocating the slot on demand.
fn accumulate(
    adj: &mut [Option<Vec<f64>>],
    idx: usize,
    up: &[f64],
    f: impl Fn(f64, f64) -> f64,
    other: &[f64],
) {
    let slot = grad_slot(adj, idx, up.len());
    if other.is_empty() {
        for (g, u) in slot.iter_mut().zip(up) {
            *g += f(*u, 0.0);
        }
    } else {
        for ((g, u), o) in slot.iter_mut().zip(up).zip(other) {
            *g += f(*u, *o);
        }
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node. Nodes the loss does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.adjoints[v.index()] {
            Some(g) => Tensor::new(self.shapes[v.index()].clone(), g.clone())
                .expect("adjoint shape matches node shape"),
            None => Tensor::zeros(&self.shapes[v.index()]),
        }
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Central-difference gradient (f(x+he) - f(x-he)) / 2h per coordinate.
/// This is the independent oracle the analytic backward pass is checked
/// against; it never touches the tape.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Tensor> {
    if step <= 0.0 {
        return Err(NumericsError::NonPositiveStep(step));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        let d = (fp - fm) / (2.0 * step);
        if !d.is_finite() {
            return Err(NumericsError::NonFinite {
                op: "finite_difference_gradient",
            });
        }
        grad[i] = d;
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// |a - b| relative to max(|a|, |b|), floored so that agreement below
/// `floor` in absolute terms always passes (finite-difference noise floor).
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
