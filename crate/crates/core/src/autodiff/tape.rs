use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::tensor::Tensor;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Element-wise operation tags accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseTag {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Square,
}

/// Second operand of an element-wise operation.
#[derive(Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a Tensor),
    Scalar(f64),
    None,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sqrt(usize),
    Relu(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    L2Normalize {
        input: usize,
        norm: f64,
        degenerate: bool,
    },
    SumAll(usize),
    StackRows {
        rows: Vec<usize>,
        cols: usize,
    },
    TakeRow {
        input: usize,
        row: usize,
        cols: usize,
    },
    Conv1d {
        weight: usize,
        bias: usize,
        input: usize,
        stride: usize,
        pad_left: usize,
    },
    Embed {
        table: usize,
        ids: Rc<Vec<usize>>,
        dim: usize,
    },
}

struct Node {
    op: Op,
    values: Rc<Vec<f64>>,
    shape: Vec<usize>,
    needs_grad: bool,
    /// External gradient buffer of the parameter behind a leaf.
    sink: Option<Rc<RefCell<Vec<f64>>>>,
    /// Scratch gradient used during a backward pass.
    grad: Option<Vec<f64>>,
}

struct Inner {
    nodes: Vec<Node>,
    /// Leaf node per distinct value storage, so a parameter used many times
    /// in one forward pass is registered once.
    leaves: HashMap<usize, usize>,
    degenerate_norms: usize,
}

/// A define-by-run computation graph. Nodes are appended in execution order,
/// which is therefore a topological order; backward walks it in reverse.
///
/// A tape and the tensors recorded on it belong to a single thread. Build a
/// fresh tape per forward pass and drop it after the backward pass.
pub struct Tape {
    id: u64,
    grad_enabled: bool,
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            grad_enabled: true,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                leaves: HashMap::new(),
                degenerate_norms: 0,
            }),
        }
    }

    /// A tape that records nothing; every operation returns a plain tensor.
    pub fn no_grad() -> Self {
        let mut t = Self::new();
        t.grad_enabled = false;
        t
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of l2_normalize calls that hit the degenerate-norm guard.
    pub fn degenerate_norm_count(&self) -> usize {
        self.inner.borrow().degenerate_norms
    }

    /// True when any recorded hinge input lies within `eps` of its kink.
    pub fn relu_kink_within(&self, eps: f64) -> bool {
        let inner = self.inner.borrow();
        inner.nodes.iter().any(|n| {
            if let Op::Relu(input) = n.op {
                inner.nodes[input].values.iter().any(|v| v.abs() < eps)
            } else {
                false
            }
        })
    }

    fn tracked(&self, t: &Tensor) -> bool {
        if !self.grad_enabled {
            return false;
        }
        if t.requires_grad() {
            return true;
        }
        matches!(t.node, Some((tape, _)) if tape == self.id)
    }

    /// Node id for `t`, registering a leaf if it was not produced here.
    fn node_of(&self, t: &Tensor) -> usize {
        if let Some((tape, id)) = t.node {
            if tape == self.id {
                return id;
            }
        }
        let mut inner = self.inner.borrow_mut();
        let key = Rc::as_ptr(&t.values_rc()) as usize;
        if let Some(&id) = inner.leaves.get(&key) {
            return id;
        }
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            values: t.values_rc(),
            shape: t.shape().to_vec(),
            needs_grad: t.requires_grad(),
            sink: t.grad_rc(),
            grad: None,
        });
        inner.leaves.insert(key, id);
        id
    }

    fn record(&self, op: Op, values: Vec<f64>, shape: Vec<usize>) -> Tensor {
        let rc = Rc::new(values);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            values: Rc::clone(&rc),
            shape: shape.clone(),
            needs_grad: true,
            sink: None,
            grad: None,
        });
        Tensor::from_node(rc, shape, self.id, id)
    }

    // ── element-wise ────────────────────────────────────────────────────

    /// Dispatch an element-wise operation by tag. Unary tags ignore a
    /// missing second operand and reject a present one.
    pub fn elementwise(&self, tag: ElementwiseTag, a: &Tensor, b: Operand<'_>) -> Result<Tensor> {
        use ElementwiseTag::*;
        match (tag, b) {
            (Add, Operand::Tensor(b)) => self.add(a, b),
            (Add, Operand::Scalar(s)) => self.add_scalar(a, s),
            (Sub, Operand::Tensor(b)) => self.sub(a, b),
            (Sub, Operand::Scalar(s)) => self.add_scalar(a, -s),
            (Mul, Operand::Tensor(b)) => self.mul(a, b),
            (Mul, Operand::Scalar(s)) => self.mul_scalar(a, s),
            (Add | Sub | Mul, Operand::None) => Err(Error::Contract(
                "binary elementwise op needs a second operand".into(),
            )),
            (Tanh, Operand::None) => self.tanh(a),
            (Sigmoid, Operand::None) => self.sigmoid(a),
            (Exp, Operand::None) => self.exp(a),
            (Log, Operand::None) => self.log(a),
            (Square, Operand::None) => self.square(a),
            (Tanh | Sigmoid | Exp | Log | Square, _) => Err(Error::Contract(
                "unary elementwise op takes no second operand".into(),
            )),
        }
    }

    fn binary(
        &self,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "elementwise operands {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let values: Vec<f64> = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let recorded = self.tracked(a) || self.tracked(b);
        if recorded {
            let ia = self.node_of(a);
            let ib = self.node_of(b);
            Ok(self.record(op(ia, ib), values, a.shape().to_vec()))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), a.shape().to_vec()))
        }
    }

    fn unary(
        &self,
        a: &Tensor,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Tensor> {
        let values: Vec<f64> = a.values().iter().map(|&x| f(x)).collect();
        let recorded = self.tracked(a);
        if recorded {
            let ia = self.node_of(a);
            Ok(self.record(op(ia), values, a.shape().to_vec()))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), a.shape().to_vec()))
        }
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn add_scalar(&self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(a, |x| x + s, Op::AddScalar)
    }

    pub fn mul_scalar(&self, a: &Tensor, s: f64) -> Result<Tensor> {
        self.unary(a, |x| x * s, |i| Op::MulScalar(i, s))
    }

    /// s − a, element-wise.
    pub fn scalar_sub(&self, s: f64, a: &Tensor) -> Result<Tensor> {
        let neg = self.mul_scalar(a, -1.0)?;
        self.add_scalar(&neg, s)
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn exp(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn square(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sqrt(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    /// max(0, x); the subgradient at 0 is taken as 0.
    pub fn relu(&self, a: &Tensor) -> Result<Tensor> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::Dimension(format!(
                "matmul needs two matrices, got {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions {k} vs {k2}"
            )));
        }
        let values = matmul_values(a.values(), b.values(), m, k, n);
        let recorded = self.tracked(a) || self.tracked(b);
        if recorded {
            let ia = self.node_of(a);
            let ib = self.node_of(b);
            Ok(self.record(
                Op::Matmul {
                    a: ia,
                    b: ib,
                    m,
                    k,
                    n,
                },
                values,
                vec![m, n],
            ))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), vec![m, n]))
        }
    }

    /// Matrix · vector convenience: `w`[m×k] · `x`[k] → [m].
    pub fn matvec(&self, w: &Tensor, x: &Tensor) -> Result<Tensor> {
        let &[k] = x.shape() else {
            return Err(Error::Dimension(format!(
                "matvec needs a vector, got {:?}",
                x.shape()
            )));
        };
        let col = self.reshape(x, &[k, 1])?;
        let out = self.matmul(w, &col)?;
        let m = out.shape()[0];
        self.reshape(&out, &[m])
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let &[rows, cols] = a.shape() else {
            return Err(Error::Dimension(format!(
                "transpose needs a matrix, got {:?}",
                a.shape()
            )));
        };
        let values = transpose_values(a.values(), rows, cols);
        let recorded = self.tracked(a);
        if recorded {
            let input = self.node_of(a);
            Ok(self.record(Op::Transpose { input, rows, cols }, values, vec![cols, rows]))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), vec![cols, rows]))
        }
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                a.shape()
            )));
        }
        let values = a.values().to_vec();
        let recorded = self.tracked(a);
        if recorded {
            let input = self.node_of(a);
            Ok(self.record(Op::Reshape(input), values, shape.to_vec()))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), shape.to_vec()))
        }
    }

    // ── reductions and normalizers ──────────────────────────────────────

    /// Sum of all entries, as a scalar tensor of shape [1].
    pub fn sum(&self, a: &Tensor) -> Result<Tensor> {
        let total: f64 = a.values().iter().sum();
        let recorded = self.tracked(a);
        if recorded {
            let input = self.node_of(a);
            Ok(self.record(Op::SumAll(input), vec![total], vec![1]))
        } else {
            Ok(Tensor::plain_rc(Rc::new(vec![total]), vec![1]))
        }
    }

    /// Numerically stable softmax along `axis` of a vector or matrix.
    pub fn softmax(&self, a: &Tensor, axis: usize) -> Result<Tensor> {
        if a.values().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax of NaN input".into()));
        }
        let (rows, cols) = match *a.shape() {
            [n] => {
                if axis != 0 {
                    return Err(Error::Dimension(format!(
                        "softmax axis {axis} on a vector"
                    )));
                }
                (n, 1)
            }
            [r, c] => {
                if axis > 1 {
                    return Err(Error::Dimension(format!(
                        "softmax axis {axis} on a matrix"
                    )));
                }
                (r, c)
            }
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax supports vectors and matrices, got {:?}",
                    a.shape()
                )))
            }
        };
        let eff_axis = if a.shape().len() == 1 { 0 } else { axis };
        let values = softmax_values(a.values(), rows, cols, eff_axis);
        let recorded = self.tracked(a);
        if recorded {
            let input = self.node_of(a);
            Ok(self.record(
                Op::Softmax {
                    input,
                    axis: eff_axis,
                },
                values,
                a.shape().to_vec(),
            ))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), a.shape().to_vec()))
        }
    }

    /// Scale a vector to unit L2 norm. A near-zero input (norm < 1e-12) is
    /// returned unchanged and counted; dividing by an epsilon instead would
    /// blow up the gradient.
    pub fn l2_normalize(&self, a: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "l2_normalize needs a vector, got {:?}",
                a.shape()
            )));
        }
        let norm = a.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        let degenerate = norm < super::DEGENERATE_NORM_EPS;
        let values: Vec<f64> = if degenerate {
            self.inner.borrow_mut().degenerate_norms += 1;
            log::warn!("l2_normalize: degenerate norm {norm:.3e}, returning input unchanged");
            a.values().to_vec()
        } else {
            a.values().iter().map(|v| v / norm).collect()
        };
        let recorded = self.tracked(a);
        if recorded {
            let input = self.node_of(a);
            Ok(self.record(
                Op::L2Normalize {
                    input,
                    norm,
                    degenerate,
                },
                values,
                a.shape().to_vec(),
            ))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), a.shape().to_vec()))
        }
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Stack equal-length vectors into a [T × dim] matrix.
    pub fn stack_rows(&self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows of no rows".into()));
        }
        let &[cols] = rows[0].shape() else {
            return Err(Error::Dimension(format!(
                "stack_rows needs vectors, got {:?}",
                rows[0].shape()
            )));
        };
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.shape() != [cols] {
                return Err(Error::Dimension(format!(
                    "stack_rows rows {:?} vs {:?}",
                    r.shape(),
                    [cols]
                )));
            }
            values.extend_from_slice(r.values());
        }
        let shape = vec![rows.len(), cols];
        let recorded = rows.iter().any(|r| self.tracked(r));
        if recorded {
            let ids: Vec<usize> = rows.iter().map(|r| self.node_of(r)).collect();
            Ok(self.record(Op::StackRows { rows: ids, cols }, values, shape))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), shape))
        }
    }

    /// Row `row` of a matrix, as a vector.
    pub fn row(&self, a: &Tensor, row: usize) -> Result<Tensor> {
        let &[rows, cols] = a.shape() else {
            return Err(Error::Dimension(format!(
                "row() needs a matrix, got {:?}",
                a.shape()
            )));
        };
        if row >= rows {
            return Err(Error::Dimension(format!("row {row} of {rows} rows")));
        }
        let values = a.values()[row * cols..(row + 1) * cols].to_vec();
        let recorded = self.tracked(a);
        if recorded {
            let input = self.node_of(a);
            Ok(self.record(Op::TakeRow { input, row, cols }, values, vec![cols]))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), vec![cols]))
        }
    }

    /// 1-D convolution over time. `weight` is [s × in_dim × channels],
    /// `bias` is [channels], `input` is [T × in_dim]. Zero padding is split
    /// symmetrically so the output always has ⌈T / stride⌉ rows.
    pub fn conv1d(
        &self,
        weight: &Tensor,
        bias: &Tensor,
        input: &Tensor,
        stride: usize,
    ) -> Result<Tensor> {
        let &[s, in_dim, channels] = weight.shape() else {
            return Err(Error::Dimension(format!(
                "conv1d weight must be [kernel × in × channels], got {:?}",
                weight.shape()
            )));
        };
        if bias.shape() != [channels] {
            return Err(Error::Dimension(format!(
                "conv1d bias {:?} for {channels} channels",
                bias.shape()
            )));
        }
        let &[t_len, x_dim] = input.shape() else {
            return Err(Error::Dimension(format!(
                "conv1d input must be [T × in], got {:?}",
                input.shape()
            )));
        };
        if x_dim != in_dim {
            return Err(Error::Dimension(format!(
                "conv1d input dim {x_dim} vs weight in dim {in_dim}"
            )));
        }
        if t_len == 0 {
            return Err(Error::Contract("conv1d of empty input".into()));
        }
        if stride == 0 {
            return Err(Error::Contract("conv1d stride must be >= 1".into()));
        }
        let out_len = t_len.div_ceil(stride);
        let pad_total = ((out_len - 1) * stride + s).saturating_sub(t_len);
        let pad_left = pad_total / 2;
        let values = conv1d_values(
            weight.values(),
            bias.values(),
            input.values(),
            s,
            in_dim,
            channels,
            t_len,
            stride,
            pad_left,
            out_len,
        );
        let recorded = self.tracked(weight) || self.tracked(bias) || self.tracked(input);
        if recorded {
            let w = self.node_of(weight);
            let b = self.node_of(bias);
            let x = self.node_of(input);
            Ok(self.record(
                Op::Conv1d {
                    weight: w,
                    bias: b,
                    input: x,
                    stride,
                    pad_left,
                },
                values,
                vec![out_len, channels],
            ))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), vec![out_len, channels]))
        }
    }

    /// Look up embedding rows for a sequence of ids. Gradients scatter-add
    /// into the selected table rows only.
    pub fn embed(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let &[vocab, dim] = table.shape() else {
            return Err(Error::Dimension(format!(
                "embedding table must be [vocab × dim], got {:?}",
                table.shape()
            )));
        };
        if ids.is_empty() {
            return Err(Error::Contract("embed of empty id sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Vocabulary {
                id: bad,
                size: vocab,
            });
        }
        let mut values = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            values.extend_from_slice(&table.values()[id * dim..(id + 1) * dim]);
        }
        let shape = vec![ids.len(), dim];
        let recorded = self.tracked(table);
        if recorded {
            let t = self.node_of(table);
            Ok(self.record(
                Op::Embed {
                    table: t,
                    ids: Rc::new(ids.to_vec()),
                    dim,
                },
                values,
                shape,
            ))
        } else {
            Ok(Tensor::plain_rc(Rc::new(values), shape))
        }
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse the tape from `loss`, accumulating into the gradient buffer
    /// of every requires-grad leaf. Buffers accumulate across calls; the
    /// caller zeroes them between optimization steps.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let root = match loss.node {
            Some((tape, id)) if tape == self.id => id,
            _ => {
                return Err(Error::Contract(
                    "backward target was not recorded on this tape".into(),
                ))
            }
        };
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut inner = self.inner.borrow_mut();
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        inner.nodes[root].grad = Some(vec![1.0]);

        for i in (0..=root).rev() {
            let (before, rest) = inner.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let Some(grad) = node.grad.take() else {
                continue;
            };
            if let Some(sink) = &node.sink {
                let mut buf = sink.borrow_mut();
                for (dst, g) in buf.iter_mut().zip(&grad) {
                    *dst += g;
                }
            }
            let op = node.op.clone();
            let out_values = Rc::clone(&node.values);
            propagate(before, &op, &grad, &out_values);
        }
        Ok(())
    }
}

/// Lazily materialize the gradient buffer of node `j` and return it, or
/// `None` when the node does not need gradients.
fn slot(nodes: &mut [Node], j: usize) -> Option<&mut Vec<f64>> {
    if !nodes[j].needs_grad {
        return None;
    }
    if nodes[j].grad.is_none() {
        let len = nodes[j].values.len();
        nodes[j].grad = Some(vec![0.0; len]);
    }
    nodes[j].grad.as_mut()
}

fn propagate(nodes: &mut [Node], op: &Op, g: &[f64], out: &[f64]) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(gb) = slot(nodes, b) {
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
            if let Some(gb) = slot(nodes, b) {
                for (d, &gi) in gb.iter_mut().zip(g) {
                    *d -= gi;
                }
            }
        }
        Op::Mul(a, b) => {
            let bv = Rc::clone(&nodes[b].values);
            let av = Rc::clone(&nodes[a].values);
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                    *d += gi * y;
                }
            }
            if let Some(gb) = slot(nodes, b) {
                for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av.iter()) {
                    *d += gi * x;
                }
            }
        }
        Op::Div(a, b) => {
            let bv = Rc::clone(&nodes[b].values);
            let av = Rc::clone(&nodes[a].values);
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                    *d += gi / y;
                }
            }
            if let Some(gb) = slot(nodes, b) {
                for (i, (d, &gi)) in gb.iter_mut().zip(g).enumerate() {
                    *d -= gi * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::AddScalar(a) => {
            if let Some(ga) = slot(nodes, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::MulScalar(a, s) => {
            if let Some(ga) = slot(nodes, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi * s;
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi * y;
                }
            }
        }
        Op::Log(a) => {
            let av = Rc::clone(&nodes[a].values);
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                    *d += gi / x;
                }
            }
        }
        Op::Square(a) => {
            let av = Rc::clone(&nodes[a].values);
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                    *d += gi * 2.0 * x;
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out) {
                    *d += gi / (2.0 * y);
                }
            }
        }
        Op::Relu(a) => {
            let av = Rc::clone(&nodes[a].values);
            if let Some(ga) = slot(nodes, a) {
                for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            let av = Rc::clone(&nodes[a].values);
            let bv = Rc::clone(&nodes[b].values);
            if let Some(ga) = slot(nodes, a) {
                // dA[i,p] += Σ_j g[i,j]·B[p,j]
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            if let Some(gb) = slot(nodes, b) {
                // dB[p,j] += Σ_i A[i,p]·g[i,j]
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += aip * g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::Transpose { input, rows, cols } => {
            if let Some(gi) = slot(nodes, input) {
                for r in 0..rows {
                    for c in 0..cols {
                        gi[r * cols + c] += g[c * rows + r];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, a) {
                for (d, &gi) in ga.iter_mut().zip(g) {
                    *d += gi;
                }
            }
        }
        Op::Softmax { input, axis } => {
            let shape = nodes[input].shape.clone();
            let (rows, cols) = match *shape.as_slice() {
                [n] => (n, 1),
                [r, c] => (r, c),
                _ => unreachable!("softmax input rank checked at record time"),
            };
            if let Some(gi) = slot(nodes, input) {
                // dx = y ⊙ (g − Σ g·y) per slice along the softmax axis
                if axis == 0 {
                    for c in 0..cols {
                        let mut dot = 0.0;
                        for r in 0..rows {
                            dot += g[r * cols + c] * out[r * cols + c];
                        }
                        for r in 0..rows {
                            let idx = r * cols + c;
                            gi[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                } else {
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[r * cols + c] * out[r * cols + c];
                        }
                        for c in 0..cols {
                            let idx = r * cols + c;
                            gi[idx] += out[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
        }
        Op::L2Normalize {
            input,
            norm,
            degenerate,
        } => {
            if let Some(gi) = slot(nodes, input) {
                if degenerate {
                    for (d, &gv) in gi.iter_mut().zip(g) {
                        *d += gv;
                    }
                } else {
                    let dot: f64 = g.iter().zip(out).map(|(&gv, &y)| gv * y).sum();
                    for ((d, &gv), &y) in gi.iter_mut().zip(g).zip(out) {
                        *d += (gv - y * dot) / norm;
                    }
                }
            }
        }
        Op::SumAll(a) => {
            if let Some(ga) = slot(nodes, a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::StackRows { ref rows, cols } => {
            for (t, &r) in rows.iter().enumerate() {
                if let Some(gr) = slot(nodes, r) {
                    for (d, &gv) in gr.iter_mut().zip(&g[t * cols..(t + 1) * cols]) {
                        *d += gv;
                    }
                }
            }
        }
        Op::TakeRow { input, row, cols } => {
            if let Some(gi) = slot(nodes, input) {
                for (d, &gv) in gi[row * cols..(row + 1) * cols].iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Conv1d {
            weight,
            bias,
            input,
            stride,
            pad_left,
        } => {
            let [s, in_dim, channels] = nodes[weight].shape[..] else {
                unreachable!("conv weight rank checked at record time");
            };
            let t_len = nodes[input].shape[0];
            let out_len = t_len.div_ceil(stride);
            let wv = Rc::clone(&nodes[weight].values);
            let xv = Rc::clone(&nodes[input].values);
            if let Some(gw) = slot(nodes, weight) {
                for t in 0..out_len {
                    for k in 0..s {
                        let src = (t * stride + k) as isize - pad_left as isize;
                        if src < 0 || src as usize >= t_len {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..in_dim {
                            let x = xv[src * in_dim + c];
                            if x == 0.0 {
                                continue;
                            }
                            for o in 0..channels {
                                gw[(k * in_dim + c) * channels + o] +=
                                    g[t * channels + o] * x;
                            }
                        }
                    }
                }
            }
            if let Some(gb) = slot(nodes, bias) {
                for t in 0..out_len {
                    for o in 0..channels {
                        gb[o] += g[t * channels + o];
                    }
                }
            }
            if let Some(gx) = slot(nodes, input) {
                for t in 0..out_len {
                    for k in 0..s {
                        let src = (t * stride + k) as isize - pad_left as isize;
                        if src < 0 || src as usize >= t_len {
                            continue;
                        }
                        let src = src as usize;
                        for c in 0..in_dim {
                            let mut acc = 0.0;
                            for o in 0..channels {
                                acc += g[t * channels + o] * wv[(k * in_dim + c) * channels + o];
                            }
                            gx[src * in_dim + c] += acc;
                        }
                    }
                }
            }
        }
        Op::Embed {
            table,
            ref ids,
            dim,
        } => {
            if let Some(gt) = slot(nodes, table) {
                for (t, &id) in ids.iter().enumerate() {
                    for c in 0..dim {
                        gt[id * dim + c] += g[t * dim + c];
                    }
                }
            }
        }
    }
}

// ── pure forward kernels ────────────────────────────────────────────────

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_values(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softmax_values(a: &[f64], rows: usize, cols: usize, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    let (slices, len, stride, step) = if axis == 0 {
        (cols, rows, 1usize, cols)
    } else {
        (rows, cols, cols, 1usize)
    };
    for s in 0..slices {
        let base = s * stride;
        let mut max = f64::NEG_INFINITY;
        for i in 0..len {
            max = max.max(a[base + i * step]);
        }
        let mut total = 0.0;
        for i in 0..len {
            let e = (a[base + i * step] - max).exp();
            out[base + i * step] = e;
            total += e;
        }
        for i in 0..len {
            out[base + i * step] /= total;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv1d_values(
    weight: &[f64],
    bias: &[f64],
    input: &[f64],
    s: usize,
    in_dim: usize,
    channels: usize,
    t_len: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_len * channels];
    for t in 0..out_len {
        let orow = &mut out[t * channels..(t + 1) * channels];
        orow.copy_from_slice(bias);
        for k in 0..s {
            let src = (t * stride + k) as isize - pad_left as isize;
            if src < 0 || src as usize >= t_len {
                continue;
            }
            let src = src as usize;
            for c in 0..in_dim {
                let x = input[src * in_dim + c];
                if x == 0.0 {
                    continue;
                }
                let wrow = &weight[(k * in_dim + c) * channels..(k * in_dim + c + 1) * channels];
                for (o, &w) in orow.iter_mut().zip(wrow) {
                    *o += w * x;
                }
            }
        }
    }
    out
}
