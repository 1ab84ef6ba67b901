//! Tape-based reverse-mode differentiation over dense [`Array`]s.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes only ever reference earlier nodes, so creation order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Leaves are either parameters (gradients are tracked) or constants
//! (no gradient flows into them). Any node whose ancestors are all
//! constants is itself treated as a constant during backward.

use crate::autodiff::array::Array;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Log(Var),
    Exp(Var),
    Square(Var),
    Gelu(Var),
    MaxConst(Var, f64),
    Sum(Var),
    Mean(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Pick { x: Var, cols: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    LayerNorm { x: Var, eps: f64 },
    Reshape(Var),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires one.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like it when nothing reached it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(tape.value(v).shape()))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape {
        op,
        shapes: format!("{:?} vs {:?}", a.shape(), b.shape()),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sigmoid(x)) without overflow for large |x|.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `c[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Drops every node created after the first `len`. Handles to dropped
    /// nodes must not be used afterwards.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of trainable leaves recorded so far.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Param))
            .count()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Param, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Array::scalar(value))
    }

    /// Copy of `x`'s value as a constant, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va, vb));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Array::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, node, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let va = self.value(a);
        let value = Array::from_parts(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect());
        let rg = self.rg(&[a]);
        self.push(value, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Offset(a))
    }

    fn row_operand(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (vx, vv) = (self.value(x), self.value(v));
        match (vx.dims2(), vv.shape()) {
            (Some((r, c)), [n]) if *n == c => Ok((r, c)),
            _ => Err(shape_err(op, vx, vv)),
        }
    }

    /// `x[n,d] + v[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_operand("add_row", x, v)?;
        let (vx, vv) = (self.value(x).data(), self.value(v).data());
        let mut out = vx.to_vec();
        for i in 0..r {
            for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(vv) {
                *o += b;
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(Array::from_parts(vec![r, c], out), Op::AddRow(x, v), rg))
    }

    /// `x[n,d] * v[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_operand("mul_row", x, v)?;
        let (vx, vv) = (self.value(x).data(), self.value(v).data());
        let mut out = vx.to_vec();
        for i in 0..r {
            for (o, &s) in out[i * c..(i + 1) * c].iter_mut().zip(vv) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, v]);
        Ok(self.push(Array::from_parts(vec![r, c], out), Op::MulRow(x, v), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = match (va.dims2(), vb.dims2()) {
            (Some((m, k)), Some((k2, n))) if k == k2 => (m, k, n),
            _ => return Err(shape_err("matmul", va, vb)),
        };
        let mut out = vec![0.0; m * n];
        matmul_into(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = va.dims2().ok_or_else(|| Error::Shape {
            op: "transpose",
            shapes: format!("{:?}", va.shape()),
        })?;
        let d = va.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let va = self.value(a);
        va.dims2().ok_or_else(|| Error::Shape {
            op,
            shapes: format!("{:?} (expected a matrix)", va.shape()),
        })
    }

    /// Row-wise softmax. With `causal_offset = Some(k)`, row `i` only sees
    /// columns `0..=i + k`; later columns get probability zero. This is the
    /// attention mask for queries at positions `k..` over keys at `0..`.
    pub fn softmax_rows(&mut self, a: Var, causal_offset: Option<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", a)?;
        if let Some(k) = causal_offset {
            if r + k != c {
                return Err(Error::Shape {
                    op: "causal softmax_rows",
                    shapes: format!("[{r}, {c}] with offset {k} (expected rows + offset == cols)"),
                });
            }
        }
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let width = causal_offset.map_or(c, |k| i + k + 1);
            let row = &d[i * c..i * c + width];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..i * c + width];
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::from_parts(vec![r, c], out), Op::Softmax(a), rg))
    }

    /// Row-wise log-softmax in the max-subtracted form.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("log_softmax_rows", a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln();
            for (o, &x) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::from_parts(vec![r, c], out), Op::LogSoftmax(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Numerically stable `log(sigmoid(a))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Natural log. Non-positive inputs produce non-finite values.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Elementwise `max(a, c)`; the gradient at a tie goes to the constant.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x.max(c), Op::MaxConst(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), Op::Mean(a), rg)
    }

    /// Rows `table[ids[i], :]`, stacked. Used for embedding lookups.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                shapes: "empty index list".into(),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Shape {
                op: "gather_rows",
                shapes: format!("index {bad} out of range for table [{v}, {d}]"),
            });
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Array::from_parts(vec![ids.len(), d], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[i, cols[i]]` for every row, giving a vector of length n.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("pick", x)?;
        if cols.len() != r || cols.iter().any(|&j| j >= c) {
            return Err(Error::Shape {
                op: "pick",
                shapes: format!("[{r}, {c}] with {} column indices {:?}", cols.len(), cols),
            });
        }
        let d = self.value(x).data();
        let out = cols.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Array::from_parts(vec![r], out),
            Op::Pick {
                x,
                cols: cols.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along axis 0 (any rank, matching trailing dims) or
    /// axis 1 (matrices with matching row counts).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                shapes: "no inputs".into(),
            });
        }
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.value(p).shape().to_vec()).collect();
        let mismatch = || Error::Shape {
            op: "concat",
            shapes: format!("{shapes:?} along axis {axis}"),
        };
        let (shape, data) = match axis {
            0 => {
                let tail = &shapes[0][1..];
                if shapes.iter().any(|s| &s[1..] != tail) {
                    return Err(mismatch());
                }
                let mut shape = shapes[0].clone();
                shape[0] = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::with_capacity(shape.iter().product());
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                (shape, data)
            }
            1 => {
                if shapes.iter().any(|s| s.len() != 2 || s[0] != shapes[0][0]) {
                    return Err(mismatch());
                }
                let rows = shapes[0][0];
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                (vec![rows, cols], data)
            }
            _ => return Err(mismatch()),
        };
        let rg = self.rg(parts);
        Ok(self.push(
            Array::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        if len == 0 || start + len > shape[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                shapes: format!("{shape:?} rows {start}..{}", start + len),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = vx.data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(out_shape, data), Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                shapes: format!("[{r}, {c}] cols {start}..{}", start + len),
            });
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![r, len], out), Op::SliceCols { x, start }, rg))
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mu) * inv;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Array::from_parts(vec![r, c], out), Op::LayerNorm { x, eps }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != vx.len() {
            return Err(Error::Shape {
                op: "reshape",
                shapes: format!("{:?} -> {shape:?}", vx.shape()),
            });
        }
        let value = Array::from_parts(shape.to_vec(), vx.data().to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack_scalars(&mut self, items: &[Var]) -> Result<Var> {
        for &v in items {
            if !self.value(v).is_scalar() {
                return Err(Error::Shape {
                    op: "stack_scalars",
                    shapes: format!("{:?}", self.value(v).shape()),
                });
            }
        }
        self.concat(items, 0)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(Error::NonScalarRoot {
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.backward_node(node, g, lower);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|data| Array::from_parts(self.nodes[i].value.shape().to_vec(), data)))
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        // Borrow helpers: `val` reads a parent's forward value, `slot` yields its
        // gradient buffer if the parent takes gradients.
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let out = node.value.data();

        match &node.op {
            Op::Param | Op::Const => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if wants(v) {
                        let s = accumulate(&mut grads[v.0], g.len());
                        for (si, &gi) in s.iter_mut().zip(g) {
                            *si += sign * gi;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let s = accumulate(&mut grads[v.0], g.len());
                        for (si, &gi) in s.iter_mut().zip(g) {
                            *si += sign * gi;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    let s = accumulate(&mut grads[a.0], g.len());
                    for ((si, &gi), &bi) in s.iter_mut().zip(g).zip(vb) {
                        *si += gi * bi;
                    }
                }
                if wants(*b) {
                    let s = accumulate(&mut grads[b.0], g.len());
                    for ((si, &gi), &ai) in s.iter_mut().zip(g).zip(va) {
                        *si += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si += c * gi;
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for (si, &gi) in s.iter_mut().zip(g) {
                    *si += gi;
                }
            }
            Op::AddRow(x, v) | Op::MulRow(x, v) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let c = self.nodes[v.0].value.len();
                let r = g.len() / c;
                let (vx, vv) = (val(*x), val(*v));
                if wants(*x) {
                    let s = accumulate(&mut grads[x.0], g.len());
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            s[k] += if is_mul { g[k] * vv[j] } else { g[k] };
                        }
                    }
                }
                if wants(*v) {
                    let s = accumulate(&mut grads[v.0], c);
                    for i in 0..r {
                        for j in 0..c {
                            let k = i * c + j;
                            s[j] += if is_mul { g[k] * vx[k] } else { g[k] };
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = g.len() / m;
                let (va, vb) = (val(*a), val(*b));
                if wants(*a) {
                    // dA[i,p] += sum_j g[i,j] * B[p,j]
                    let s = accumulate(&mut grads[a.0], m * k);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            s[i * k + p] += dot;
                        }
                    }
                }
                if wants(*b) {
                    // dB[p,:] += A[i,p] * g[i,:]
                    let s = accumulate(&mut grads[b.0], k * n);
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = va[i * k + p];
                            for (sj, &gj) in s[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *sj += aip * gj;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                let s = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2().unwrap();
                let s = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        s[i * c + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let (r, c) = node.value.dims2().unwrap();
                let s = accumulate(&mut grads[a.0], r * c);
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        s[i * c + j] += gr[j] - y[j].exp() * gsum;
                    }
                }
            }
            Op::Sigmoid(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *si += gi * y * (1.0 - y);
                }
            }
            Op::LogSigmoid(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a)) {
                    *si += gi * sigmoid(-x);
                }
            }
            Op::Log(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a)) {
                    *si += gi / x;
                }
            }
            Op::Exp(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *si += gi * y;
                }
            }
            Op::Square(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a)) {
                    *si += 2.0 * x * gi;
                }
            }
            Op::Gelu(a) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a)) {
                    *si += gi * gelu_grad(x);
                }
            }
            Op::MaxConst(a, c) => {
                let s = accumulate(&mut grads[a.0], g.len());
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a)) {
                    if x > *c {
                        *si += gi;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / n as f64 } else { 1.0 };
                let s = accumulate(&mut grads[a.0], n);
                for si in s.iter_mut() {
                    *si += g[0] * scale;
                }
            }
            Op::GatherRows { table, ids } => {
                let (v, d) = self.nodes[table.0].value.dims2().unwrap();
                let s = accumulate(&mut grads[table.0], v * d);
                for (r, &id) in ids.iter().enumerate() {
                    for (sj, &gj) in s[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *sj += gj;
                    }
                }
            }
            Op::Pick { x, cols } => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let s = accumulate(&mut grads[x.0], r * c);
                for (i, &j) in cols.iter().enumerate() {
                    s[i * c + j] += g[i];
                }
            }
            Op::Concat { parts, axis } => match axis {
                0 => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.len();
                        if wants(p) {
                            let s = accumulate(&mut grads[p.0], n);
                            for (si, &gi) in s.iter_mut().zip(&g[off..off + n]) {
                                *si += gi;
                            }
                        }
                        off += n;
                    }
                }
                _ => {
                    let (rows, cols) = node.value.dims2().unwrap();
                    let mut col_off = 0;
                    for &p in parts {
                        let (_, w) = self.nodes[p.0].value.dims2().unwrap();
                        if wants(p) {
                            let s = accumulate(&mut grads[p.0], rows * w);
                            for i in 0..rows {
                                for j in 0..w {
                                    s[i * w + j] += g[i * cols + col_off + j];
                                }
                            }
                        }
                        col_off += w;
                    }
                }
            },
            Op::SliceRows { x, start } => {
                let src = &self.nodes[x.0].value;
                let inner: usize = src.shape()[1..].iter().product();
                let s = accumulate(&mut grads[x.0], src.len());
                for (si, &gi) in s[start * inner..start * inner + g.len()].iter_mut().zip(g) {
                    *si += gi;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = self.nodes[x.0].value.dims2().unwrap();
                let w = g.len() / r;
                let s = accumulate(&mut grads[x.0], r * c);
                for i in 0..r {
                    for j in 0..w {
                        s[i * c + start + j] += g[i * w + j];
                    }
                }
            }
            Op::LayerNorm { x, eps } => {
                let (r, c) = node.value.dims2().unwrap();
                let vx = val(*x);
                let s = accumulate(&mut grads[x.0], r * c);
                let cf = c as f64;
                for i in 0..r {
                    let row = &vx[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / cf;
                    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gmean = gr.iter().sum::<f64>() / cf;
                    let gx_mean = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        s[i * c + j] += inv * (gr[j] - gmean - xhat[j] * gx_mean);
                    }
                }
            }
        }
    }
}
