//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Nodes are recorded in execution order, so the node index is a topological
//! order and `backward` is a single reverse sweep. A [`Var`] is a plain index
//! into the tape that produced it; mixing vars from different tapes is a logic
//! error that the tape cannot detect.

use crate::error::{invalid, Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn, Exec, GemmDims};
use crate::tensor::{numel, Tensor};

/// Denominator epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        dims: GemmDims,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Ln(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have at least one axis")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
            Op::Leaf,
        )
    }

    /// Records a leaf whose gradient is tracked regardless of the tensor's flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), true, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(invalid(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a single-element var.
    pub fn item(&self, v: Var) -> f64 {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "item() on var of shape {:?}", self.shape(v));
        d[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes hold consistent shapes")
    }

    /// Gradient of the last `backward` root with respect to `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), data, rg, op)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a `[d]` vector to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if self.shape(bias) != [d] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), data, rg, Op::AddRow(x, bias)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    /// Natural logarithm; inputs must be positive.
    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.map(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    // ---- row-wise ----------------------------------------------------------

    /// Softmax over the trailing axis, with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let d = last_dim(self.shape(a));
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let d = last_dim(self.shape(a));
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x = *x - max - lse;
            }
        }
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), data, rg, Op::LogSoftmax(a))
    }

    /// Per-row normalization over the trailing axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = last_dim(self.shape(x));
        if d < 2 {
            return Err(invalid(format!("layer_norm needs a trailing extent >= 2, got {d}")));
        }
        if self.shape(gain) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(bias)));
        }
        let rows = self.data(x).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        let (g, b) = (self.data(gain), self.data(bias));
        for row in self.data(x).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Mean(a))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.sub(a, b)?;
        let sq = self.mul(diff, diff)?;
        Ok(self.mean(sq))
    }

    /// `sum_j weights[j] * inputs[j]`, accumulated left to right.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| invalid("weighted_sum of zero inputs"))?;
        if self.shape(weights) != [inputs.len()] {
            return Err(shape_err(
                "weighted_sum",
                &[inputs.len()],
                self.shape(weights),
            ));
        }
        for &v in &inputs[1..] {
            self.same_shape("weighted_sum", first, v)?;
        }
        let w = self.data(weights);
        let mut out = vec![0.0; self.data(first).len()];
        for (&v, &wj) in inputs.iter().zip(w) {
            for (o, &x) in out.iter_mut().zip(self.data(v)) {
                *o += wj * x;
            }
        }
        let rg = self.rg(weights) || inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            self.shape(first).to_vec(),
            out,
            rg,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
        ))
    }

    // ---- products and layout ----------------------------------------------

    /// Batched product `[.., p, q] x [.., q, r]`. A rank-2 right operand is
    /// shared across all leading batch entries.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let (p, q) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (q2, r) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if q != q2 || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(shape_err("matmul", sa, sb));
        }
        let dims = GemmDims {
            batch: lead.iter().product(),
            p,
            q,
            r,
            shared_rhs,
        };
        let mut shape = lead.to_vec();
        shape.extend([p, r]);
        let data = gemm_nn(self.data(a), self.data(b), dims, Exec::auto(dims.work()));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, data, rg, Op::MatMul { a, b, dims }))
    }

    /// `out[i] = src[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() {
            return Err(invalid(format!(
                "gather index of length {} cannot fill shape {shape:?}",
                index.len()
            )));
        }
        let s = self.data(src);
        if let Some(bad) = index.iter().find(|&&i| i >= s.len()) {
            return Err(invalid(format!(
                "gather index {bad} out of range for {} values",
                s.len()
            )));
        }
        let data = index.iter().map(|&i| s[i]).collect();
        let rg = self.rg(src);
        Ok(self.push(shape, data, rg, Op::Gather { src, index }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.data(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape, data, rg, Op::Reshape(a)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(invalid(format!("transpose_last needs rank >= 2, got {s:?}")));
        }
        let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let mut index = Vec::with_capacity(batch * p * q);
        for bt in 0..batch {
            for j in 0..q {
                for i in 0..p {
                    index.push(bt * p * q + i * q + j);
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([q, p]);
        self.gather(a, index, shape)
    }

    /// Row lookup: `table` is `[rows, d]`, output is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(invalid(format!("embedding table must be rank 2, got {ts:?}")));
        }
        if numel(lead) != ids.len() {
            return Err(invalid(format!(
                "{} ids cannot fill leading shape {lead:?}",
                ids.len()
            )));
        }
        let (rows, d) = (ts[0], ts[1]);
        let mut index = Vec::with_capacity(ids.len() * d);
        for (pos, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(invalid(format!(
                    "id {id} at position {pos} out of range for table of {rows} rows"
                )));
            }
            index.extend(id * d..(id + 1) * d);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        self.gather(table, index, shape)
    }

    /// `[b, s, h*e]` to `[b, h, s, e]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(invalid(format!("cannot split {s:?} into {heads} heads")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let e = d / heads;
        let mut index = Vec::with_capacity(b * n * d);
        for bt in 0..b {
            for h in 0..heads {
                for i in 0..n {
                    index.extend((0..e).map(|c| (bt * n + i) * d + h * e + c));
                }
            }
        }
        self.gather(x, index, vec![b, heads, n, e])
    }

    /// `[b, h, s, e]` to `[b, s, h*e]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(invalid(format!("merge_heads needs rank 4, got {s:?}")));
        }
        let (b, heads, n, e) = (s[0], s[1], s[2], s[3]);
        let mut index = Vec::with_capacity(b * n * heads * e);
        for bt in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    index.extend((0..e).map(|c| ((bt * heads + h) * n + i) * e + c));
                }
            }
        }
        self.gather(x, index, vec![b, n, heads * e])
    }

    /// Slice `[b, h, s, t]` at head `head`, giving `[b, s, t]`.
    pub fn select_head(&mut self, x: Var, head: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || head >= s[1] {
            return Err(invalid(format!("cannot select head {head} from {s:?}")));
        }
        let (b, heads, n, t) = (s[0], s[1], s[2], s[3]);
        let mut index = Vec::with_capacity(b * n * t);
        for bt in 0..b {
            let base = (bt * heads + head) * n * t;
            index.extend(base..base + n * t);
        }
        self.gather(x, index, vec![b, n, t])
    }

    /// Slice `[b, s, d]` at sequence position `pos`, giving `[b, d]`.
    pub fn select_position(&mut self, x: Var, pos: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pos >= s[1] {
            return Err(invalid(format!("cannot select position {pos} from {s:?}")));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut index = Vec::with_capacity(b * d);
        for bt in 0..b {
            let base = (bt * n + pos) * d;
            index.extend(base..base + d);
        }
        self.gather(x, index, vec![b, d])
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root. Gradients from any previous sweep are
    /// discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| invalid(format!("root {root:?} is not on this tape")))?;
        if node.data.len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar root, got shape {:?}",
                node.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                propagate(&self.nodes, &mut grads, i, &g);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Adds `f`'s contribution into the gradient slot of `v` if it tracks gradients.
fn accum(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    v: Var,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].data.len()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn propagate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    let node = &nodes[i];
    let val = |v: Var| nodes[v.0].data.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accum(nodes, grads, *a, |d| add_into(d, g));
            accum(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accum(nodes, grads, *a, |d| add_into(d, g));
            accum(nodes, grads, *b, |d| {
                for (d, gv) in d.iter_mut().zip(g) {
                    *d -= gv;
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            accum(nodes, grads, *a, |d| {
                for ((d, gv), y) in d.iter_mut().zip(g).zip(bv) {
                    *d += gv * y;
                }
            });
            accum(nodes, grads, *b, |d| {
                for ((d, gv), x) in d.iter_mut().zip(g).zip(av) {
                    *d += gv * x;
                }
            });
        }
        Op::Scale(a, c) => accum(nodes, grads, *a, |d| {
            for (d, gv) in d.iter_mut().zip(g) {
                *d += c * gv;
            }
        }),
        Op::AddRow(x, bias) => {
            accum(nodes, grads, *x, |d| add_into(d, g));
            let n = nodes[bias.0].data.len();
            accum(nodes, grads, *bias, |d| {
                for row in g.chunks(n) {
                    add_into(d, row);
                }
            });
        }
        Op::MatMul { a, b, dims } => {
            let exec = Exec::auto(dims.work());
            if nodes[a.0].requires_grad {
                let ga = gemm_nt(g, val(*b), *dims, exec);
                accum(nodes, grads, *a, |d| add_into(d, &ga));
            }
            if nodes[b.0].requires_grad {
                let gb = gemm_tn(val(*a), g, *dims, exec);
                accum(nodes, grads, *b, |d| add_into(d, &gb));
            }
        }
        Op::Gather { src, index } => accum(nodes, grads, *src, |d| {
            for (&ix, gv) in index.iter().zip(g) {
                d[ix] += gv;
            }
        }),
        Op::Reshape(a) => accum(nodes, grads, *a, |d| add_into(d, g)),
        Op::Relu(a) => {
            let x = val(*a);
            accum(nodes, grads, *a, |d| {
                for ((d, gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            })
        }
        Op::Gelu(a) => {
            let x = val(*a);
            accum(nodes, grads, *a, |d| {
                for ((d, gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    let t = (GELU_C * (xv + GELU_K * xv * xv * xv)).tanh();
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * xv * xv);
                    *d += gv * (0.5 * (1.0 + t) + 0.5 * xv * dt);
                }
            })
        }
        Op::Ln(a) => {
            let x = val(*a);
            accum(nodes, grads, *a, |d| {
                for ((d, gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    *d += gv / xv;
                }
            })
        }
        Op::ClampMin(a, lo) => {
            let x = val(*a);
            accum(nodes, grads, *a, |d| {
                for ((d, gv), &xv) in d.iter_mut().zip(g).zip(x) {
                    if xv > *lo {
                        *d += gv;
                    }
                }
            })
        }
        Op::Softmax(a) => {
            let y = &node.data;
            let n = last_dim(&node.shape);
            accum(nodes, grads, *a, |d| {
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv += yv * (gv - dot);
                    }
                }
            })
        }
        Op::LogSoftmax(a) => {
            let y = &node.data;
            let n = last_dim(&node.shape);
            accum(nodes, grads, *a, |d| {
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let total: f64 = gr.iter().sum();
                    for ((dv, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *dv += gv - yv.exp() * total;
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = last_dim(&node.shape);
            let gv = val(*gain);
            accum(nodes, grads, *gain, |d| {
                for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                    for ((dv, a), h) in d.iter_mut().zip(gr).zip(hr) {
                        *dv += a * h;
                    }
                }
            });
            accum(nodes, grads, *bias, |d| {
                for gr in g.chunks(n) {
                    add_into(d, gr);
                }
            });
            accum(nodes, grads, *x, |d| {
                let nf = n as f64;
                for (((dr, gr), hr), is) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(xhat.chunks(n))
                    .zip(inv_std)
                {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j];
                    }
                    for j in 0..n {
                        let dh = gr[j] * gv[j];
                        dr[j] += is / nf * (nf * dh - sum_dh - hr[j] * sum_dh_h);
                    }
                }
            });
        }
        Op::Sum(a) => accum(nodes, grads, *a, |d| {
            for dv in d.iter_mut() {
                *dv += g[0];
            }
        }),
        Op::Mean(a) => {
            let n = nodes[a.0].data.len() as f64;
            accum(nodes, grads, *a, |d| {
                for dv in d.iter_mut() {
                    *dv += g[0] / n;
                }
            })
        }
        Op::WeightedSum { inputs, weights } => {
            let w = val(*weights);
            for (&v, &wj) in inputs.iter().zip(w) {
                accum(nodes, grads, v, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += wj * gv;
                    }
                });
            }
            accum(nodes, grads, *weights, |d| {
                for (dv, &v) in d.iter_mut().zip(inputs) {
                    *dv += g.iter().zip(val(v)).map(|(a, b)| a * b).sum::<f64>();
                }
            });
        }
    }
}
