use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::dense::{check_shape, ParamId, ParamStore, Tensor};
use super::TensorError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Handle to a node of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

impl Var {
    pub fn graph_id(&self) -> u64 {
        self.graph
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LogClamped(usize, f64),
    LayerNorm { x: usize, gain: usize, bias: usize },
    SliceCols { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    SelectRows(usize, Vec<usize>),
    GatherRows(usize, Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    CrossEntropyRows(usize, Vec<usize>),
    JsDivergence(Vec<usize>, f64),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Op-specific forward cache (softmax probabilities, normalized rows, ...).
    aux: Vec<f64>,
}

impl Node {
    fn width(&self) -> usize {
        *self.shape.last().unwrap()
    }
    fn rows(&self) -> usize {
        self.value.len() / self.width()
    }
}

/// Reverse-mode computation graph (a Wengert list). Nodes are appended in
/// evaluation order, so insertion order is a topological order.
///
/// A graph is single-use: [`Graph::backward`] consumes it.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
    visits: Vec<u32>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward traversal.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    leaves: HashMap<usize, Vec<f64>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a differentiable leaf, `None` if the loss
    /// does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.graph != self.graph {
            return None;
        }
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .get(&id)
            .and_then(|n| self.leaves.get(n))
            .map(Vec::as_slice)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            visits: Vec::new(),
            consumed: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// How many times the last backward traversal visited each node.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.id)
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        aux: Vec<f64>,
    ) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            aux,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            graph: self.id,
        })
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[self.idx(v).expect("var from another graph")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("var from another graph")].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[self.idx(v).expect("var from another graph")];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let vals = self.value(v);
        assert_eq!(vals.len(), 1, "not a scalar");
        vals[0]
    }

    // ---- leaves -------------------------------------------------------

    /// Constant input: no gradient is tracked for it.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, vec![])
    }

    /// Differentiable leaf; its gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true, vec![])
    }

    /// Differentiable leaf bound to a stored parameter. Repeated calls for the
    /// same id return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        if let Some(&n) = self.params.get(&id) {
            return Ok(Var {
                id: n,
                graph: self.id,
            });
        }
        let v = self.leaf(store.get(id))?;
        self.params.insert(id, v.id);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: na.shape.clone(),
                right: nb.shape.clone(),
            });
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let out = matmul_raw(&na.value, &nb.value, m, k, n);
        let rg = na.requires_grad || nb.requires_grad;
        self.push(vec![m, n], out, Op::MatMul(a.id, b.id), rg, vec![])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        if na.shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                shape: na.shape.clone(),
            });
        }
        let (r, c) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = na.value[i * c + j];
            }
        }
        let rg = na.requires_grad;
        self.push(vec![c, r], out, Op::Transpose(a.id), rg, vec![])
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        same_shape("add", na, nb)?;
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x + y).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push(shape, out, Op::Add(a.id, b.id), rg, vec![])
    }

    /// `a[.., n] + row[n]`, broadcasting the row over every leading index.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (na, nr) = (self.node(a)?, self.node(row)?);
        let w = na.width();
        if nr.value.len() != w {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: na.shape.clone(),
                right: nr.shape.clone(),
            });
        }
        let out = na
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + nr.value[i % w])
            .collect();
        let rg = na.requires_grad || nr.requires_grad;
        let shape = na.shape.clone();
        self.push(shape, out, Op::AddRow(a.id, row.id), rg, vec![])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        same_shape("mul", na, nb)?;
        let out = na.value.iter().zip(&nb.value).map(|(x, y)| x * y).collect();
        let rg = na.requires_grad || nb.requires_grad;
        let shape = na.shape.clone();
        self.push(shape, out, Op::Mul(a.id, b.id), rg, vec![])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|x| x * s).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(shape, out, Op::Scale(a.id, s), rg, vec![])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let out = na
            .value
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::erf(x / SQRT_2)))
            .collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(shape, out, Op::Gelu(a.id), rg, vec![])
    }

    /// `ln(max(a, floor))`; the derivative is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let out = na.value.iter().map(|&x| x.max(floor).ln()).collect();
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(shape, out, Op::LogClamped(a.id, floor), rg, vec![])
    }

    // ---- row-wise ---------------------------------------------------------

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        if na.value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let w = na.width();
        let mut out = na.value.clone();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let (shape, rg) = (na.shape.clone(), na.requires_grad);
        self.push(shape, out, Op::Softmax(a.id), rg, vec![])
    }

    /// Per-row normalization to zero mean / unit variance followed by an
    /// affine map. `eps` is added to the variance inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (nx, ng, nb) = (self.node(x)?, self.node(gain)?, self.node(bias)?);
        let d = nx.width();
        if ng.value.len() != d || nb.value.len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: nx.shape.clone(),
                right: ng.shape.clone(),
            });
        }
        let rows = nx.rows();
        let mut out = vec![0.0; nx.value.len()];
        // aux = [xhat (rows*d) | inv_std (rows)]
        let mut aux = vec![0.0; nx.value.len() + rows];
        for r in 0..rows {
            let row = &nx.value[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            aux[nx.value.len() + r] = inv_std;
            for j in 0..d {
                let xhat = (row[j] - mean) * inv_std;
                aux[r * d + j] = xhat;
                out[r * d + j] = ng.value[j] * xhat + nb.value[j];
            }
        }
        let rg = nx.requires_grad || ng.requires_grad || nb.requires_grad;
        let shape = nx.shape.clone();
        let op = Op::LayerNorm {
            x: x.id,
            gain: gain.id,
            bias: bias.id,
        };
        self.push(shape, out, op, rg, aux)
    }

    /// Per-row cross-entropy `-log softmax(logits[r])[targets[r]]`, computed
    /// with log-sum-exp. Returns a vector of length `rows`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let nl = self.node(logits)?;
        let (rows, c) = (nl.rows(), nl.width());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_rows",
                left: nl.shape.clone(),
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_rows",
                index: t,
                bound: c,
            });
        }
        if nl.value.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "cross_entropy_rows",
            });
        }
        let mut probs = nl.value.clone();
        let mut out = Vec::with_capacity(rows);
        for (r, row) in nl.value.chunks(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            out.push(lse - row[targets[r]]);
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let rg = nl.requires_grad;
        self.push(
            vec![rows],
            out,
            Op::CrossEntropyRows(logits.id, targets.to_vec()),
            rg,
            probs,
        )
    }

    /// Generalized Jensen-Shannon divergence of `K >= 2` same-shape
    /// distributions over the last axis:
    /// `1/(K*rows) * sum_k sum KL(p_k || m)` with `m` the elementwise mean and
    /// logs taken of `max(., floor)`.
    ///
    /// Every cross-input sum is taken in sorted order, so the value and the
    /// gradients are exactly invariant under permutation of `inputs`.
    pub fn js_divergence(&mut self, inputs: &[Var], floor: f64) -> Result<Var, TensorError> {
        if inputs.len() < 2 {
            return Err(TensorError::Empty("js_divergence"));
        }
        let shape = self.node(inputs[0])?.shape.clone();
        let mut rg = false;
        for &p in inputs {
            let np = self.node(p)?;
            if np.shape != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "js_divergence",
                    left: shape,
                    right: np.shape.clone(),
                });
            }
            rg |= np.requires_grad;
        }
        let k = inputs.len();
        let n = shape.iter().product::<usize>();
        let rows = n / shape.last().unwrap();
        let vals: Vec<&[f64]> = inputs.iter().map(|p| self.nodes[p.id].value.as_slice()).collect();

        let mut mean = vec![0.0; n];
        let mut column = vec![0.0; k];
        for (j, m) in mean.iter_mut().enumerate() {
            for (c, v) in column.iter_mut().zip(&vals) {
                *c = v[j];
            }
            // offset from the minimum so identical inputs give a bit-exact mean
            column.sort_unstable_by(f64::total_cmp);
            let lo = column[0];
            let spread: f64 = column.iter().map(|v| v - lo).sum();
            *m = lo + spread / k as f64;
        }
        let mut kls: Vec<f64> = vals
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&mean)
                    .map(|(&p, &m)| p * (p.max(floor).ln() - m.max(floor).ln()))
                    .sum()
            })
            .collect();
        let value = sorted_sum(&mut kls) / (k * rows) as f64;
        let ids = inputs.iter().map(|p| p.id).collect();
        self.push(vec![1], vec![value], Op::JsDivergence(ids, floor), rg, mean)
    }

    // ---- structural -------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        if na.shape.len() != 2 || start >= end || end > na.shape[1] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: *na.shape.last().unwrap(),
            });
        }
        let (r, c, w) = (na.shape[0], na.shape[1], end - start);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&na.value[i * c + start..i * c + end]);
        }
        let rg = na.requires_grad;
        self.push(vec![r, w], out, Op::SliceCols { src: a.id, start }, rg, vec![])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self.node(*parts.first().ok_or(TensorError::Empty("concat_cols"))?)?;
        if first.shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "concat_cols",
                shape: first.shape.clone(),
            });
        }
        let r = first.shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut rg = false;
        for &p in parts {
            let np = self.node(p)?;
            if np.shape.len() != 2 || np.shape[0] != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r],
                    right: np.shape.clone(),
                });
            }
            widths.push(np.shape[1]);
            rg |= np.requires_grad;
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.id].value[i * w..(i + 1) * w]);
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(vec![r, total], out, Op::ConcatCols(ids), rg, vec![])
    }

    /// Stacks same-length vectors into a `[k, n]` matrix.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let n = self
            .node(*parts.first().ok_or(TensorError::Empty("stack_rows"))?)?
            .value
            .len();
        let mut out = Vec::with_capacity(parts.len() * n);
        let mut rg = false;
        for &p in parts {
            let np = self.node(p)?;
            if np.value.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    left: vec![n],
                    right: np.shape.clone(),
                });
            }
            out.extend_from_slice(&np.value);
            rg |= np.requires_grad;
        }
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(vec![parts.len(), n], out, Op::StackRows(ids), rg, vec![])
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let (n, w) = (na.rows(), na.width());
        check_shape(&[rows.len()])?;
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "select_rows",
                    index: r,
                    bound: n,
                });
            }
            out.extend_from_slice(&na.value[r * w..(r + 1) * w]);
        }
        let rg = na.requires_grad;
        self.push(vec![rows.len(), w], out, Op::SelectRows(a.id, rows.to_vec()), rg, vec![])
    }

    /// Row lookup `table[ids[i]]`; gradients scatter-add back into the table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let nt = self.node(table)?;
        let (v, d) = (nt.rows(), nt.width());
        check_shape(&[ids.len()])?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: v,
                });
            }
            out.extend_from_slice(&nt.value[i * d..(i + 1) * d]);
        }
        let rg = nt.requires_grad;
        self.push(vec![ids.len(), d], out, Op::GatherRows(table.id, ids.to_vec()), rg, vec![])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        check_shape(shape)?;
        let na = self.node(a)?;
        if shape.iter().product::<usize>() != na.value.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: na.shape.clone(),
                right: shape.to_vec(),
            });
        }
        let (out, rg) = (na.value.clone(), na.requires_grad);
        self.push(shape.to_vec(), out, Op::Reshape(a.id), rg, vec![])
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let (s, rg) = (na.value.iter().sum(), na.requires_grad);
        self.push(vec![1], vec![s], Op::Sum(a.id), rg, vec![])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let s = na.value.iter().sum::<f64>() / na.value.len() as f64;
        let rg = na.requires_grad;
        self.push(vec![1], vec![s], Op::Mean(a.id), rg, vec![])
    }

    /// Mean over rows: `[r, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let na = self.node(a)?;
        let (r, w) = (na.rows(), na.width());
        let mut out = vec![0.0; w];
        for row in na.value.chunks(w) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = na.requires_grad;
        self.push(vec![w], out, Op::MeanRows(a.id), rg, vec![])
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Consumes the graph: any later op or
    /// second backward is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.nodes[root].shape.clone()));
        }
        self.consumed = true;
        self.visits = vec![0; self.nodes.len()];

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        if self.nodes[root].requires_grad {
            grads[root] = Some(vec![1.0]);
        }
        let mut leaves = HashMap::new();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.visits[i] += 1;
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, g);
                }
                Op::MatMul(a, b) => {
                    let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                    let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
                    if na.requires_grad {
                        let da = acc(&mut grads, *a, m * k);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let brow = &nb.value[p * n..(p + 1) * n];
                                da[r * k + p] += dot(grow, brow);
                            }
                        }
                    }
                    if nb.requires_grad {
                        let db = acc(&mut grads, *b, k * n);
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let av = na.value[r * k + p];
                                if av != 0.0 {
                                    axpy(&mut db[p * n..(p + 1) * n], av, grow);
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[*a].requires_grad {
                        let (c, r) = (node.shape[0], node.shape[1]);
                        let da = acc(&mut grads, *a, r * c);
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &x in [a, b] {
                        if self.nodes[x].requires_grad {
                            axpy(acc(&mut grads, x, g.len()), 1.0, &g);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if self.nodes[*a].requires_grad {
                        axpy(acc(&mut grads, *a, g.len()), 1.0, &g);
                    }
                    if self.nodes[*row].requires_grad {
                        let w = node.width();
                        let dr = acc(&mut grads, *row, w);
                        for chunk in g.chunks(w) {
                            axpy(dr, 1.0, chunk);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                    if na.requires_grad {
                        let da = acc(&mut grads, *a, g.len());
                        for ((d, gv), bv) in da.iter_mut().zip(&g).zip(&nb.value) {
                            *d += gv * bv;
                        }
                    }
                    if nb.requires_grad {
                        let db = acc(&mut grads, *b, g.len());
                        for ((d, gv), av) in db.iter_mut().zip(&g).zip(&na.value) {
                            *d += gv * av;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    axpy(acc(&mut grads, *a, g.len()), *s, &g);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let da = acc(&mut grads, *a, g.len());
                    for ((d, gv), &xv) in da.iter_mut().zip(&g).zip(x) {
                        let cdf = 0.5 * (1.0 + libm::erf(xv / SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * xv * xv).exp();
                        *d += gv * (cdf + xv * pdf);
                    }
                }
                Op::LogClamped(a, floor) => {
                    let x = &self.nodes[*a].value;
                    let da = acc(&mut grads, *a, g.len());
                    for ((d, gv), &xv) in da.iter_mut().zip(&g).zip(x) {
                        if xv > *floor {
                            *d += gv / xv;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let w = node.width();
                    let y = &node.value;
                    let da = acc(&mut grads, *a, g.len());
                    for r in 0..y.len() / w {
                        let (ys, gs) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                        let inner = dot(ys, gs);
                        for j in 0..w {
                            da[r * w + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let d = node.width();
                    let rows = node.rows();
                    let n = node.value.len();
                    let (xhat, inv_std) = node.aux.split_at(n);
                    let gain_v = &self.nodes[*gain].value;
                    if self.nodes[*gain].requires_grad {
                        let dg = acc(&mut grads, *gain, d);
                        for r in 0..rows {
                            for j in 0..d {
                                dg[j] += g[r * d + j] * xhat[r * d + j];
                            }
                        }
                    }
                    if self.nodes[*bias].requires_grad {
                        let db = acc(&mut grads, *bias, d);
                        for chunk in g.chunks(d) {
                            axpy(db, 1.0, chunk);
                        }
                    }
                    if self.nodes[*x].requires_grad {
                        let dx = acc(&mut grads, *x, n);
                        let mut dxhat = vec![0.0; d];
                        for r in 0..rows {
                            let xh = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = g[r * d + j] * gain_v[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dot(&dxhat, xh) / d as f64;
                            for j in 0..d {
                                dx[r * d + j] += inv_std[r] * (dxhat[j] - m1 - xh[j] * m2);
                            }
                        }
                    }
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let c = self.nodes[*logits].width();
                    let probs = &node.aux;
                    let dl = acc(&mut grads, *logits, probs.len());
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[r * c + j] += g[r] * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::JsDivergence(inputs, floor) => {
                    let mean = &node.aux;
                    let rows = mean.len() / self.nodes[inputs[0]].width();
                    let scale = g[0] / (inputs.len() * rows) as f64;
                    for &p in inputs {
                        if !self.nodes[p].requires_grad {
                            continue;
                        }
                        let pv = &self.nodes[p].value;
                        let dp = acc(&mut grads, p, pv.len());
                        for ((d, &x), &m) in dp.iter_mut().zip(pv).zip(mean) {
                            let lp = x.max(*floor).ln() + if x > *floor { 1.0 } else { 0.0 };
                            let lm = m.max(*floor).ln() + if m > *floor { 1.0 } else { 0.0 };
                            *d += scale * (lp - lm);
                        }
                    }
                }
                Op::SliceCols { src, start } => {
                    let (r, w) = (node.shape[0], node.shape[1]);
                    let c = self.nodes[*src].shape[1];
                    let ds = acc(&mut grads, *src, r * c);
                    for i in 0..r {
                        axpy(&mut ds[i * c + start..i * c + start + w], 1.0, &g[i * w..(i + 1) * w]);
                    }
                }
                Op::ConcatCols(parts) => {
                    let (r, total) = (node.shape[0], node.shape[1]);
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.nodes[p].shape[1];
                        if self.nodes[p].requires_grad {
                            let dp = acc(&mut grads, p, r * w);
                            for i in 0..r {
                                axpy(
                                    &mut dp[i * w..(i + 1) * w],
                                    1.0,
                                    &g[i * total + offset..i * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::StackRows(parts) => {
                    let n = node.width();
                    for (k, &p) in parts.iter().enumerate() {
                        if self.nodes[p].requires_grad {
                            axpy(acc(&mut grads, p, n), 1.0, &g[k * n..(k + 1) * n]);
                        }
                    }
                }
                Op::SelectRows(a, rows) | Op::GatherRows(a, rows) => {
                    let w = node.width();
                    let len = self.nodes[*a].value.len();
                    let da = acc(&mut grads, *a, len);
                    for (k, &r) in rows.iter().enumerate() {
                        axpy(&mut da[r * w..(r + 1) * w], 1.0, &g[k * w..(k + 1) * w]);
                    }
                }
                Op::Reshape(a) => {
                    axpy(acc(&mut grads, *a, g.len()), 1.0, &g);
                }
                Op::Sum(a) => {
                    let len = self.nodes[*a].value.len();
                    acc(&mut grads, *a, len).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Mean(a) => {
                    let len = self.nodes[*a].value.len();
                    let s = g[0] / len as f64;
                    acc(&mut grads, *a, len).iter_mut().for_each(|d| *d += s);
                }
                Op::MeanRows(a) => {
                    let len = self.nodes[*a].value.len();
                    let w = g.len();
                    let s = 1.0 / (len / w) as f64;
                    let da = acc(&mut grads, *a, len);
                    for chunk in da.chunks_mut(w) {
                        axpy(chunk, s, &g);
                    }
                }
            }
        }

        Ok(Gradients {
            graph: self.id,
            leaves,
            params: self.params.clone(),
        })
    }
}

fn same_shape(op: &'static str, a: &Node, b: &Node) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(orow, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
}
