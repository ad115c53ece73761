//! Dynamic computation tape with reverse-mode gradients.

use std::collections::HashMap;

use crate::nn::Tensor;
use crate::vmf;

/// Value used to disable logits before a softmax.
pub const MASK_VALUE: f64 = -1e30;

/// Handle to a registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors with stable insertion order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(&self.tensors)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// One zeroed gradient buffer per parameter, in registration order.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect()
    }

    /// `params[i] += scale * deltas[i]` for every tensor.
    pub fn add_scaled(&mut self, deltas: &[Tensor], scale: f64) {
        assert_eq!(deltas.len(), self.tensors.len());
        for (p, d) in self.tensors.iter_mut().zip(deltas) {
            p.add_scaled(d, scale);
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NodeId(usize);

enum Op {
    Const,
    Param(ParamId),
    EmbedRows { table: ParamId, ids: Vec<usize> },
    RowSlice { src: NodeId, row: usize },
    ColSlice { src: NodeId, start: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SoftmaxRows(NodeId),
    L2NormRow(NodeId),
    VmfReparam { mu: NodeId, z: Vec<f64> },
    MaskColsFrom { src: NodeId, start: usize },
    NegLogSupport { logits: NodeId, support: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Eagerly evaluated computation tape over a fixed parameter set.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match &self.nodes[id.0].op {
            // Parameter nodes alias the registry instead of cloning.
            Op::Param(pid) => self.params.get(*pid),
            _ => &self.nodes[id.0].value,
        }
    }

    /// The scalar held by a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let t = self.value(id);
        assert_eq!((t.rows(), t.cols()), (1, 1), "node is not a scalar");
        t.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const, value)
    }

    pub fn param(&mut self, pid: ParamId) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = self.push(Op::Param(pid), Tensor::zeros(0, 0));
        self.param_nodes.insert(pid, id);
        id
    }

    /// Gathers rows of an embedding table by id.
    pub fn embed_rows(&mut self, table: ParamId, ids: &[usize]) -> NodeId {
        let t = self.params.get(table);
        let mut out = Tensor::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        self.push(
            Op::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
            out,
        )
    }

    pub fn row_slice(&mut self, src: NodeId, row: usize) -> NodeId {
        let v = self.value(src);
        let out = Tensor::from_vec(1, v.cols(), v.row(row).to_vec());
        self.push(Op::RowSlice { src, row }, out)
    }

    pub fn col_slice(&mut self, src: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(src);
        assert!(start + len <= v.cols());
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(Op::ColSlice { src, start }, out)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(
            (va.rows(), va.cols()),
            (vb.rows(), vb.cols()),
            "elementwise shape mismatch"
        );
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.elementwise(a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.elementwise(a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.elementwise(a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| c * x).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Scale(a, c), out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.rows(), "matmul inner dimension mismatch");
        let out = matmul(va, vb);
        self.push(Op::MatMul(a, b), out)
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols(), vb.cols(), "matmul_nt inner dimension mismatch");
        let out = matmul_nt(va, vb);
        self.push(Op::MatMulNT(a, b), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| sigmoid(*x)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Sigmoid(a), out)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        for r in 0..rows {
            let mut at = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[at..at + v.cols()].copy_from_slice(v.row(r));
                at += v.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut at = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows col mismatch");
            for r in 0..v.rows() {
                out.row_mut(at).copy_from_slice(v.row(r));
                at += 1;
            }
        }
        self.push(Op::ConcatRows(parts.to_vec()), out)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor::zeros(va.rows(), va.cols());
        for r in 0..va.rows() {
            let row = va.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.row_mut(r) {
                *o /= sum;
            }
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    /// Euclidean normalization of a single row vector.
    pub fn l2_normalize_row(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), 1, "l2_normalize_row expects a row vector");
        let norm = va.sq_norm().sqrt().max(1e-12);
        let data = va.data().iter().map(|x| x / norm).collect();
        let out = Tensor::from_vec(1, va.cols(), data);
        self.push(Op::L2NormRow(a), out)
    }

    /// Householder-reflected vMF noise: maps a unit row `mu` to the sample
    /// `reparam_apply(mu, z)`; `z` is treated as a constant.
    pub fn vmf_reparam(&mut self, mu: NodeId, z: Vec<f64>) -> NodeId {
        let vmu = self.value(mu);
        assert_eq!(vmu.rows(), 1);
        assert_eq!(vmu.cols(), z.len());
        let v = vmf::reparam_apply(vmu.data(), &z);
        let out = Tensor::row_vector(v);
        self.push(Op::VmfReparam { mu, z }, out)
    }

    /// Replaces every column at index ≥ `start` with [`MASK_VALUE`].
    pub fn mask_cols_from(&mut self, src: NodeId, start: usize) -> NodeId {
        let v = self.value(src);
        let mut out = v.clone();
        for r in 0..out.rows() {
            for x in out.row_mut(r)[start.min(v.cols())..].iter_mut() {
                *x = MASK_VALUE;
            }
        }
        self.push(Op::MaskColsFrom { src, start }, out)
    }

    /// `-log Σ_{s in support} softmax(logits)_s` for a 1×n logits row,
    /// computed in log space as `logsumexp(all) - logsumexp(support)`.
    pub fn neg_log_support(&mut self, logits: NodeId, mut support: Vec<usize>) -> NodeId {
        let v = self.value(logits);
        assert_eq!(v.rows(), 1, "neg_log_support expects a logits row");
        assert!(!support.is_empty(), "empty support set");
        support.sort_unstable();
        support.dedup();
        let row = v.row(0);
        let lse_all = logsumexp(row.iter().cloned());
        let lse_sup = logsumexp(support.iter().map(|&s| row[s]));
        let out = Tensor::from_vec(1, 1, vec![lse_all - lse_sup]);
        self.push(Op::NegLogSupport { logits, support }, out)
    }

    /// Reverse pass from a scalar root; gradients accumulate into `grads`
    /// (one buffer per parameter, as from [`ParamSet::zero_grads`]).
    pub fn backward(&self, root: NodeId, grads: &mut [Tensor]) {
        assert_eq!(grads.len(), self.params.len());
        let root_val = self.value(root);
        assert_eq!(
            (root_val.rows(), root_val.cols()),
            (1, 1),
            "backward root must be scalar"
        );
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root.0] = Some(Tensor::from_vec(1, 1, vec![1.0]));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = node_grads[idx].take() else {
                continue;
            };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(pid) => {
                    let pid = pid.0;
                    assert_eq!(
                        (grads[pid].rows(), grads[pid].cols()),
                        (g.rows(), g.cols()),
                        "gradient shape mismatch for parameter `{}`",
                        self.params.name(ParamId(pid))
                    );
                    grads[pid].add_scaled(&g, 1.0);
                }
                Op::EmbedRows { table, ids } => {
                    let gt = &mut grads[table.0];
                    for (i, &id) in ids.iter().enumerate() {
                        for (a, b) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                Op::RowSlice { src, row } => {
                    let v = self.value(*src);
                    let d = self.grad_buf(&mut node_grads, *src, v.rows(), v.cols());
                    for (a, b) in d.row_mut(*row).iter_mut().zip(g.row(0)) {
                        *a += b;
                    }
                }
                Op::ColSlice { src, start } => {
                    let v = self.value(*src);
                    let d = self.grad_buf(&mut node_grads, *src, v.rows(), v.cols());
                    for r in 0..g.rows() {
                        for (c, b) in g.row(r).iter().enumerate() {
                            d.row_mut(r)[start + c] += b;
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut node_grads, *a, &g, 1.0);
                    self.accumulate(&mut node_grads, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut node_grads, *a, &g, 1.0);
                    self.accumulate(&mut node_grads, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).clone(), self.value(*b).clone());
                    let da = self.grad_buf(&mut node_grads, *a, va.rows(), va.cols());
                    for (x, (gg, y)) in da.data_mut().iter_mut().zip(g.data().iter().zip(vb.data()))
                    {
                        *x += gg * y;
                    }
                    let db = self.grad_buf(&mut node_grads, *b, vb.rows(), vb.cols());
                    for (x, (gg, y)) in db.data_mut().iter_mut().zip(g.data().iter().zip(va.data()))
                    {
                        *x += gg * y;
                    }
                }
                Op::Scale(a, c) => {
                    self.accumulate(&mut node_grads, *a, &g, *c);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // da += g @ b^T; db += a^T @ g.
                    let da_inc = matmul_nt(&g, vb);
                    let db_inc = matmul_tn(va, &g);
                    self.accumulate(&mut node_grads, *a, &da_inc, 1.0);
                    self.accumulate(&mut node_grads, *b, &db_inc, 1.0);
                }
                Op::MatMulNT(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    // out = a @ b^T: da += g @ b; db += g^T @ a.
                    let da_inc = matmul(&g, vb);
                    let db_inc = matmul_tn(&g, va);
                    self.accumulate(&mut node_grads, *a, &da_inc, 1.0);
                    self.accumulate(&mut node_grads, *b, &db_inc, 1.0);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[idx].value;
                    let va = self.value(*a);
                    let d = self.grad_buf(&mut node_grads, *a, va.rows(), va.cols());
                    for (x, (gg, yy)) in d.data_mut().iter_mut().zip(g.data().iter().zip(y.data()))
                    {
                        *x += gg * (1.0 - yy * yy);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[idx].value;
                    let va = self.value(*a);
                    let d = self.grad_buf(&mut node_grads, *a, va.rows(), va.cols());
                    for (x, (gg, yy)) in d.data_mut().iter_mut().zip(g.data().iter().zip(y.data()))
                    {
                        *x += gg * yy * (1.0 - yy);
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let v = self.value(p);
                        let (rows, cols) = (v.rows(), v.cols());
                        let d = self.grad_buf(&mut node_grads, p, rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                d.row_mut(r)[c] += g.get(r, at + c);
                            }
                        }
                        at += cols;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let v = self.value(p);
                        let (rows, cols) = (v.rows(), v.cols());
                        let d = self.grad_buf(&mut node_grads, p, rows, cols);
                        for r in 0..rows {
                            for (a, b) in d.row_mut(r).iter_mut().zip(g.row(at + r)) {
                                *a += b;
                            }
                        }
                        at += rows;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.clone();
                    let va = self.value(*a);
                    let d = self.grad_buf(&mut node_grads, *a, va.rows(), va.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (x, (gg, yy)) in
                            d.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r)))
                        {
                            *x += yy * (gg - dot);
                        }
                    }
                }
                Op::L2NormRow(a) => {
                    let y = self.nodes[idx].value.clone();
                    let va = self.value(*a);
                    let norm = va.sq_norm().sqrt().max(1e-12);
                    let dot: f64 = g.row(0).iter().zip(y.row(0)).map(|(a, b)| a * b).sum();
                    let cols = va.cols();
                    let d = self.grad_buf(&mut node_grads, *a, 1, cols);
                    for (x, (gg, yy)) in d.data_mut().iter_mut().zip(g.data().iter().zip(y.data()))
                    {
                        *x += (gg - yy * dot) / norm;
                    }
                }
                Op::VmfReparam { mu, z } => {
                    let vmu = self.value(*mu);
                    let dmu = vmf::reparam_vjp(vmu.data(), z, g.data());
                    let inc = Tensor::row_vector(dmu);
                    self.accumulate(&mut node_grads, *mu, &inc, 1.0);
                }
                Op::MaskColsFrom { src, start } => {
                    let v = self.value(*src);
                    let d = self.grad_buf(&mut node_grads, *src, v.rows(), v.cols());
                    let keep = (*start).min(v.cols());
                    for r in 0..v.rows() {
                        for c in 0..keep {
                            d.row_mut(r)[c] += g.get(r, c);
                        }
                    }
                }
                Op::NegLogSupport { logits, support } => {
                    let support = support.clone();
                    let v = self.value(*logits);
                    let row = v.row(0).to_vec();
                    let lse_all = logsumexp(row.iter().cloned());
                    let lse_sup = logsumexp(support.iter().map(|&s| row[s]));
                    let gs = g.data()[0];
                    let cols = row.len();
                    let d = self.grad_buf(&mut node_grads, *logits, 1, cols);
                    for (j, x) in d.data_mut().iter_mut().enumerate() {
                        *x += gs * (row[j] - lse_all).exp();
                    }
                    for &s in &support {
                        d.data_mut()[s] -= gs * (row[s] - lse_sup).exp();
                    }
                }
            }
        }
    }

    fn grad_buf<'a>(
        &self,
        node_grads: &'a mut [Option<Tensor>],
        id: NodeId,
        rows: usize,
        cols: usize,
    ) -> &'a mut Tensor {
        node_grads[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
    }

    fn accumulate(
        &self,
        node_grads: &mut [Option<Tensor>],
        id: NodeId,
        inc: &Tensor,
        scale: f64,
    ) {
        let v = self.value(id);
        let d = self.grad_buf(node_grads, id, v.rows(), v.cols());
        d.add_scaled(inc, scale);
    }
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = b.row(p);
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    let _ = k;
    out
}

/// `a @ b^T`.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), b.rows());
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            out.row_mut(i)[j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T @ b`.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, m, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(m, n);
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let or = out.row_mut(i);
            for (o, &bv) in or.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}
