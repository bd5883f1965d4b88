//! Execution tape: forward operations with recorded nodes for reverse-mode
//! differentiation, plus attention cost instrumentation.
//!
//! Every operation runs through a [`Tape`]. A node is recorded only when at
//! least one input is traced (registered via [`Tape::leaf`]); untraced
//! forwards still update the cost counters but leave no graph behind.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{GradId, Tensor};

/// Attention pair and multiply-accumulate counts.
///
/// `pair_count` counts (query, key) token pairs between grid tokens entering
/// a scaled dot-product, once per attention call regardless of head count.
/// Pairs in which either side is the classification token are tallied
/// separately in `cls_pair_count`. `mac_count` counts scalar
/// multiply-accumulates performed by matrix products.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostCounter {
    pub pair_count: u64,
    pub cls_pair_count: u64,
    pub mac_count: u64,
}

enum OpKind {
    Leaf,
    Constant,
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowVec { x: usize, v: usize },
    Scale { x: usize, c: f64 },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Gelu { x: usize },
    SelectRows { x: usize, indices: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    Reshape { x: usize },
    MeanPoolRows { x: usize, group: usize },
    Sum { x: usize },
    CrossEntropy { logits: usize, target: usize },
    CompactTerm { logits: usize, target: usize },
}

struct Node {
    kind: OpKind,
    value: Tensor,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    frozen: bool,
    cost: CostCounter,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            frozen: false,
            cost: CostCounter::default(),
        }
    }

    pub fn cost(&self) -> CostCounter {
        self.cost
    }

    pub fn reset_cost(&mut self) {
        self.cost = CostCounter::default();
    }

    pub(crate) fn add_pair_count(&mut self, pairs: u64) {
        self.cost.pair_count += pairs;
    }

    pub(crate) fn add_cls_pair_count(&mut self, pairs: u64) {
        self.cost.cls_pair_count += pairs;
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_open(&self, op: &str) -> Result<()> {
        if self.frozen {
            Err(Error::tape(format!("{op} on a tape already consumed by backward")))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, kind: OpKind, value: Tensor) -> usize {
        self.nodes.push(Node { kind, value });
        self.nodes.len() - 1
    }

    /// Registers a tensor as a traced leaf. Gradients flow back to it.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Tensor> {
        self.check_open("leaf")?;
        let id = self.push(OpKind::Leaf, t.detached());
        Ok(t.detached().with_grad(GradId { tape: self.id, node: id }))
    }

    /// Node index for an input, materializing untraced inputs as constants.
    fn input_node(&mut self, t: &Tensor) -> Result<usize> {
        match t.grad_id() {
            Some(g) if g.tape == self.id => Ok(g.node),
            Some(_) => Err(Error::tape("input tensor belongs to a different tape")),
            None => Ok(self.push(OpKind::Constant, t.detached())),
        }
    }

    fn traced(&self, t: &Tensor) -> bool {
        t.grad_id().is_some()
    }

    fn record1(
        &mut self,
        x: &Tensor,
        out: Tensor,
        kind: impl FnOnce(usize) -> OpKind,
    ) -> Result<Tensor> {
        if !self.traced(x) {
            return Ok(out);
        }
        let ix = self.input_node(x)?;
        let id = self.push(kind(ix), out.detached());
        Ok(out.with_grad(GradId { tape: self.id, node: id }))
    }

    fn record2(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        out: Tensor,
        kind: impl FnOnce(usize, usize) -> OpKind,
    ) -> Result<Tensor> {
        if !self.traced(a) && !self.traced(b) {
            return Ok(out);
        }
        let ia = self.input_node(a)?;
        let ib = self.input_node(b)?;
        let id = self.push(kind(ia, ib), out.detached());
        Ok(out.with_grad(GradId { tape: self.id, node: id }))
    }

    fn record3(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        c: &Tensor,
        out: Tensor,
        kind: impl FnOnce(usize, usize, usize) -> OpKind,
    ) -> Result<Tensor> {
        if !self.traced(a) && !self.traced(b) && !self.traced(c) {
            return Ok(out);
        }
        let ia = self.input_node(a)?;
        let ib = self.input_node(b)?;
        let ic = self.input_node(c)?;
        let id = self.push(kind(ia, ib, ic), out.detached());
        Ok(out.with_grad(GradId { tape: self.id, node: id }))
    }

    fn record_many(
        &mut self,
        inputs: &[&Tensor],
        out: Tensor,
        kind: impl FnOnce(Vec<usize>) -> OpKind,
    ) -> Result<Tensor> {
        if !inputs.iter().any(|t| self.traced(t)) {
            return Ok(out);
        }
        let mut ids = Vec::with_capacity(inputs.len());
        for t in inputs {
            ids.push(self.input_node(t)?);
        }
        let id = self.push(kind(ids), out.detached());
        Ok(out.with_grad(GradId { tape: self.id, node: id }))
    }

    // ---- forward operations ----

    /// `a @ b` for rank-2 tensors. Adds `m * n * k` to `mac_count`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_open("matmul")?;
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), m, k, n, &mut out);
        self.cost.mac_count += (m * n * k) as u64;
        let out = Tensor::new(vec![m, n], out)?;
        self.record2(a, b, out, |a, b| OpKind::Matmul { a, b })
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_open("transpose")?;
        if x.rank() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (x.shape()[0], x.shape()[1]);
        let out = Tensor::new(vec![n, m], transpose_data(x.data(), m, n))?;
        self.record1(x, out, |x| OpKind::Transpose { x })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_open("add")?;
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "add",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.record2(a, b, out, |a, b| OpKind::Add { a, b })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.check_open("mul")?;
        if a.shape() != b.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        self.record2(a, b, out, |a, b| OpKind::Mul { a, b })
    }

    /// Adds a rank-1 vector to every row of a rank-2 tensor.
    pub fn add_row_vec(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        self.check_open("add_row_vec")?;
        if x.rank() != 2 || v.rank() != 1 || x.shape()[1] != v.shape()[0] {
            return Err(Error::Dimension {
                op: "add_row_vec",
                lhs: x.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                data.push(x.data()[r * d + c] + v.data()[c]);
            }
        }
        let out = Tensor::new(vec![n, d], data)?;
        self.record2(x, v, out, |x, v| OpKind::AddRowVec { x, v })
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        self.check_open("scale")?;
        let data = x.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record1(x, out, |x| OpKind::Scale { x, c })
    }

    /// Softmax along `axis`. Rejects non-finite input.
    pub fn softmax(&mut self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_open("softmax")?;
        if axis >= x.rank() {
            return Err(Error::Dimension {
                op: "softmax",
                lhs: x.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut data = x.data().to_vec();
        for_each_lane(x.shape(), axis, |start, stride, len| {
            softmax_lane(&mut data, start, stride, len);
        });
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record1(x, out, |x| OpKind::Softmax { x, axis })
    }

    /// Layer normalization over the last axis with affine gain and bias.
    /// The pre-affine output of each lane has mean 0 and population variance
    /// 1 up to `eps`; constant lanes map to 0.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        self.check_open("layer_norm")?;
        let d = *x.shape().last().unwrap();
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = x.numel() / d;
        let mut data = Vec::with_capacity(x.numel());
        for r in 0..rows {
            let lane = &x.data()[r * d..(r + 1) * d];
            let (mean, inv_std) = lane_stats(lane, eps);
            for c in 0..d {
                let normed = (lane[c] - mean) * inv_std;
                data.push(gain.data()[c] * normed + bias.data()[c]);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record3(x, gain, bias, out, |x, gain, bias| OpKind::LayerNorm {
            x,
            gain,
            bias,
            eps,
        })
    }

    /// Elementwise GELU (tanh form).
    pub fn gelu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_open("gelu")?;
        let data = x.data().iter().map(|&v| gelu_value(v)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.record1(x, out, |x| OpKind::Gelu { x })
    }

    /// Gathers rows of a rank-2 tensor in the given order; rows may repeat.
    pub fn select_rows(&mut self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        self.check_open("select_rows")?;
        if x.rank() != 2 {
            return Err(Error::Dimension {
                op: "select_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        if indices.is_empty() {
            return Err(Error::contract("select_rows needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!(
                "select_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        let indices = indices.to_vec();
        self.record1(x, out, move |x| OpKind::SelectRows { x, indices })
    }

    /// Stacks rank-2 tensors with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        self.check_open("concat_rows")?;
        let d = Self::common_extent(parts, 1, "concat_rows")?;
        let rows: usize = parts.iter().map(|p| p.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * d);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let out = Tensor::new(vec![rows, d], data)?;
        self.record_many(parts, out, |parts| OpKind::ConcatRows { parts })
    }

    /// Concatenates rank-2 tensors with equal row counts, left to right.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        self.check_open("concat_cols")?;
        let n = Self::common_extent(parts, 0, "concat_cols")?;
        let cols: usize = parts.iter().map(|p| p.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * cols);
        for r in 0..n {
            for p in parts {
                let pc = p.shape()[1];
                data.extend_from_slice(&p.data()[r * pc..(r + 1) * pc]);
            }
        }
        let out = Tensor::new(vec![n, cols], data)?;
        self.record_many(parts, out, |parts| OpKind::ConcatCols { parts })
    }

    fn common_extent(parts: &[&Tensor], axis: usize, op: &'static str) -> Result<usize> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract(format!("{op} needs at least one part")))?;
        if first.rank() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: first.shape().to_vec(),
                rhs: vec![],
            });
        }
        let extent = first.shape()[axis];
        for p in parts {
            if p.rank() != 2 || p.shape()[axis] != extent {
                return Err(Error::Dimension {
                    op,
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        Ok(extent)
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&mut self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        self.check_open("reshape")?;
        let out = Tensor::new(shape, x.data().to_vec())?;
        self.record1(x, out, |x| OpKind::Reshape { x })
    }

    /// Means over consecutive row groups of size `group`.
    pub fn mean_pool_rows(&mut self, x: &Tensor, group: usize) -> Result<Tensor> {
        self.check_open("mean_pool_rows")?;
        if x.rank() != 2 || group == 0 || x.shape()[0] % group != 0 {
            return Err(Error::Dimension {
                op: "mean_pool_rows",
                lhs: x.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let (n, d) = (x.shape()[0], x.shape()[1]);
        let groups = n / group;
        let mut data = vec![0.0; groups * d];
        for g in 0..groups {
            for r in 0..group {
                let row = &x.data()[(g * group + r) * d..(g * group + r + 1) * d];
                for c in 0..d {
                    data[g * d + c] += row[c];
                }
            }
            for c in 0..d {
                data[g * d + c] /= group as f64;
            }
        }
        let out = Tensor::new(vec![groups, d], data)?;
        self.record1(x, out, move |x| OpKind::MeanPoolRows { x, group })
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        self.check_open("sum")?;
        let out = Tensor::scalar(x.data().iter().sum());
        self.record1(x, out, |x| OpKind::Sum { x })
    }

    /// Cross-entropy of a rank-1 logit vector against a target class,
    /// computed via a max-shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: &Tensor, target: usize) -> Result<Tensor> {
        self.check_open("cross_entropy")?;
        if logits.rank() != 1 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![],
            });
        }
        let classes = logits.shape()[0];
        if target >= classes {
            return Err(Error::ClassIndex { index: target, classes });
        }
        let z = logits.data();
        let out = Tensor::scalar(log_sum_exp(z) - z[target]);
        self.record1(logits, out, move |logits| OpKind::CrossEntropy { logits, target })
    }

    /// Symmetric KL divergence between the softmax over the non-target
    /// logits and the uniform distribution on those classes. Zero exactly
    /// when the non-target logits are all equal; independent of the target
    /// logit.
    pub fn compact_term(&mut self, logits: &Tensor, target: usize) -> Result<Tensor> {
        self.check_open("compact_term")?;
        if logits.rank() != 1 {
            return Err(Error::Dimension {
                op: "compact_term",
                lhs: logits.shape().to_vec(),
                rhs: vec![],
            });
        }
        let classes = logits.shape()[0];
        if target >= classes {
            return Err(Error::ClassIndex { index: target, classes });
        }
        if classes < 2 {
            return Err(Error::contract(
                "compact_term needs at least one non-target class",
            ));
        }
        let (value, _, _) = compact_term_forward(logits.data(), target);
        let out = Tensor::scalar(value);
        self.record1(logits, out, move |logits| OpKind::CompactTerm { logits, target })
    }

    // ---- backward ----

    /// Reverse-mode sweep from a traced one-element output. Returns the
    /// gradient of that output with respect to every node; traced leaves
    /// that receive no flow get zeros. Freezes the tape.
    pub fn backward(&mut self, output: &Tensor) -> Result<Gradients> {
        let gid = output
            .grad_id()
            .ok_or_else(|| Error::tape("backward output is not traced on any tape"))?;
        if gid.tape != self.id {
            return Err(Error::tape("backward output belongs to a different tape"));
        }
        if output.numel() != 1 {
            return Err(Error::contract(format!(
                "backward output must have one element, shape is {:?}",
                output.shape()
            )));
        }
        if self.frozen {
            return Err(Error::tape("backward on a tape already consumed by backward"));
        }
        self.frozen = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[gid.node] = Some(vec![1.0]);

        for idx in (0..=gid.node).rev() {
            let Some(dy) = grads[idx].clone() else { continue };
            self.propagate(idx, &dy, &mut grads);
        }

        let tensors = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(data) => Some(Tensor::new(node.value.shape().to_vec(), data).unwrap()),
                None => match node.kind {
                    OpKind::Leaf => Some(Tensor::zeros(node.value.shape().to_vec()).unwrap()),
                    _ => None,
                },
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: tensors,
        })
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let value_of = |i: usize| nodes[i].value.data();
        let numel_of = |i: usize| nodes[i].value.numel();
        match &nodes[idx].kind {
            OpKind::Leaf | OpKind::Constant => {}
            OpKind::Matmul { a, b } => {
                let (m, k) = (nodes[*a].value.shape()[0], nodes[*a].value.shape()[1]);
                let n = nodes[*b].value.shape()[1];
                let (av, bv) = (value_of(*a), value_of(*b));
                {
                    let da = slot(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            let g = dy[i * n + j];
                            if g == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += g * bv[kk * n + j];
                            }
                        }
                    }
                }
                let db = slot(grads, *b, k * n);
                for i in 0..m {
                    for kk in 0..k {
                        let av_ik = av[i * k + kk];
                        if av_ik == 0.0 {
                            continue;
                        }
                        let dyr = &dy[i * n..(i + 1) * n];
                        let dbr = &mut db[kk * n..(kk + 1) * n];
                        for j in 0..n {
                            dbr[j] += av_ik * dyr[j];
                        }
                    }
                }
            }
            OpKind::Transpose { x } => {
                let (m, n) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
                let dx = slot(grads, *x, m * n);
                for i in 0..n {
                    for j in 0..m {
                        dx[j * n + i] += dy[i * m + j];
                    }
                }
            }
            OpKind::Add { a, b } => {
                accumulate(slot(grads, *a, numel_of(*a)), dy);
                accumulate(slot(grads, *b, numel_of(*b)), dy);
            }
            OpKind::Mul { a, b } => {
                let (av, bv) = (value_of(*a), value_of(*b));
                {
                    let da = slot(grads, *a, av.len());
                    for i in 0..av.len() {
                        da[i] += dy[i] * bv[i];
                    }
                }
                let db = slot(grads, *b, bv.len());
                for i in 0..bv.len() {
                    db[i] += dy[i] * av[i];
                }
            }
            OpKind::AddRowVec { x, v } => {
                let d = nodes[*v].value.numel();
                accumulate(slot(grads, *x, numel_of(*x)), dy);
                let dv = slot(grads, *v, d);
                for (i, g) in dy.iter().enumerate() {
                    dv[i % d] += g;
                }
            }
            OpKind::Scale { x, c } => {
                let dx = slot(grads, *x, numel_of(*x));
                for i in 0..dy.len() {
                    dx[i] += c * dy[i];
                }
            }
            OpKind::Softmax { x, axis } => {
                let p = nodes[idx].value.data();
                let dx = slot(grads, *x, p.len());
                for_each_lane(nodes[idx].value.shape(), *axis, |start, stride, len| {
                    let mut dot = 0.0;
                    for l in 0..len {
                        let i = start + l * stride;
                        dot += dy[i] * p[i];
                    }
                    for l in 0..len {
                        let i = start + l * stride;
                        dx[i] += p[i] * (dy[i] - dot);
                    }
                });
            }
            OpKind::LayerNorm { x, gain, bias, eps } => {
                let xv = value_of(*x);
                let gv = value_of(*gain);
                let d = nodes[*gain].value.numel();
                let rows = xv.len() / d;
                {
                    let dg = slot(grads, *gain, d);
                    for r in 0..rows {
                        let lane = &xv[r * d..(r + 1) * d];
                        let (mean, inv_std) = lane_stats(lane, *eps);
                        for c in 0..d {
                            dg[c] += dy[r * d + c] * (lane[c] - mean) * inv_std;
                        }
                    }
                }
                {
                    let db = slot(grads, *bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += dy[r * d + c];
                        }
                    }
                }
                let dx = slot(grads, *x, xv.len());
                for r in 0..rows {
                    let lane = &xv[r * d..(r + 1) * d];
                    let (mean, inv_std) = lane_stats(lane, *eps);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let a = dy[r * d + c] * gv[c];
                        let xh = (lane[c] - mean) * inv_std;
                        m1 += a;
                        m2 += a * xh;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for c in 0..d {
                        let a = dy[r * d + c] * gv[c];
                        let xh = (lane[c] - mean) * inv_std;
                        dx[r * d + c] += inv_std * (a - m1 - xh * m2);
                    }
                }
            }
            OpKind::Gelu { x } => {
                let xv = value_of(*x);
                let dx = slot(grads, *x, xv.len());
                for i in 0..xv.len() {
                    dx[i] += dy[i] * gelu_derivative(xv[i]);
                }
            }
            OpKind::SelectRows { x, indices } => {
                let d = nodes[idx].value.shape()[1];
                let dx = slot(grads, *x, numel_of(*x));
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..d {
                        dx[src * d + c] += dy[r * d + c];
                    }
                }
            }
            OpKind::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = numel_of(p);
                    accumulate(slot(grads, p, len), &dy[offset..offset + len]);
                    offset += len;
                }
            }
            OpKind::ConcatCols { parts } => {
                let n = nodes[idx].value.shape()[0];
                let total_cols = nodes[idx].value.shape()[1];
                let mut col_offset = 0;
                for &p in parts {
                    let pc = nodes[p].value.shape()[1];
                    let dp = slot(grads, p, n * pc);
                    for r in 0..n {
                        for c in 0..pc {
                            dp[r * pc + c] += dy[r * total_cols + col_offset + c];
                        }
                    }
                    col_offset += pc;
                }
            }
            OpKind::Reshape { x } => {
                accumulate(slot(grads, *x, numel_of(*x)), dy);
            }
            OpKind::MeanPoolRows { x, group } => {
                let d = nodes[idx].value.shape()[1];
                let inv = 1.0 / *group as f64;
                let dx = slot(grads, *x, numel_of(*x));
                for r in 0..numel_of(*x) / d {
                    let g = r / group;
                    for c in 0..d {
                        dx[r * d + c] += dy[g * d + c] * inv;
                    }
                }
            }
            OpKind::Sum { x } => {
                let dx = slot(grads, *x, numel_of(*x));
                for v in dx.iter_mut() {
                    *v += dy[0];
                }
            }
            OpKind::CrossEntropy { logits, target } => {
                let z = value_of(*logits);
                let p = softmax_values(z);
                let dz = slot(grads, *logits, z.len());
                for (i, pi) in p.iter().enumerate() {
                    let onehot = if i == *target { 1.0 } else { 0.0 };
                    dz[i] += dy[0] * (pi - onehot);
                }
            }
            OpKind::CompactTerm { logits, target } => {
                let z = value_of(*logits);
                let (_, log_p, p) = compact_term_forward(z, *target);
                let k = (z.len() - 1) as f64;
                let entropy_sum: f64 = p.iter().zip(&log_p).map(|(pi, si)| pi * si).sum();
                let dz = slot(grads, *logits, z.len());
                let mut nt = 0;
                for i in 0..z.len() {
                    if i == *target {
                        continue;
                    }
                    dz[i] += dy[0] * (p[nt] - 1.0 / k + p[nt] * (log_p[nt] - entropy_sum));
                    nt += 1;
                }
            }
        }
    }
}

/// Gradient of a backward pass, indexed by tape node.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a traced tensor from the same tape.
    pub fn wrt(&self, t: &Tensor) -> Option<&Tensor> {
        self.by_id(t.grad_id()?)
    }

    pub fn by_id(&self, id: GradId) -> Option<&Tensor> {
        if id.tape != self.tape {
            return None;
        }
        self.grads.get(id.node)?.as_ref()
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'a mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn transpose_data(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// Visits every lane along `axis` of a tensor with the given shape,
/// yielding (start offset, stride, lane length).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

fn softmax_lane(data: &mut [f64], start: usize, stride: usize, len: usize) {
    let mut max = f64::NEG_INFINITY;
    for l in 0..len {
        max = max.max(data[start + l * stride]);
    }
    let mut sum = 0.0;
    for l in 0..len {
        let i = start + l * stride;
        data[i] = (data[i] - max).exp();
        sum += data[i];
    }
    for l in 0..len {
        data[start + l * stride] /= sum;
    }
}

fn softmax_values(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn lane_stats(lane: &[f64], eps: f64) -> (f64, f64) {
    let d = lane.len() as f64;
    let mean = lane.iter().sum::<f64>() / d;
    let var = lane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Forward pieces of the compact term: the value, the log-probabilities of
/// the non-target softmax, and the probabilities themselves.
///
/// With `u` uniform over the `k` non-target classes and `p = softmax` of the
/// non-target logits, the value is `KL(u || p) + KL(p || u)`, which reduces
/// to `sum_c (p_c - 1/k) * log p_c` because the `log k` terms cancel.
fn compact_term_forward(z: &[f64], target: usize) -> (f64, Vec<f64>, Vec<f64>) {
    let non_target: Vec<f64> = z
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target)
        .map(|(_, &v)| v)
        .collect();
    let lse = log_sum_exp(&non_target);
    let log_p: Vec<f64> = non_target.iter().map(|v| v - lse).collect();
    // p via a normalized softmax rather than exp(log_p): equal logits then
    // give p exactly 1/k, making the term exactly zero.
    let max = non_target.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = non_target.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let p: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let k = non_target.len() as f64;
    let value = log_p
        .iter()
        .zip(&p)
        .map(|(s, pi)| (pi - 1.0 / k) * s)
        .sum();
    (value, log_p, p)
}
