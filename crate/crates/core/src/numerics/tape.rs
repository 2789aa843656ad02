//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! output. Nodes are only ever appended, so inputs always precede the nodes
//! that consume them and a single reverse sweep computes all adjoints.

use std::collections::HashMap;

use super::{Gradients, Matrix, ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};

/// Clamp applied inside the logarithms of the cross-entropy loss.
pub const BCE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNt(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Adds a `1 x c` row to every row of an `r x c` input.
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SelectRows(NodeId, Vec<usize>),
    Sum(NodeId),
    Mean(NodeId),
    /// Row-wise inner product of two equally shaped matrices, `r x 1`.
    RowDot(NodeId, NodeId),
    /// Mean binary cross-entropy of probabilities against fixed targets.
    Bce(NodeId, Matrix),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf for a trainable parameter. Repeated calls for the same id share
    /// one node so gradients accumulate in a single place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: store.get(id).clone(),
        });
        let node = NodeId(self.nodes.len() - 1);
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMulNt(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push(Op::AddRow(a, row))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.push(Op::ConcatCols(parts.to_vec()))
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        self.push(Op::SelectRows(a, rows.to_vec()))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(a))
    }

    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::RowDot(a, b))
    }

    /// Mean over all entries of `-[y ln p + (1-y) ln(1-p)]`, with `p` clamped
    /// to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce(&mut self, probs: NodeId, targets: Matrix) -> Result<NodeId> {
        self.push(Op::Bce(probs, targets))
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let value = self.eval(&op)?;
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn v(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn eval(&self, op: &Op) -> Result<Matrix> {
        Ok(match op {
            Op::Constant | Op::Param(_) => {
                return Err(Error::Contract("leaf nodes carry their own value".into()))
            }
            Op::MatMul(a, b) => self.v(*a).matmul(self.v(*b))?,
            Op::MatMulNt(a, b) => self.v(*a).matmul_nt(self.v(*b))?,
            Op::Transpose(a) => self.v(*a).transpose(),
            Op::Add(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x + y)?,
            Op::Sub(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x - y)?,
            Op::Mul(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x * y)?,
            Op::Scale(a, f) => self.v(*a).scale(*f),
            Op::AddRow(a, r) => {
                let (a, r) = (self.v(*a), self.v(*r));
                if r.rows() != 1 || r.cols() != a.cols() {
                    return Err(dim_err!(
                        "row broadcast of {}x{} onto {}x{}",
                        r.rows(),
                        r.cols(),
                        a.rows(),
                        a.cols()
                    ));
                }
                let mut out = a.clone();
                for i in 0..out.rows() {
                    for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::Tanh(a) => self.v(*a).map(f64::tanh),
            Op::Relu(a) => self.v(*a).map(|x| x.max(0.0)),
            Op::Sigmoid(a) => self.v(*a).map(sigmoid),
            Op::SoftmaxRows(a) => {
                let a = self.v(*a);
                if a.cols() == 0 {
                    return Err(dim_err!("softmax over empty rows"));
                }
                let mut out = a.clone();
                for i in 0..out.rows() {
                    softmax_in_place(out.row_mut(i));
                }
                out
            }
            Op::ConcatCols(parts) => {
                let first = parts
                    .first()
                    .ok_or_else(|| dim_err!("concat of zero matrices"))?;
                let rows = self.v(*first).rows();
                let mut cols = 0;
                for p in parts {
                    let m = self.v(*p);
                    if m.rows() != rows {
                        return Err(dim_err!("concat rows {} vs {}", m.rows(), rows));
                    }
                    cols += m.cols();
                }
                let mut out = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let mut off = 0;
                    for p in parts {
                        let src = self.v(*p).row(i);
                        out.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                        off += src.len();
                    }
                }
                out
            }
            Op::SelectRows(a, idx) => {
                let a = self.v(*a);
                let mut out = Matrix::zeros(idx.len(), a.cols());
                for (o, &r) in idx.iter().enumerate() {
                    if r >= a.rows() {
                        return Err(dim_err!("row {r} out of range for {} rows", a.rows()));
                    }
                    out.row_mut(o).copy_from_slice(a.row(r));
                }
                out
            }
            Op::Sum(a) => Matrix::scalar(self.v(*a).sum()),
            Op::Mean(a) => {
                let a = self.v(*a);
                if a.is_empty() {
                    return Err(dim_err!("mean of an empty matrix"));
                }
                Matrix::scalar(a.sum() / a.len() as f64)
            }
            Op::RowDot(a, b) => {
                let (a, b) = (self.v(*a), self.v(*b));
                if !a.same_shape(b) {
                    return Err(dim_err!(
                        "row dot of {}x{} and {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    ));
                }
                let vals: Vec<f64> = (0..a.rows())
                    .map(|i| super::matrix::dot(a.row(i), b.row(i)))
                    .collect();
                Matrix::column_vector(&vals)
            }
            Op::Bce(p, y) => {
                let p = self.v(*p);
                if !p.same_shape(y) {
                    return Err(dim_err!(
                        "bce predictions {}x{} vs targets {}x{}",
                        p.rows(),
                        p.cols(),
                        y.rows(),
                        y.cols()
                    ));
                }
                if p.is_empty() {
                    return Err(dim_err!("bce over zero labels"));
                }
                let total: f64 = p
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                    })
                    .sum();
                Matrix::scalar(total / p.len() as f64)
            }
        })
    }

    /// Recomputes every non-leaf node from its inputs and reports whether the
    /// result matches the recorded values bit-for-bit.
    pub fn replay_matches(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.op, Op::Constant | Op::Param(_)) {
                continue;
            }
            let again = self.eval(&node.op)?;
            let same = again
                .data()
                .iter()
                .zip(node.value.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same || !again.same_shape(&node.value) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Adjoints of a scalar node with respect to every parameter of `store`.
    /// Parameters that were never placed on the tape get zero gradients.
    pub fn backward(&self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        let lv = self.v(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::scalar(1.0));
        let mut grads = store.zero_grads();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => {
                    if pid.0 >= grads.len() {
                        return Err(Error::Contract(format!("{pid} not in store")));
                    }
                    grads.get_mut(*pid).add_assign(&g)?;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.v(*b))?;
                    let db = self.v(*a).matmul_tn(&g)?;
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::MatMulNt(a, b) => {
                    // c = a bᵀ: da = g b, db = gᵀ a
                    let da = g.matmul(self.v(*b))?;
                    let db = g.matmul_tn(self.v(*a))?;
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::Transpose(a) => acc(&mut adj, *a, g.transpose())?,
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.clone())?;
                    acc(&mut adj, *b, g)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, g.clone())?;
                    acc(&mut adj, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.v(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.v(*a), |x, y| x * y)?;
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::Scale(a, f) => acc(&mut adj, *a, g.scale(*f))?,
                Op::AddRow(a, r) => {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    acc(&mut adj, *a, g)?;
                    acc(&mut adj, *r, dr)?;
                }
                Op::Tanh(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * (1.0 - y * y))?;
                    acc(&mut adj, *a, d)?;
                }
                Op::Relu(a) => {
                    let d = g.zip_map(self.v(*a), |x, inp| if inp > 0.0 { x } else { 0.0 })?;
                    acc(&mut adj, *a, d)?;
                }
                Op::Sigmoid(a) => {
                    let d = g.zip_map(&node.value, |x, y| x * y * (1.0 - y))?;
                    acc(&mut adj, *a, d)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let inner = super::matrix::dot(yr, gr);
                        for ((o, &yv), &gv) in d.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - inner);
                        }
                    }
                    acc(&mut adj, *a, d)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let cols = self.v(*p).cols();
                        let mut d = Matrix::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                        }
                        off += cols;
                        acc(&mut adj, *p, d)?;
                    }
                }
                Op::SelectRows(a, rows) => {
                    let src = self.v(*a);
                    let mut d = Matrix::zeros(src.rows(), src.cols());
                    for (o, &r) in rows.iter().enumerate() {
                        for (x, y) in d.row_mut(r).iter_mut().zip(g.row(o)) {
                            *x += y;
                        }
                    }
                    acc(&mut adj, *a, d)?;
                }
                Op::Sum(a) => {
                    let src = self.v(*a);
                    acc(&mut adj, *a, Matrix::filled(src.rows(), src.cols(), g.item()?))?;
                }
                Op::Mean(a) => {
                    let src = self.v(*a);
                    let v = g.item()? / src.len() as f64;
                    acc(&mut adj, *a, Matrix::filled(src.rows(), src.cols(), v))?;
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (self.v(*a), self.v(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for i in 0..av.rows() {
                        let gi = g.get(i, 0);
                        for (o, &x) in da.row_mut(i).iter_mut().zip(bv.row(i)) {
                            *o = gi * x;
                        }
                        for (o, &x) in db.row_mut(i).iter_mut().zip(av.row(i)) {
                            *o = gi * x;
                        }
                    }
                    acc(&mut adj, *a, da)?;
                    acc(&mut adj, *b, db)?;
                }
                Op::Bce(p, y) => {
                    let pv = self.v(*p);
                    let n = pv.len() as f64;
                    let scale = g.item()? / n;
                    let d = pv.zip_map(y, |p, y| {
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })?;
                    acc(&mut adj, *p, d)?;
                }
            }
        }
        Ok(grads)
    }
}

fn acc(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
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

/// Max-shifted softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(dim_err!("softmax of an empty vector"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax of non-finite scores".into()));
    }
    let mut out = scores.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}
