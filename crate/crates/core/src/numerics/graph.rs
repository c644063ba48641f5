//! Reverse-mode automatic differentiation over a flat tape of tensor ops.
//!
//! A [`Graph`] records every forward op in creation order; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into each node.
//! Graphs are single-use per training step and single-threaded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Step {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Matmul(NodeId, NodeId),
    /// `a @ b^T` without materializing the transpose.
    MatmulNT(NodeId, NodeId),
    /// Broadcast a row vector over every row of a matrix.
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
    SliceCols(NodeId, usize),
    Relu(NodeId),
    /// Inverted-dropout mask: entries are 0 or 1/(1-p).
    Dropout(NodeId, Vec<f64>),
    /// Row-wise softmax; masked columns already carry probability 0 in the
    /// stored value, which is all backward needs.
    Softmax(NodeId),
    /// Row-wise normalization; inverse stddev cached per row.
    LayerNorm(NodeId, Vec<f64>),
    Sum(NodeId),
    Mean(NodeId),
    Ln(NodeId),
    /// Per-row column pick: out[i] = a[i, idx[i]].
    GatherCols(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    step: Step,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    rng: ChaCha8Rng,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl Graph {
    /// `training` enables dropout; `seed` fixes its random stream.
    pub fn new(training: bool, seed: u64) -> Graph {
        Graph {
            nodes: Vec::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn inference() -> Graph {
        Graph::new(false, 0)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor> {
        self.nodes[id.0].grad.take()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, step: Step) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            step,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, true, Step::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, false, Step::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(out, rg, Step::Scale(a, c))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = matmul_values(va, vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::Matmul(a, b)))
    }

    /// `a @ b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("matmul_nt", va.shape(), vb.shape()));
        }
        let (n, k, m) = (va.rows(), va.cols(), vb.rows());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += va.at(i, l) * vb.at(j, l);
                }
                data[i * m + j] = acc;
            }
        }
        let out = Tensor::matrix(n, m, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::MatmulNT(a, b)))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if va.cols() != vr.len() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vr.data()[i % cols])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, rg, Step::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if va.cols() != vr.len() {
            return Err(shape_err("mul_row", va.shape(), vr.shape()));
        }
        let cols = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * vr.data()[i % cols])
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, rg, Step::MulRow(a, row)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err("concat_rows", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let out = Tensor::matrix(va.rows() + vb.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", va.shape(), vb.shape()));
        }
        let (n, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&vb.data()[i * cb..(i + 1) * cb]);
        }
        let out = Tensor::matrix(n, ca + cb, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Step::ConcatCols(a, b)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{end} out of bounds for {:?}",
                va.shape()
            )));
        }
        let cols = va.cols();
        let data = va.data()[start * cols..end * cols].to_vec();
        let out = Tensor::matrix(end - start, cols, data);
        let rg = self.rg(a);
        Ok(self.push(out, rg, Step::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::Shape(format!(
                "slice_cols {start}..{end} out of bounds for {:?}",
                va.shape()
            )));
        }
        let (n, cols) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            data.extend_from_slice(&va.data()[i * cols + start..i * cols + end]);
        }
        let out = Tensor::matrix(n, end - start, data);
        let rg = self.rg(a);
        Ok(self.push(out, rg, Step::SliceCols(a, start)))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(0.0)).collect(),
        );
        let rg = self.rg(a);
        self.push(out, rg, Step::Relu(a))
    }

    /// Inverted dropout: a no-op outside training mode.
    pub fn dropout(&mut self, a: NodeId, p: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0, 1), got {p}")));
        }
        if !self.training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        );
        let rg = self.rg(a);
        Ok(self.push(out, rg, Step::Dropout(a, mask)))
    }

    /// Row-wise softmax. `mask[j] == true` forces column `j` to probability
    /// exactly 0 in every row.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let va = self.value(a);
        let (n, cols) = (va.rows(), va.cols());
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(Error::Shape(format!(
                    "softmax mask length {} vs {} columns",
                    m.len(),
                    cols
                )));
            }
            if m.iter().all(|&x| x) {
                return Err(Error::Input("softmax with all columns masked".into()));
            }
        }
        let masked = |j: usize| mask.map_or(false, |m| m[j]);
        let mut data = vec![0.0; n * cols];
        for i in 0..n {
            let row = &va.data()[i * cols..(i + 1) * cols];
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| !masked(*j))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..cols {
                if !masked(j) {
                    let e = (row[j] - max).exp();
                    data[i * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                data[i * cols + j] /= sum;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(out, rg, Step::Softmax(a)))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.masked_softmax(a, None)
    }

    /// Row-wise standardization (pre-affine layer norm).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (n, cols) = (va.rows(), va.cols());
        let mut data = vec![0.0; n * cols];
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = &va.data()[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(s);
            for j in 0..cols {
                data[i * cols + j] = (row[j] - mean) * s;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a);
        self.push(out, rg, Step::LayerNorm(a, inv_std))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Step::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Step::Mean(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x.ln()).collect());
        let rg = self.rg(a);
        self.push(out, rg, Step::Ln(a))
    }

    /// `out[i] = a[i, idx[i]]` as a column vector.
    pub fn gather_cols(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        if idx.len() != va.rows() {
            return Err(Error::Shape(format!(
                "gather_cols index count {} vs {} rows",
                idx.len(),
                va.rows()
            )));
        }
        if let Some(&j) = idx.iter().find(|&&j| j >= va.cols()) {
            return Err(Error::Input(format!(
                "gather_cols index {j} out of range for {} columns",
                va.cols()
            )));
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| va.at(i, j)).collect();
        let out = Tensor::matrix(idx.len(), 1, data);
        let rg = self.rg(a);
        Ok(self.push(out, rg, Step::GatherCols(a, idx.to_vec())))
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                    *x += d;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    /// Accumulates `d loss / d node` into every reachable node that requires
    /// gradients. Repeated calls keep accumulating.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        // Local upstream gradients for this pass; node grads may already hold
        // accumulation from earlier passes.
        let mut up: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        up[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = up[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.accumulate(NodeId(i), g.clone());

            let send = |up: &mut Vec<Option<Tensor>>, id: NodeId, delta: Tensor| {
                match &mut up[id.0] {
                    Some(t) => {
                        for (x, d) in t.data_mut().iter_mut().zip(delta.data()) {
                            *x += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            };

            match &self.nodes[i].step {
                Step::Leaf => {}
                &Step::Add(a, b) => {
                    send(&mut up, a, g.clone());
                    send(&mut up, b, g);
                }
                &Step::Sub(a, b) => {
                    let neg = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|x| -x).collect(),
                    );
                    send(&mut up, a, g);
                    send(&mut up, b, neg);
                }
                &Step::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                    );
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                    );
                    send(&mut up, a, da);
                    send(&mut up, b, db);
                }
                &Step::Scale(a, c) => {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|x| x * c).collect(),
                    );
                    send(&mut up, a, da);
                }
                &Step::Matmul(a, b) => {
                    // c = a @ b: da = g @ b^T, db = a^T @ g
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = matmul_nt_values(&g, vb);
                    let db = matmul_tn_values(va, &g);
                    send(&mut up, a, da);
                    send(&mut up, b, db);
                }
                &Step::MatmulNT(a, b) => {
                    // c = a @ b^T: da = g @ b, db = g^T @ a
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = matmul_values(&g, vb);
                    let db = matmul_tn_values(&g, va);
                    send(&mut up, a, da);
                    send(&mut up, b, db);
                }
                &Step::AddRow(a, row) => {
                    let cols = self.nodes[row.0].value.len();
                    let mut drow = vec![0.0; cols];
                    for (j, x) in g.data().iter().enumerate() {
                        drow[j % cols] += x;
                    }
                    let row_shape = self.nodes[row.0].value.shape().to_vec();
                    send(&mut up, a, g);
                    send(&mut up, row, Tensor::new(row_shape, drow));
                }
                &Step::MulRow(a, row) => {
                    let va = &self.nodes[a.0].value;
                    let vr = &self.nodes[row.0].value;
                    let cols = vr.len();
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(j, x)| x * vr.data()[j % cols])
                            .collect(),
                    );
                    let mut drow = vec![0.0; cols];
                    for (j, x) in g.data().iter().enumerate() {
                        drow[j % cols] += x * va.data()[j];
                    }
                    let row_shape = vr.shape().to_vec();
                    send(&mut up, a, da);
                    send(&mut up, row, Tensor::new(row_shape, drow));
                }
                &Step::ConcatRows(a, b) => {
                    let na = self.nodes[a.0].value.len();
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let da = Tensor::new(sa, g.data()[..na].to_vec());
                    let db = Tensor::new(sb, g.data()[na..].to_vec());
                    send(&mut up, a, da);
                    send(&mut up, b, db);
                }
                &Step::ConcatCols(a, b) => {
                    let (ca, cb) = (self.nodes[a.0].value.cols(), self.nodes[b.0].value.cols());
                    let n = self.nodes[a.0].value.rows();
                    let mut da = Vec::with_capacity(n * ca);
                    let mut db = Vec::with_capacity(n * cb);
                    for r in 0..n {
                        let row = &g.data()[r * (ca + cb)..(r + 1) * (ca + cb)];
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    send(&mut up, a, Tensor::matrix(n, ca, da));
                    send(&mut up, b, Tensor::matrix(n, cb, db));
                }
                &Step::SliceRows(a, start) => {
                    let va = &self.nodes[a.0].value;
                    let cols = va.cols();
                    let mut da = Tensor::zeros(va.shape());
                    da.data_mut()[start * cols..start * cols + g.len()]
                        .copy_from_slice(g.data());
                    send(&mut up, a, da);
                }
                &Step::SliceCols(a, start) => {
                    let va = &self.nodes[a.0].value;
                    let (n, cols, w) = (va.rows(), va.cols(), g.cols());
                    let mut da = Tensor::zeros(va.shape());
                    for r in 0..n {
                        for j in 0..w {
                            da.data_mut()[r * cols + start + j] = g.at(r, j);
                        }
                    }
                    send(&mut up, a, da);
                }
                &Step::Relu(a) => {
                    let va = &self.nodes[a.0].value;
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data())
                            .map(|(x, v)| if *v > 0.0 { *x } else { 0.0 })
                            .collect(),
                    );
                    send(&mut up, a, da);
                }
                Step::Dropout(a, mask) => {
                    let a = *a;
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(mask).map(|(x, m)| x * m).collect(),
                    );
                    send(&mut up, a, da);
                }
                &Step::Softmax(a) => {
                    // dx = y * (g - sum(g * y)) per row; masked entries have
                    // y = 0 and therefore zero gradient.
                    let y = &self.nodes[i].value;
                    let (n, cols) = (y.rows(), y.cols());
                    let mut da = vec![0.0; n * cols];
                    for r in 0..n {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..cols {
                            da[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    send(&mut up, a, Tensor::new(y.shape().to_vec(), da));
                }
                Step::LayerNorm(a, inv_std) => {
                    let a = *a;
                    let y = &self.nodes[i].value;
                    let (n, cols) = (y.rows(), y.cols());
                    let mut da = vec![0.0; n * cols];
                    for r in 0..n {
                        let yr = &y.data()[r * cols..(r + 1) * cols];
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let g_mean = gr.iter().sum::<f64>() / cols as f64;
                        let gy_mean =
                            gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            da[r * cols + j] =
                                inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                    send(&mut up, a, Tensor::new(y.shape().to_vec(), da));
                }
                &Step::Sum(a) => {
                    let va = &self.nodes[a.0].value;
                    let da = Tensor::new(
                        va.shape().to_vec(),
                        vec![g.scalar_value(); va.len()],
                    );
                    send(&mut up, a, da);
                }
                &Step::Mean(a) => {
                    let va = &self.nodes[a.0].value;
                    let da = Tensor::new(
                        va.shape().to_vec(),
                        vec![g.scalar_value() / va.len() as f64; va.len()],
                    );
                    send(&mut up, a, da);
                }
                &Step::Ln(a) => {
                    let va = &self.nodes[a.0].value;
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().zip(va.data()).map(|(x, v)| x / v).collect(),
                    );
                    send(&mut up, a, da);
                }
                Step::GatherCols(a, idx) => {
                    let a = *a;
                    let va = &self.nodes[a.0].value;
                    let mut da = Tensor::zeros(va.shape());
                    let cols = va.cols();
                    for (r, &j) in idx.iter().enumerate() {
                        da.data_mut()[r * cols + j] += g.data()[r];
                    }
                    send(&mut up, a, da);
                }
            }
        }
        Ok(())
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for l in 0..k {
            let av = a.data()[i * k + l];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a @ b^T`.
fn matmul_nt_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a.data()[i * k + l] * b.data()[j * k + l];
            }
            out[i * m + j] = acc;
        }
    }
    Tensor::matrix(n, m, out)
}

/// `a^T @ b`.
fn matmul_tn_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for l in 0..k {
        for i in 0..n {
            let av = a.data()[l * n + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[l * m..(l + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::matrix(n, m, out)
}
