//! Reverse-mode tape.
//!
//! Nodes are appended in forward order, so walking the tape backwards is a
//! reverse topological order: each node is visited exactly once and gradients
//! accumulate additively at shared nodes. Elementwise `add`/`mul` broadcast a
//! right-aligned suffix shape over leading dimensions; `matmul` batches over
//! leading dimensions and accepts a plain 2-d right operand shared across the
//! batch. Attention masks are additive constants, so no dedicated masked-fill
//! node is needed.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, ArrayD, ArrayView2, ArrayView3, ArrayViewMut3, Axis, Ix2, IxDyn, Slice};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Real};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<F: Real> {
    Leaf,
    MatMul { lhs: NodeId, rhs: NodeId },
    Add { lhs: NodeId, rhs: NodeId },
    Mul { lhs: NodeId, rhs: NodeId },
    Affine { x: NodeId, scale: F },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Exp { x: NodeId },
    Ln { x: NodeId },
    Clamp { x: NodeId, lo: F, hi: F },
    SoftmaxLast { x: NodeId },
    LogSoftmaxLast { x: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId, normed: ArrayD<F>, rstd: ArrayD<F> },
    Dropout { x: NodeId, mask: ArrayD<F> },
    GatherRows { table: NodeId, ids: Vec<usize> },
    TransposeLast2 { x: NodeId },
    Reshape { x: NodeId, orig: Vec<usize> },
    SliceLast { x: NodeId, start: usize, len: usize },
    ConcatLast { lhs: NodeId, rhs: NodeId, split: usize },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    SumLast { x: NodeId },
}

struct Node<F: Real> {
    value: ArrayD<F>,
    grad: Option<ArrayD<F>>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    train: bool,
    dropout_rng: Option<ChaCha8Rng>,
}

fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn standardize<F: Real>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn view3<F: Real>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView3<'_, F> {
    let batch = a.len() / (rows * cols);
    a.view()
        .into_shape_with_order((batch, rows, cols))
        .expect("tape values are standard layout")
}

fn view2<F: Real>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-d operand")
}

fn view3_mut<F: Real>(a: &mut ArrayD<F>, rows: usize, cols: usize) -> ArrayViewMut3<'_, F> {
    let batch = a.len() / (rows * cols);
    a.view_mut()
        .into_shape_with_order((batch, rows, cols))
        .expect("tape values are standard layout")
}

/// Sum `g` over leading axes until it matches `target` (a suffix shape).
fn reduce_to_suffix<F: Real>(g: &ArrayD<F>, target: &[usize]) -> ArrayD<F> {
    let excess = g.ndim() - target.len();
    if excess == 0 {
        return g.to_owned();
    }
    let mut r = g.sum_axis(Axis(0));
    for _ in 1..excess {
        r = r.sum_axis(Axis(0));
    }
    r
}

impl<F: Real> Tape<F> {
    pub fn eval() -> Self {
        Tape { nodes: Vec::new(), train: false, dropout_rng: None }
    }

    /// Train-mode tape; `dropout_rng` supplies the dropout masks, drawn in
    /// call order, elementwise row-major within each call.
    pub fn train(dropout_rng: ChaCha8Rng) -> Self {
        Tape { nodes: Vec::new(), train: true, dropout_rng: Some(dropout_rng) }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<F>, needs_grad: bool, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value: standardize(value), grad: None, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Trainable input: gradients are accumulated for it during `backward`.
    pub fn leaf(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable input (data, masks, targets).
    pub fn constant(&mut self, value: ArrayD<F>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<F> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<F>> {
        self.nodes[id].grad.as_ref()
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, id: NodeId) -> F {
        debug_assert_eq!(self.nodes[id].value.len(), 1, "scalar_value on non-scalar");
        *self.nodes[id].value.iter().next().expect("non-empty")
    }

    fn shape(&self, id: NodeId) -> Vec<usize> {
        self.nodes[id].value.shape().to_vec()
    }

    // ---- primitives ----------------------------------------------------

    /// Batched matrix product. `lhs` is `(..., m, k)`; `rhs` is either
    /// `(k, n)` (shared across the batch) or `(..., k, n)` with identical
    /// leading dimensions.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, NumericsError> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        let mismatch = || NumericsError::ShapeMismatch { op: "matmul", lhs: ls.clone(), rhs: rs.clone() };
        if ls.len() < 2 || rs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let n = rs[rs.len() - 1];
        let rhs_batched = rs.len() > 2;
        if rs[rs.len() - 2] != k || (rhs_batched && rs[..rs.len() - 2] != ls[..ls.len() - 2]) {
            return Err(mismatch());
        }
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        {
            let a3 = view3(&self.nodes[lhs].value, m, k);
            let mut o3 = view3_mut(&mut out, m, n);
            if rhs_batched {
                let b3 = view3(&self.nodes[rhs].value, k, n);
                for bi in 0..a3.len_of(Axis(0)) {
                    general_mat_mul(
                        F::one(),
                        &a3.index_axis(Axis(0), bi),
                        &b3.index_axis(Axis(0), bi),
                        F::zero(),
                        &mut o3.index_axis_mut(Axis(0), bi),
                    );
                }
            } else {
                let b2 = view2(&self.nodes[rhs].value);
                for bi in 0..a3.len_of(Axis(0)) {
                    general_mat_mul(
                        F::one(),
                        &a3.index_axis(Axis(0), bi),
                        &b2,
                        F::zero(),
                        &mut o3.index_axis_mut(Axis(0), bi),
                    );
                }
            }
        }
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, needs, Op::MatMul { lhs, rhs }))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        lhs: NodeId,
        rhs: NodeId,
    ) -> Result<ArrayD<F>, NumericsError> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        if !is_suffix(&ls, &rs) {
            return Err(NumericsError::ShapeMismatch { op: op_name, lhs: ls, rhs: rs });
        }
        let out = self.nodes[lhs].value.clone();
        Ok(out)
    }

    /// Elementwise sum; `rhs`'s shape must equal a suffix of `lhs`'s.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, NumericsError> {
        let mut out = self.elementwise("add", lhs, rhs)?;
        {
            let rhs_b = self.nodes[rhs].value.broadcast(out.raw_dim()).expect("suffix broadcast");
            out.zip_mut_with(&rhs_b, |a, &b| *a = *a + b);
        }
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, needs, Op::Add { lhs, rhs }))
    }

    /// Elementwise (Hadamard) product with suffix broadcasting.
    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, NumericsError> {
        let mut out = self.elementwise("mul", lhs, rhs)?;
        {
            let rhs_b = self.nodes[rhs].value.broadcast(out.raw_dim()).expect("suffix broadcast");
            out.zip_mut_with(&rhs_b, |a, &b| *a = *a * b);
        }
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, needs, Op::Mul { lhs, rhs }))
    }

    /// `scale * x + shift`, scalars applied elementwise.
    pub fn affine(&mut self, x: NodeId, scale: F, shift: F) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| scale * v + shift);
        let needs = self.needs(x);
        self.push(out, needs, Op::Affine { x, scale })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| if v > F::zero() { v } else { F::zero() });
        let needs = self.needs(x);
        self.push(out, needs, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| F::one() / (F::one() + (-v).exp()));
        let needs = self.needs(x);
        self.push(out, needs, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.tanh());
        let needs = self.needs(x);
        self.push(out, needs, Op::Tanh { x })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.exp());
        let needs = self.needs(x);
        self.push(out, needs, Op::Exp { x })
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.ln());
        let needs = self.needs(x);
        self.push(out, needs, Op::Ln { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: F, hi: F) -> NodeId {
        let out = self.nodes[x].value.mapv(|v| v.max(lo).min(hi));
        let needs = self.needs(x);
        self.push(out, needs, Op::Clamp { x, lo, hi })
    }

    /// Softmax along the last axis; rows sum to one and are strictly positive.
    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let nd = self.nodes[x].value.ndim();
        let mut out = self.nodes[x].value.clone();
        for mut lane in out.lanes_mut(Axis(nd - 1)) {
            let m = lane.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in lane.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::SoftmaxLast { x })
    }

    pub fn log_softmax_last(&mut self, x: NodeId) -> NodeId {
        let nd = self.nodes[x].value.ndim();
        let mut out = self.nodes[x].value.clone();
        for mut lane in out.lanes_mut(Axis(nd - 1)) {
            let m = lane.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in lane.iter() {
                sum += (*v - m).exp();
            }
            let lse = m + sum.ln();
            for v in lane.iter_mut() {
                *v = *v - lse;
            }
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::LogSoftmaxLast { x })
    }

    /// Per-position normalization over the last axis with learned scale and
    /// shift (both 1-d of the last-axis length).
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x);
        let d = *xs.last().ok_or(NumericsError::InvalidArg {
            op: "layer_norm",
            msg: "input must have at least one axis".into(),
        })?;
        for (name, id) in [("gain", gain), ("shift", shift)] {
            let s = self.shape(id);
            if s != [d] {
                return Err(NumericsError::ShapeMismatch { op: "layer_norm", lhs: xs.clone(), rhs: s });
            }
            let _ = name;
        }
        let nd = xs.len();
        let mut normed = self.nodes[x].value.clone();
        let mut rstd = ArrayD::<F>::zeros(IxDyn(&xs[..nd - 1]));
        let eps = F::from_f64(LAYER_NORM_EPS);
        let dn = F::from_f64(d as f64);
        for (mut lane, r) in normed.lanes_mut(Axis(nd - 1)).into_iter().zip(rstd.iter_mut()) {
            let mean = lane.iter().copied().fold(F::zero(), |a, v| a + v) / dn;
            let var = lane.iter().map(|v| (*v - mean) * (*v - mean)).fold(F::zero(), |a, v| a + v) / dn;
            let rs = F::one() / (var + eps).sqrt();
            for v in lane.iter_mut() {
                *v = (*v - mean) * rs;
            }
            *r = rs;
        }
        let mut out = normed.clone();
        {
            let g = self.nodes[gain].value.broadcast(out.raw_dim()).expect("gain broadcast");
            out.zip_mut_with(&g, |a, &b| *a = *a * b);
            let s = self.nodes[shift].value.broadcast(out.raw_dim()).expect("shift broadcast");
            out.zip_mut_with(&s, |a, &b| *a = *a + b);
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(out, needs, Op::LayerNorm { x, gain, shift, normed, rstd }))
    }

    /// Inverted dropout: in train mode keeps each entry with probability
    /// `1 - p`, scaling survivors by `1/(1-p)`. Identity in eval mode.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> Result<NodeId, NumericsError> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(NumericsError::InvalidArg { op: "dropout", msg: format!("p = {p}") });
        }
        let keep = 1.0 - p;
        let scale = F::from_f64(1.0 / keep);
        let rng = self.dropout_rng.as_mut().expect("train tape has a dropout rng");
        let mask = self.nodes[x]
            .value
            .mapv(|_| if rng.random::<f64>() < keep { scale } else { F::zero() });
        let out = &self.nodes[x].value * &mask;
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Dropout { x, mask }))
    }

    /// Row lookup into a 2-d table (embedding gather / row selection).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NumericsError> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(NumericsError::InvalidArg {
                op: "gather_rows",
                msg: format!("table must be 2-d, got {ts:?}"),
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= ts[0]) {
            return Err(NumericsError::InvalidArg {
                op: "gather_rows",
                msg: format!("row {bad} out of range {}", ts[0]),
            });
        }
        let t2 = view2(&self.nodes[table].value);
        let mut out = ndarray::Array2::<F>::zeros((ids.len(), ts[1]));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids.iter()) {
            row.assign(&t2.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(out.into_dyn(), needs, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let nd = self.nodes[x].value.ndim();
        if nd < 2 {
            return Err(NumericsError::InvalidArg {
                op: "transpose_last2",
                msg: "needs at least 2 axes".into(),
            });
        }
        let mut v = self.nodes[x].value.view();
        v.swap_axes(nd - 2, nd - 1);
        let out = v.to_owned();
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::TransposeLast2 { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let orig = self.shape(x);
        if orig.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(NumericsError::ShapeMismatch { op: "reshape", lhs: orig, rhs: shape.to_vec() });
        }
        let out = self.nodes[x]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::Reshape { x, orig }))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x);
        let d = *xs.last().unwrap_or(&0);
        if start + len > d || len == 0 {
            return Err(NumericsError::InvalidArg {
                op: "slice_last",
                msg: format!("slice {start}..{} of width {d}", start + len),
            });
        }
        let nd = xs.len();
        let out = self.nodes[x]
            .value
            .slice_axis(Axis(nd - 1), Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs(x);
        Ok(self.push(out, needs, Op::SliceLast { x, start, len }))
    }

    pub fn concat_last(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, NumericsError> {
        let ls = self.shape(lhs);
        let rs = self.shape(rhs);
        let nd = ls.len();
        if rs.len() != nd || ls[..nd - 1] != rs[..nd - 1] {
            return Err(NumericsError::ShapeMismatch { op: "concat_last", lhs: ls, rhs: rs });
        }
        let out = ndarray::concatenate(
            Axis(nd - 1),
            &[self.nodes[lhs].value.view(), self.nodes[rhs].value.view()],
        )
        .expect("shapes checked");
        let split = ls[nd - 1];
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(out, needs, Op::ConcatLast { lhs, rhs, split }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let out = ndarray::arr0(self.nodes[x].value.sum()).into_dyn();
        let needs = self.needs(x);
        self.push(out, needs, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let out = ndarray::arr0(self.nodes[x].value.sum() / F::from_f64(n as f64)).into_dyn();
        let needs = self.needs(x);
        self.push(out, needs, Op::MeanAll { x })
    }

    pub fn sum_last(&mut self, x: NodeId) -> NodeId {
        let nd = self.nodes[x].value.ndim();
        let out = self.nodes[x].value.sum_axis(Axis(nd - 1));
        let needs = self.needs(x);
        self.push(out, needs, Op::SumLast { x })
    }

    // ---- backward ------------------------------------------------------

    fn accumulate(&mut self, id: NodeId, contribution: ArrayD<F>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match self.nodes[id].grad.as_mut() {
            Some(g) => *g += &contribution,
            // `to_owned` of a transposed view keeps its stride order, so
            // normalize here: gradients are read back as flat slices.
            None => self.nodes[id].grad = Some(standardize(contribution)),
        }
    }

    /// Reverse pass from a single-element root; gradients of trainable leaves
    /// are then available through [`Tape::grad`].
    pub fn backward(&mut self, root: NodeId) -> Result<(), NumericsError> {
        if self.nodes[root].value.len() != 1 {
            return Err(NumericsError::InvalidArg {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.shape(root)),
            });
        }
        if !self.nodes[root].needs_grad {
            return Err(NumericsError::InvalidArg {
                op: "backward",
                msg: "root does not depend on any trainable leaf".into(),
            });
        }
        let root_shape = self.nodes[root].value.raw_dim();
        self.nodes[root].grad = Some(ArrayD::ones(root_shape));

        for id in (0..=root).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.nodes[id].grad.take().expect("checked above");
            let contribs = self.op_backward(id, &g);
            for (pid, c) in contribs {
                self.accumulate(pid, c);
            }
            self.nodes[id].grad = Some(g);
        }
        Ok(())
    }

    fn op_backward(&self, id: NodeId, g: &ArrayD<F>) -> Vec<(NodeId, ArrayD<F>)> {
        let mut out: Vec<(NodeId, ArrayD<F>)> = Vec::new();
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { lhs, rhs } => {
                let ls = self.nodes[*lhs].value.shape();
                let rs = self.nodes[*rhs].value.shape();
                let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
                let n = rs[rs.len() - 1];
                let g3 = view3(g, m, n);
                let batch = g3.len_of(Axis(0));
                if self.needs(*lhs) {
                    let mut da = ArrayD::zeros(IxDyn(ls));
                    {
                        let mut da3 = view3_mut(&mut da, m, k);
                        if rs.len() == 2 {
                            let b2 = view2(&self.nodes[*rhs].value);
                            for bi in 0..batch {
                                general_mat_mul(
                                    F::one(),
                                    &g3.index_axis(Axis(0), bi),
                                    &b2.t(),
                                    F::zero(),
                                    &mut da3.index_axis_mut(Axis(0), bi),
                                );
                            }
                        } else {
                            let b3 = view3(&self.nodes[*rhs].value, k, n);
                            for bi in 0..batch {
                                general_mat_mul(
                                    F::one(),
                                    &g3.index_axis(Axis(0), bi),
                                    &b3.index_axis(Axis(0), bi).t(),
                                    F::zero(),
                                    &mut da3.index_axis_mut(Axis(0), bi),
                                );
                            }
                        }
                    }
                    out.push((*lhs, da));
                }
                if self.needs(*rhs) {
                    let a3 = view3(&self.nodes[*lhs].value, m, k);
                    let mut db = ArrayD::zeros(IxDyn(rs));
                    if rs.len() == 2 {
                        let mut db2 = db.view_mut().into_dimensionality::<Ix2>().expect("2-d");
                        for bi in 0..batch {
                            general_mat_mul(
                                F::one(),
                                &a3.index_axis(Axis(0), bi).t(),
                                &g3.index_axis(Axis(0), bi),
                                F::one(),
                                &mut db2,
                            );
                        }
                    } else {
                        let mut db3 = view3_mut(&mut db, k, n);
                        for bi in 0..batch {
                            general_mat_mul(
                                F::one(),
                                &a3.index_axis(Axis(0), bi).t(),
                                &g3.index_axis(Axis(0), bi),
                                F::zero(),
                                &mut db3.index_axis_mut(Axis(0), bi),
                            );
                        }
                    }
                    out.push((*rhs, db));
                }
            }
            Op::Add { lhs, rhs } => {
                if self.needs(*lhs) {
                    out.push((*lhs, g.clone()));
                }
                if self.needs(*rhs) {
                    out.push((*rhs, reduce_to_suffix(g, self.nodes[*rhs].value.shape())));
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.needs(*lhs) {
                    let mut dl = g.clone();
                    let rb = self.nodes[*rhs].value.broadcast(dl.raw_dim()).expect("suffix");
                    dl.zip_mut_with(&rb, |a, &b| *a = *a * b);
                    out.push((*lhs, dl));
                }
                if self.needs(*rhs) {
                    let mut gl = g.clone();
                    gl.zip_mut_with(&self.nodes[*lhs].value, |a, &b| *a = *a * b);
                    out.push((*rhs, reduce_to_suffix(&gl, self.nodes[*rhs].value.shape())));
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    out.push((*x, g.mapv(|v| v * *scale)));
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[*x].value, |a, &v| {
                        if v <= F::zero() {
                            *a = F::zero();
                        }
                    });
                    out.push((*x, dx));
                }
            }
            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[id].value, |a, &y| *a = *a * y * (F::one() - y));
                    out.push((*x, dx));
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[id].value, |a, &y| *a = *a * (F::one() - y * y));
                    out.push((*x, dx));
                }
            }
            Op::Exp { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[id].value, |a, &y| *a = *a * y);
                    out.push((*x, dx));
                }
            }
            Op::Ln { x } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[*x].value, |a, &v| *a = *a / v);
                    out.push((*x, dx));
                }
            }
            Op::Clamp { x, lo, hi } => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[*x].value, |a, &v| {
                        if v <= *lo || v >= *hi {
                            *a = F::zero();
                        }
                    });
                    out.push((*x, dx));
                }
            }
            Op::SoftmaxLast { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[id].value;
                    let nd = y.ndim();
                    let mut dx = g.clone();
                    for (mut dl, yl) in
                        dx.lanes_mut(Axis(nd - 1)).into_iter().zip(y.lanes(Axis(nd - 1)))
                    {
                        let s = dl
                            .iter()
                            .zip(yl.iter())
                            .fold(F::zero(), |acc, (a, b)| acc + *a * *b);
                        for (d, yv) in dl.iter_mut().zip(yl.iter()) {
                            *d = *yv * (*d - s);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LogSoftmaxLast { x } => {
                if self.needs(*x) {
                    let y = &self.nodes[id].value;
                    let nd = y.ndim();
                    let mut dx = g.clone();
                    for (mut dl, yl) in
                        dx.lanes_mut(Axis(nd - 1)).into_iter().zip(y.lanes(Axis(nd - 1)))
                    {
                        let s = dl.iter().fold(F::zero(), |acc, a| acc + *a);
                        for (d, yv) in dl.iter_mut().zip(yl.iter()) {
                            *d = *d - yv.exp() * s;
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm { x, gain, shift, normed, rstd } => {
                let nd = normed.ndim();
                let d = normed.shape()[nd - 1];
                let dn = F::from_f64(d as f64);
                if self.needs(*x) {
                    let gain_v = &self.nodes[*gain].value;
                    let gain1 = gain_v.view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
                    let mut dx = g.clone();
                    for ((mut dl, nl), r) in dx
                        .lanes_mut(Axis(nd - 1))
                        .into_iter()
                        .zip(normed.lanes(Axis(nd - 1)))
                        .zip(rstd.iter())
                    {
                        let mut sum_gdy = F::zero();
                        let mut sum_gdyn = F::zero();
                        for ((dv, nv), gv) in dl.iter_mut().zip(nl.iter()).zip(gain1.iter()) {
                            *dv = *dv * *gv;
                            sum_gdy += *dv;
                            sum_gdyn += *dv * *nv;
                        }
                        let mg = sum_gdy / dn;
                        let mgn = sum_gdyn / dn;
                        for (dv, nv) in dl.iter_mut().zip(nl.iter()) {
                            *dv = (*dv - mg - *nv * mgn) * *r;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    let mut dgain = Array1::<F>::zeros(d);
                    for (gl, nl) in g.lanes(Axis(nd - 1)).into_iter().zip(normed.lanes(Axis(nd - 1)))
                    {
                        for ((dg, gv), nv) in dgain.iter_mut().zip(gl.iter()).zip(nl.iter()) {
                            *dg += *gv * *nv;
                        }
                    }
                    out.push((*gain, dgain.into_dyn()));
                }
                if self.needs(*shift) {
                    out.push((*shift, reduce_to_suffix(g, &[d])));
                }
            }
            Op::Dropout { x, mask } => {
                if self.needs(*x) {
                    out.push((*x, g * mask));
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let ts = self.nodes[*table].value.shape();
                    let mut dt = ndarray::Array2::<F>::zeros((ts[0], ts[1]));
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("gather grad is 2-d");
                    for (row, &rid) in g2.rows().into_iter().zip(ids.iter()) {
                        let mut target = dt.row_mut(rid);
                        target += &row;
                    }
                    out.push((*table, dt.into_dyn()));
                }
            }
            Op::TransposeLast2 { x } => {
                if self.needs(*x) {
                    let nd = g.ndim();
                    let mut v = g.view();
                    v.swap_axes(nd - 2, nd - 1);
                    out.push((*x, v.to_owned()));
                }
            }
            Op::Reshape { x, orig } => {
                if self.needs(*x) {
                    let dx = g.clone().into_shape_with_order(IxDyn(orig)).expect("same length");
                    out.push((*x, dx));
                }
            }
            Op::SliceLast { x, start, len } => {
                if self.needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let nd = xs.len();
                    let mut dx = ArrayD::<F>::zeros(IxDyn(xs));
                    dx.slice_axis_mut(Axis(nd - 1), Slice::from(*start..start + len))
                        .assign(g);
                    out.push((*x, dx));
                }
            }
            Op::ConcatLast { lhs, rhs, split } => {
                let nd = g.ndim();
                if self.needs(*lhs) {
                    out.push((
                        *lhs,
                        g.slice_axis(Axis(nd - 1), Slice::from(0..*split)).to_owned(),
                    ));
                }
                if self.needs(*rhs) {
                    let total = g.shape()[nd - 1];
                    out.push((
                        *rhs,
                        g.slice_axis(Axis(nd - 1), Slice::from(*split..total)).to_owned(),
                    ));
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let gv = *g.iter().next().expect("scalar grad");
                    let shape = self.nodes[*x].value.raw_dim();
                    out.push((*x, ArrayD::from_elem(shape, gv)));
                }
            }
            Op::MeanAll { x } => {
                if self.needs(*x) {
                    let n = self.nodes[*x].value.len();
                    let gv = *g.iter().next().expect("scalar grad") / F::from_f64(n as f64);
                    let shape = self.nodes[*x].value.raw_dim();
                    out.push((*x, ArrayD::from_elem(shape, gv)));
                }
            }
            Op::SumLast { x } => {
                if self.needs(*x) {
                    let xs = self.nodes[*x].value.shape();
                    let nd = xs.len();
                    let dx = g
                        .view()
                        .insert_axis(Axis(nd - 1))
                        .broadcast(IxDyn(xs))
                        .expect("broadcast over last axis")
                        .to_owned();
                    out.push((*x, dx));
                }
            }
        }
        out
    }
}
