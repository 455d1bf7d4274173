//! Tape-based reverse mode over matrix-valued nodes.

use crate::gemm::gemm;
use crate::{Dense, NnError, ParamId, ParamStore, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Dense {
        x: NodeId,
        layer: Dense,
        act: Activation,
    },
    Relu(NodeId),
    MaxPoolGroups {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    ConcatCols(Vec<NodeId>),
    L2NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Mean(NodeId),
    CosineDistanceRows(NodeId, NodeId),
    SqDistanceRows(NodeId, NodeId),
    TripletCosine {
        anchor: NodeId,
        positive: NodeId,
        negatives: NodeId,
        lists: Vec<Vec<usize>>,
        margin: f64,
    },
    GridSmoothness {
        x: NodeId,
        height: usize,
        width: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    nodes: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &[Option<Tensor>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

/// Records a forward pass against a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    frozen: Vec<bool>,
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NnError {
    NnError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            frozen: vec![false; params.len()],
            nodes: Vec::new(),
        }
    }

    /// Parameters listed here get no gradient and cost no backward work.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.frozen[id.0] = true;
        }
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let value = self.params.get(id).clone();
        let ng = !self.frozen[id.0];
        self.push(value, Op::Param(id), ng)
    }

    pub fn dense(&mut self, x: NodeId, layer: &Dense, act: Activation) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let w = self.params.get(layer.w);
        let b = self.params.get(layer.b);
        if xv.cols() != layer.inputs {
            return Err(mismatch("dense", xv, w));
        }
        let m = xv.rows();
        let mut out = vec![0.0; m * layer.outputs];
        for row in out.chunks_exact_mut(layer.outputs) {
            row.copy_from_slice(b.data());
        }
        gemm(
            m,
            layer.inputs,
            layer.outputs,
            xv.data(),
            false,
            w.data(),
            true,
            &mut out,
            1.0,
        );
        if act == Activation::Relu {
            for v in &mut out {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        let trainable = !self.frozen[layer.w.0] || !self.frozen[layer.b.0];
        let ng = self.ng(x) || trainable;
        let value = Tensor::matrix(m, layer.outputs, out)?;
        Ok(self.push(
            value,
            Op::Dense {
                x,
                layer: *layer,
                act,
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        for e in v.data_mut() {
            if *e < 0.0 {
                *e = 0.0;
            }
        }
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Element-wise max over consecutive groups of `group` rows:
    /// `(G*group) x K -> G x K`. Ties go to the lowest row.
    pub fn maxpool_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if group == 0 || xv.rows() % group != 0 {
            return Err(NnError::ShapeMismatch {
                op: "maxpool_groups",
                left: xv.shape().to_vec(),
                right: vec![group],
            });
        }
        let k = xv.cols();
        let groups = xv.rows() / group;
        let mut out = vec![f64::NEG_INFINITY; groups * k];
        let mut argmax = vec![0usize; groups * k];
        for g in 0..groups {
            let o = &mut out[g * k..(g + 1) * k];
            let a = &mut argmax[g * k..(g + 1) * k];
            for r in g * group..(g + 1) * group {
                let row = xv.row(r);
                for c in 0..k {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        a[c] = r;
                    }
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::matrix(groups, k, out)?;
        Ok(self.push(value, Op::MaxPoolGroups { x, argmax }, ng))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[x.0].value.clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(NnError::Empty("concat_cols"))?;
        let rows = self.nodes[first.0].value.rows();
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.rows() != rows {
                return Err(mismatch("concat_cols", &self.nodes[first.0].value, v));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        let value = Tensor::matrix(rows, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let mut v = self.nodes[x.0].value.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if n <= 1e-12 {
                return Err(NnError::ZeroNorm(n));
            }
            row.iter_mut().for_each(|a| *a /= n);
            norms.push(n);
        }
        let ng = self.ng(x);
        Ok(self.push(v, Op::L2NormalizeRows { x, norms }, ng))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * xv.cols());
        for &i in idx {
            if i >= xv.rows() {
                return Err(NnError::RowIndex {
                    index: i,
                    len: xv.rows(),
                });
            }
            out.extend_from_slice(xv.row(i));
        }
        let value = Tensor::matrix(idx.len(), xv.cols(), out)?;
        let ng = self.ng(x);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: &'static str, sign: f64) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(mismatch(op, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + sign * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        let o = if sign > 0.0 { Op::Add(a, b) } else { Op::Sub(a, b) };
        Ok(self.push(value, o, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "add", 1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, "sub", -1.0)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut v = self.nodes[x.0].value.clone();
        v.data_mut().iter_mut().for_each(|e| *e *= s);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, s), ng)
    }

    /// Mean over all elements, as a `1 x 1` node.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(NnError::Empty("mean"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), ng))
    }

    /// Per-row `1 - <a_i, b_i>`; rows are expected to be unit length.
    pub fn cosine_distance_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(mismatch("cosine_distance_rows", av, bv));
        }
        let out = (0..av.rows())
            .map(|r| 1.0 - dot(av.row(r), bv.row(r)))
            .collect();
        let value = Tensor::matrix(av.rows(), 1, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::CosineDistanceRows(a, b), ng))
    }

    /// Per-row squared Euclidean distance.
    pub fn sq_distance_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() != bv.shape() {
            return Err(mismatch("sq_distance_rows", av, bv));
        }
        let out = (0..av.rows())
            .map(|r| {
                av.row(r)
                    .iter()
                    .zip(bv.row(r))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let value = Tensor::matrix(av.rows(), 1, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::SqDistanceRows(a, b), ng))
    }

    /// Per-anchor hinge loss with cosine distance, averaged over that anchor's
    /// negatives: `mean_j max(d(a,p) - d(a,n_j) + margin, 0)`.
    ///
    /// `lists[i]` indexes rows of `negatives` used for anchor row `i`.
    pub fn triplet_cosine(
        &mut self,
        anchor: NodeId,
        positive: NodeId,
        negatives: NodeId,
        lists: Vec<Vec<usize>>,
        margin: f64,
    ) -> Result<NodeId> {
        let av = &self.nodes[anchor.0].value;
        let pv = &self.nodes[positive.0].value;
        let nv = &self.nodes[negatives.0].value;
        if av.shape() != pv.shape() || av.cols() != nv.cols() || lists.len() != av.rows() {
            return Err(mismatch("triplet_cosine", av, nv));
        }
        let mut out = Vec::with_capacity(av.rows());
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(NnError::EmptyNegatives(i));
            }
            let a = av.row(i);
            let d_pos = 1.0 - dot(a, pv.row(i));
            let mut acc = 0.0;
            for &j in list {
                if j >= nv.rows() {
                    return Err(NnError::RowIndex {
                        index: j,
                        len: nv.rows(),
                    });
                }
                let d_neg = 1.0 - dot(a, nv.row(j));
                acc += (d_pos - d_neg + margin).max(0.0);
            }
            out.push(acc / list.len() as f64);
        }
        let value = Tensor::matrix(av.rows(), 1, out)?;
        let ng = self.ng(anchor) || self.ng(positive) || self.ng(negatives);
        Ok(self.push(
            value,
            Op::TripletCosine {
                anchor,
                positive,
                negatives,
                lists,
                margin,
            },
            ng,
        ))
    }

    /// Sum of squared differences between every grid cell and its right,
    /// lower and lower-right neighbours. Rows of `x` are cells in row-major
    /// `(y, x)` order; out-of-grid neighbours are skipped.
    pub fn grid_smoothness(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.rows() != height * width {
            return Err(NnError::ShapeMismatch {
                op: "grid_smoothness",
                left: xv.shape().to_vec(),
                right: vec![height, width],
            });
        }
        let mut s = 0.0;
        for_each_neighbour_pair(height, width, |p, q| {
            s += xv
                .row(p)
                .iter()
                .zip(xv.row(q))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        });
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::GridSmoothness {
                x,
                height,
                width,
            },
            ng,
        ))
    }

    /// Reverse pass seeded at `loss` with gradient 1.
    pub fn backward_scalar(&self, loss: NodeId) -> Result<Gradients> {
        let shape = self
            .nodes
            .get(loss.0)
            .ok_or(NnError::BackwardBeforeForward(loss.0))?
            .value
            .shape()
            .to_vec();
        let mut seed = Tensor::zeros(shape);
        seed.data_mut().iter_mut().for_each(|v| *v = 1.0);
        self.backward(&[(loss, seed)])
    }

    /// Reverse pass from arbitrary upstream gradients.
    pub fn backward(&self, seeds: &[(NodeId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params: Vec<Option<Tensor>> = vec![None; self.params.len()];
        if seeds.is_empty() {
            return Err(NnError::Empty("backward seeds"));
        }
        for (id, g) in seeds {
            let node = self
                .nodes
                .get(id.0)
                .ok_or(NnError::BackwardBeforeForward(id.0))?;
            if node.value.shape() != g.shape() {
                return Err(mismatch("backward seed", &node.value, g));
            }
            accumulate(&mut grads[id.0], g.clone());
        }

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    accumulate(&mut params[id.0], g);
                }
                Op::Dense { x, layer, act } => {
                    self.dense_backward(*x, layer, *act, &node.value, g, &mut grads, &mut params);
                }
                Op::Relu(x) => {
                    if self.ng(*x) {
                        let mut g = g;
                        for (gv, y) in g.data_mut().iter_mut().zip(node.value.data()) {
                            if *y <= 0.0 {
                                *gv = 0.0;
                            }
                        }
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::MaxPoolGroups { x, argmax } => {
                    if self.ng(*x) {
                        let xv = &self.nodes[x.0].value;
                        let k = xv.cols();
                        let mut gx = Tensor::zeros(xv.shape().to_vec());
                        for (slot, (&row, gv)) in argmax.iter().zip(g.data()).enumerate() {
                            gx.data_mut()[row * k + slot % k] += gv;
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Reshape(x) => {
                    if self.ng(*x) {
                        let shape = self.nodes[x.0].value.shape().to_vec();
                        accumulate(&mut grads[x.0], g.reshaped(shape)?);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let mut offset = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let c = pv.cols();
                        if self.ng(*p) {
                            let mut gp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                gp.extend_from_slice(&g.row(r)[offset..offset + c]);
                            }
                            accumulate(&mut grads[p.0], Tensor::new(pv.shape().to_vec(), gp)?);
                        }
                        offset += c;
                    }
                }
                Op::L2NormalizeRows { x, norms } => {
                    if self.ng(*x) {
                        let y = &node.value;
                        let mut gx = g.clone();
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let proj = dot(yr, gr);
                            let n = norms[r];
                            for (o, (gy, yy)) in gx.row_mut(r).iter_mut().zip(gr.iter().zip(yr)) {
                                *o = (gy - yy * proj) / n;
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::GatherRows { x, idx } => {
                    if self.ng(*x) {
                        let xv = &self.nodes[x.0].value;
                        let mut gx = Tensor::zeros(xv.shape().to_vec());
                        for (r, &src) in idx.iter().enumerate() {
                            for (o, v) in gx.row_mut(src).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                    if self.ng(*b) {
                        let mut gb = g.clone();
                        gb.data_mut().iter_mut().for_each(|v| *v *= sign);
                        accumulate(&mut grads[b.0], gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Scale(x, s) => {
                    if self.ng(*x) {
                        let mut g = g;
                        g.data_mut().iter_mut().for_each(|v| *v *= s);
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Mean(x) => {
                    if self.ng(*x) {
                        let xv = &self.nodes[x.0].value;
                        let per = g.data()[0] / xv.len() as f64;
                        let gx = Tensor::new(xv.shape().to_vec(), vec![per; xv.len()])?;
                        accumulate(&mut grads[x.0], gx);
                    }
                }
                Op::CosineDistanceRows(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.ng(*a) {
                        let mut ga = bv.clone();
                        for r in 0..ga.rows() {
                            let s = -g.data()[r];
                            ga.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                    if self.ng(*b) {
                        let mut gb = av.clone();
                        for r in 0..gb.rows() {
                            let s = -g.data()[r];
                            gb.row_mut(r).iter_mut().for_each(|v| *v *= s);
                        }
                        accumulate(&mut grads[b.0], gb);
                    }
                }
                Op::SqDistanceRows(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let mut ga = av.clone();
                    for r in 0..ga.rows() {
                        let s = 2.0 * g.data()[r];
                        for (o, y) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                            *o = s * (*o - y);
                        }
                    }
                    if self.ng(*b) {
                        let mut gb = ga.clone();
                        gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                        accumulate(&mut grads[b.0], gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads[a.0], ga);
                    }
                }
                Op::TripletCosine {
                    anchor,
                    positive,
                    negatives,
                    lists,
                    margin,
                } => {
                    let av = &self.nodes[anchor.0].value;
                    let pv = &self.nodes[positive.0].value;
                    let nv = &self.nodes[negatives.0].value;
                    let mut ga = Tensor::zeros(av.shape().to_vec());
                    let mut gp = Tensor::zeros(pv.shape().to_vec());
                    let mut gn = Tensor::zeros(nv.shape().to_vec());
                    for (i, list) in lists.iter().enumerate() {
                        let a = av.row(i);
                        let p = pv.row(i);
                        let sim_pos = dot(a, p);
                        let w = g.data()[i] / list.len() as f64;
                        for &j in list {
                            let n = nv.row(j);
                            // hinge argument: -<a,p> + <a,n> + margin
                            if -sim_pos + dot(a, n) + margin > 0.0 {
                                for e in 0..a.len() {
                                    ga.row_mut(i)[e] += w * (n[e] - p[e]);
                                    gp.row_mut(i)[e] -= w * a[e];
                                    gn.row_mut(j)[e] += w * a[e];
                                }
                            }
                        }
                    }
                    if self.ng(*anchor) {
                        accumulate(&mut grads[anchor.0], ga);
                    }
                    if self.ng(*positive) {
                        accumulate(&mut grads[positive.0], gp);
                    }
                    if self.ng(*negatives) {
                        accumulate(&mut grads[negatives.0], gn);
                    }
                }
                Op::GridSmoothness { x, height, width } => {
                    if self.ng(*x) {
                        let xv = &self.nodes[x.0].value;
                        let s = g.data()[0];
                        let mut gx = Tensor::zeros(xv.shape().to_vec());
                        for_each_neighbour_pair(*height, *width, |p, q| {
                            for c in 0..xv.cols() {
                                let d = 2.0 * s * (xv.row(p)[c] - xv.row(q)[c]);
                                gx.row_mut(p)[c] += d;
                                gx.row_mut(q)[c] -= d;
                            }
                        });
                        accumulate(&mut grads[x.0], gx);
                    }
                }
            }
        }
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn dense_backward(
        &self,
        x: NodeId,
        layer: &Dense,
        act: Activation,
        y: &Tensor,
        mut g: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut [Option<Tensor>],
    ) {
        if act == Activation::Relu {
            for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                if *yv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let xv = &self.nodes[x.0].value;
        let (n_in, n_out) = (layer.inputs, layer.outputs);
        // Pooling upstream leaves most rows with zero gradient; only keep the live ones.
        let live: Vec<usize> = (0..g.rows())
            .filter(|&r| g.row(r).iter().any(|v| *v != 0.0))
            .collect();
        if live.is_empty() {
            return;
        }
        let dense_rows = live.len() == g.rows();
        let (gy, xs): (std::borrow::Cow<[f64]>, std::borrow::Cow<[f64]>) = if dense_rows {
            (g.data().into(), xv.data().into())
        } else {
            let mut gy = Vec::with_capacity(live.len() * n_out);
            let mut xs = Vec::with_capacity(live.len() * n_in);
            for &r in &live {
                gy.extend_from_slice(g.row(r));
                xs.extend_from_slice(xv.row(r));
            }
            (gy.into(), xs.into())
        };
        let m = live.len();
        if !self.frozen[layer.w.0] {
            let mut gw = vec![0.0; n_out * n_in];
            gemm(n_out, m, n_in, &gy, true, &xs, false, &mut gw, 0.0);
            accumulate(
                &mut params[layer.w.0],
                Tensor::matrix(n_out, n_in, gw).expect("sized"),
            );
        }
        if !self.frozen[layer.b.0] {
            let mut gb = vec![0.0; n_out];
            for row in gy.chunks_exact(n_out) {
                for (o, v) in gb.iter_mut().zip(row) {
                    *o += v;
                }
            }
            accumulate(
                &mut params[layer.b.0],
                Tensor::matrix(1, n_out, gb).expect("sized"),
            );
        }
        if self.ng(x) {
            let w = self.params.get(layer.w);
            let mut gx_live = vec![0.0; m * n_in];
            gemm(m, n_out, n_in, &gy, false, w.data(), false, &mut gx_live, 0.0);
            let gx = if dense_rows {
                Tensor::new(xv.shape().to_vec(), gx_live).expect("sized")
            } else {
                let mut full = Tensor::zeros(xv.shape().to_vec());
                for (k, &r) in live.iter().enumerate() {
                    full.row_mut(r)
                        .copy_from_slice(&gx_live[k * n_in..(k + 1) * n_in]);
                }
                full
            };
            accumulate(&mut grads[x.0], gx);
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn for_each_neighbour_pair(height: usize, width: usize, mut f: impl FnMut(usize, usize)) {
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < height && nx < width {
                    f(p, ny * width + nx);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_chain_relu_matches_hand_formula() {
        // f(x) = relu(w x + b), w = 2, b = -1, x = 3 -> 5; df/dw = x, df/db = 1, df/dx = w
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 1, vec![2.0]).unwrap());
        let b = store.add("b", Tensor::matrix(1, 1, vec![-1.0]).unwrap());
        let layer = Dense {
            w,
            b,
            inputs: 1,
            outputs: 1,
        };
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.dense(x, &layer, Activation::Relu).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let grads = g.backward_scalar(y).unwrap();
        assert_eq!(grads.param(w).unwrap().data(), &[3.0]);
        assert_eq!(grads.param(b).unwrap().data(), &[1.0]);
        assert_eq!(grads.node(x).unwrap().data(), &[2.0]);

        // on the inactive side everything is zero
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::scalar(-3.0));
        let y = g.dense(x, &layer, Activation::Relu).unwrap();
        let grads = g.backward_scalar(y).unwrap();
        assert!(grads.param(w).is_none());
        assert!(grads.node(x).is_none());
    }

    #[test]
    fn maxpool_routes_to_argmax_rows_only() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        // two groups of three rows, two columns
        let x = g.variable(
            Tensor::matrix(6, 2, vec![1.0, 9.0, 5.0, 2.0, 3.0, 3.0, 0.0, 0.0, -1.0, 4.0, 7.0, 4.0])
                .unwrap(),
        );
        let y = g.maxpool_groups(x, 3).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 9.0, 7.0, 4.0]);
        let grads = g.backward_scalar(y).unwrap();
        // column 1 of group 2 ties between rows 4 and 5: lowest row wins
        assert_eq!(
            grads.node(x).unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn backward_rejects_unknown_node() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let err = g.backward_scalar(NodeId(4)).unwrap_err();
        assert!(matches!(err, NnError::BackwardBeforeForward(4)));
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap());
        let b = store.add("b", Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let layer = Dense {
            w,
            b,
            inputs: 2,
            outputs: 1,
        };
        let mut g = Graph::new(&store);
        g.freeze([w]);
        let x = g.input(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let y = g.dense(x, &layer, Activation::Identity).unwrap();
        let grads = g.backward_scalar(y).unwrap();
        assert!(grads.param(w).is_none());
        assert_eq!(grads.param(b).unwrap().data(), &[1.0]);
    }

    #[test]
    fn smoothness_of_uniform_grid_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.variable(Tensor::matrix(6, 4, vec![0.3; 24]).unwrap());
        let s = g.grid_smoothness(x, 2, 3).unwrap();
        assert_eq!(g.value(s).data(), &[0.0]);
    }
}
