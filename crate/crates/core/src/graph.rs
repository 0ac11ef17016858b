//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built per training step: every operation computes its
//! forward value eagerly and records enough to replay the chain rule
//! backwards. Node ids are indices into the graph's arena, so creation order
//! is already a topological order and the backward pass is a single reverse
//! sweep. Parameters live outside the graph in [`Param`] cells and persist
//! across steps; [`Graph::param`] injects the current value and
//! [`Graph::accumulate_param_grads`] writes gradients back (main thread only,
//! so batch-parallel graphs stay deterministic under any thread count).

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

// ---------------------------------------------------------------------------
// Parameters and batch-norm statistics cells
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ParamInner<E: Scalar> {
    pub name: String,
    pub value: Tensor<E>,
    pub grad: Option<Tensor<E>>,
    /// Per-parameter learning-rate multiplier (asymmetric fine-tuning rates).
    pub lr_mult: f64,
}

/// Shared, persistent trainable tensor.
#[derive(Clone, Debug)]
pub struct Param<E: Scalar>(Arc<RwLock<ParamInner<E>>>);

impl<E: Scalar> Param<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Param(Arc::new(RwLock::new(ParamInner {
            name: name.into(),
            value,
            grad: None,
            lr_mult: 1.0,
        })))
    }

    pub fn name(&self) -> String {
        self.0.read().unwrap().name.clone()
    }

    pub fn value(&self) -> Tensor<E> {
        self.0.read().unwrap().value.clone()
    }

    pub fn set_value(&self, v: Tensor<E>) {
        self.0.write().unwrap().value = v;
    }

    pub fn lr_mult(&self) -> f64 {
        self.0.read().unwrap().lr_mult
    }

    pub fn set_lr_mult(&self, m: f64) {
        self.0.write().unwrap().lr_mult = m;
    }

    pub fn grad(&self) -> Option<Tensor<E>> {
        self.0.read().unwrap().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.write().unwrap().grad = None;
    }

    pub fn add_grad(&self, g: &Tensor<E>) {
        let mut inner = self.0.write().unwrap();
        match &mut inner.grad {
            Some(acc) => {
                let dst = acc.data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d = *d + *s;
                }
            }
            None => inner.grad = Some(g.clone()),
        }
    }

    /// In-place update `value += delta * scale` (optimizer use).
    pub fn axpy(&self, delta: &Tensor<E>, scale: E) {
        let mut inner = self.0.write().unwrap();
        let dst = inner.value.data_mut();
        for (d, s) in dst.iter_mut().zip(delta.data()) {
            *d = *d + *s * scale;
        }
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }
}

#[derive(Debug)]
pub struct BnStatInner<E: Scalar> {
    pub name: String,
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
}

/// Running batch-norm statistics (persist across steps, not optimized).
#[derive(Clone, Debug)]
pub struct BnStat<E: Scalar>(Arc<RwLock<BnStatInner<E>>>);

impl<E: Scalar> BnStat<E> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BnStat(Arc::new(RwLock::new(BnStatInner {
            name: name.into(),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], E::one()),
        })))
    }

    pub fn name(&self) -> String {
        self.0.read().unwrap().name.clone()
    }

    pub fn mean(&self) -> Tensor<E> {
        self.0.read().unwrap().mean.clone()
    }

    pub fn var(&self) -> Tensor<E> {
        self.0.read().unwrap().var.clone()
    }

    pub fn set(&self, mean: Tensor<E>, var: Tensor<E>) {
        let mut inner = self.0.write().unwrap();
        inner.mean = mean;
        inner.var = var;
    }

    /// `running = (1-m)*running + m*batch`.
    pub fn update(&self, batch_mean: &Tensor<E>, batch_var: &Tensor<E>, momentum: E) {
        let mut inner = self.0.write().unwrap();
        let one_m = E::one() - momentum;
        for (r, b) in inner.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *r = one_m * *r + momentum * *b;
        }
        for (r, b) in inner.var.data_mut().iter_mut().zip(batch_var.data()) {
            *r = one_m * *r + momentum * *b;
        }
    }
}

/// A batch-stat observation recorded during a training-mode forward pass.
/// The trainer applies these to the owning [`BnStat`] in deterministic order.
pub struct BnUpdate<E: Scalar> {
    pub stat: BnStat<E>,
    pub mean: Tensor<E>,
    pub var: Tensor<E>,
    pub momentum: E,
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

enum Op<E: Scalar> {
    Leaf,
    ParamLeaf(Param<E>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, E),
    AddScalar(NodeId),
    Exp(NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Bmm { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Reshape(NodeId),
    Permute3(NodeId, [usize; 3]),
    Concat { axis: usize, inputs: Vec<NodeId> },
    Narrow { x: NodeId, axis: usize, start: usize },
    GatherRows { x: NodeId, idx: Arc<Vec<usize>> },
    ScatterRows { x: NodeId, idx: Arc<Vec<usize>> },
    RepeatRow { x: NodeId },
    SoftmaxLast(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<E>, rstd: Vec<E> },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<E>,
        rstd: Vec<E>,
        training: bool,
    },
    Conv2d { x: NodeId, w: NodeId, b: NodeId },
    Upsample2x(NodeId),
    Mse { pred: NodeId, target: NodeId },
    CrossEntropy {
        logits: NodeId,
        labels: Arc<Vec<u32>>,
        class_weights: Option<Arc<Vec<E>>>,
        probs: Tensor<E>,
        weight_sum: E,
    },
    Rope { x: NodeId, ay: NodeId, ax: NodeId },
    SumAll(NodeId),
    SumAxis0(NodeId),
}

struct Node<E: Scalar> {
    value: Tensor<E>,
    op: Op<E>,
    needs_grad: bool,
}

pub struct Graph<E: Scalar> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
    param_ids: HashMap<usize, NodeId>,
    bn_pending: Vec<BnUpdate<E>>,
    grad_enabled: bool,
}

impl<E: Scalar> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Scalar> Graph<E> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_ids: HashMap::new(),
            bn_pending: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Gradient-free graph for inference; tracks no backward state.
    pub fn inference() -> Self {
        let mut g = Self::new();
        g.grad_enabled = false;
        g
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Watermark for [`Graph::truncate`].
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    /// Drop all nodes at or above `mark`, releasing their buffers. Only valid
    /// in inference graphs where no later backward pass will need them;
    /// callers must not reference dropped ids afterwards.
    pub fn truncate(&mut self, mark: usize) {
        assert!(!self.grad_enabled, "truncate is only valid on inference graphs");
        self.nodes.truncate(mark);
        self.param_ids.retain(|_, id| *id < mark);
    }

    pub fn value(&self, id: NodeId) -> &Tensor<E> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<E>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, needs: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad: needs && self.grad_enabled });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn constant(&mut self, value: Tensor<E>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf with gradient tracking (gradient-check inputs).
    pub fn leaf(&mut self, value: Tensor<E>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Inject a parameter; repeated injections of the same cell share a node.
    pub fn param(&mut self, p: &Param<E>) -> NodeId {
        if let Some(&id) = self.param_ids.get(&p.key()) {
            return id;
        }
        let value = p.value();
        let id = self.push(value, Op::ParamLeaf(p.clone()), true);
        self.param_ids.insert(p.key(), id);
        id
    }

    // -- elementwise ---------------------------------------------------------

    fn zip2(&mut self, a: NodeId, b: NodeId, op_name: &'static str) -> Result<()> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Shape {
                op: op_name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, "add").unwrap();
        let v = ew2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, "sub").unwrap();
        let v = ew2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, "mul").unwrap();
        let v = ew2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip2(a, b, "div").unwrap();
        let v = ew2(&self.nodes[a].value, &self.nodes[b].value, |x, y| x / y);
        let needs = self.needs(a) || self.needs(b);
        self.push(v, Op::Div(a, b), needs)
    }

    /// `[n, d] + [d]` row broadcast (bias add, level embedding).
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let ashape = self.nodes[a].value.shape().to_vec();
        let d = *ashape.last().expect("add_row on scalar");
        assert_eq!(self.nodes[row].value.shape(), [d], "add_row: row dim mismatch");
        let rowv = self.nodes[row].value.clone();
        let mut v = self.nodes[a].value.clone();
        for chunk in v.data_mut().chunks_mut(d) {
            for (x, r) in chunk.iter_mut().zip(rowv.data()) {
                *x = *x + *r;
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), needs)
    }

    pub fn scale(&mut self, a: NodeId, s: E) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * s);
        let needs = self.needs(a);
        self.push(v, Op::Scale(a, s), needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: E) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + s);
        let needs = self.needs(a);
        self.push(v, Op::AddScalar(a), needs)
    }

    /// Exact elementwise exponential (parameter-path use, e.g. frequencies
    /// from log-frequencies).
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.exp());
        let needs = self.needs(a);
        self.push(v, Op::Exp(a), needs)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(gelu_fwd);
        let needs = self.needs(a);
        self.push(v, Op::Gelu(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| if x > E::zero() { x } else { E::zero() });
        let needs = self.needs(a);
        self.push(v, Op::Relu(a), needs)
    }

    // -- linear algebra ------------------------------------------------------

    /// 2-D matrix product with optional transposes: `op_a(a) @ op_b(b)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, ka) = logical_dims(av.shape(), ta);
        let (kb, n) = logical_dims(bv.shape(), tb);
        if ka != kb {
            panic!(
                "matmul inner dim mismatch: {:?}{} vs {:?}{}",
                av.shape(),
                if ta { "ᵀ" } else { "" },
                bv.shape(),
                if tb { "ᵀ" } else { "" }
            );
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_into(
            out.data_mut(),
            m,
            n,
            av.data(),
            av.shape(),
            ta,
            bv.data(),
            bv.shape(),
            tb,
            E::zero(),
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Matmul { a, b, ta, tb }, needs)
    }

    /// Batched 3-D matmul over the leading axis.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape().len(), 3, "bmm lhs must be 3-D");
        assert_eq!(bv.shape().len(), 3, "bmm rhs must be 3-D");
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
        let bsz = av.shape()[0];
        let (m, ka) = logical_dims(&av.shape()[1..], ta);
        let (kb, n) = logical_dims(&bv.shape()[1..], tb);
        assert_eq!(ka, kb, "bmm inner dim mismatch");
        let mut out = Tensor::zeros(&[bsz, m, n]);
        let (astep, bstep) = (av.shape()[1] * av.shape()[2], bv.shape()[1] * bv.shape()[2]);
        {
            let od = out.data_mut();
            for i in 0..bsz {
                gemm_into(
                    &mut od[i * m * n..(i + 1) * m * n],
                    m,
                    n,
                    &av.data()[i * astep..(i + 1) * astep],
                    &av.shape()[1..],
                    ta,
                    &bv.data()[i * bstep..(i + 1) * bstep],
                    &bv.shape()[1..],
                    tb,
                    E::zero(),
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Bmm { a, b, ta, tb }, needs)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = self.nodes[a].value.reshaped(shape);
        let needs = self.needs(a);
        self.push(v, Op::Reshape(a), needs)
    }

    pub fn permute3(&mut self, a: NodeId, perm: [usize; 3]) -> NodeId {
        let v = permute3_fwd(&self.nodes[a].value, perm);
        let needs = self.needs(a);
        self.push(v, Op::Permute3(a, perm), needs)
    }

    pub fn concat(&mut self, axis: usize, inputs: &[NodeId]) -> NodeId {
        assert!(!inputs.is_empty(), "concat of zero tensors");
        let v = {
            let tensors: Vec<&Tensor<E>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            concat_fwd(axis, &tensors)
        };
        let needs = inputs.iter().any(|&i| self.needs(i));
        self.push(v, Op::Concat { axis, inputs: inputs.to_vec() }, needs)
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = narrow_fwd(&self.nodes[x].value, axis, start, len);
        let needs = self.needs(x);
        self.push(v, Op::Narrow { x, axis, start }, needs)
    }

    /// Select rows (first axis) by index list; duplicates allowed.
    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let xv = &self.nodes[x].value;
        let rowlen: usize = xv.shape()[1..].iter().product();
        let mut shape = xv.shape().to_vec();
        shape[0] = idx.len();
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                od[i * rowlen..(i + 1) * rowlen]
                    .copy_from_slice(&xv.data()[r * rowlen..(r + 1) * rowlen]);
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::GatherRows { x, idx }, needs)
    }

    /// Place rows of `x` at `idx` within `rows` zero rows; indices unique.
    pub fn scatter_rows(&mut self, x: NodeId, rows: usize, idx: Arc<Vec<usize>>) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.shape()[0], idx.len(), "scatter_rows index count mismatch");
        let rowlen: usize = xv.shape()[1..].iter().product();
        let mut shape = xv.shape().to_vec();
        shape[0] = rows;
        let mut out = Tensor::zeros(&shape);
        {
            let od = out.data_mut();
            for (i, &r) in idx.iter().enumerate() {
                od[r * rowlen..(r + 1) * rowlen]
                    .copy_from_slice(&xv.data()[i * rowlen..(i + 1) * rowlen]);
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::ScatterRows { x, idx }, needs)
    }

    /// Tile a `[d]` vector into `[k, d]`.
    pub fn repeat_row(&mut self, x: NodeId, k: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.shape().len(), 1, "repeat_row takes a vector");
        let d = xv.shape()[0];
        let mut out = Tensor::zeros(&[k, d]);
        {
            let od = out.data_mut();
            for i in 0..k {
                od[i * d..(i + 1) * d].copy_from_slice(xv.data());
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::RepeatRow { x }, needs)
    }

    // -- normalization / activations over structured data ---------------------

    pub fn softmax_last(&mut self, x: NodeId) -> NodeId {
        let v = softmax_last_fwd(&self.nodes[x].value);
        let needs = self.needs(x);
        self.push(v, Op::SoftmaxLast(x), needs)
    }

    /// Layer normalization over the last axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: E) -> NodeId {
        let xv = &self.nodes[x].value;
        let d = *xv.shape().last().expect("layer_norm on scalar");
        assert_eq!(self.nodes[gamma].value.shape(), [d]);
        assert_eq!(self.nodes[beta].value.shape(), [d]);
        let rows = xv.len() / d;
        let mut mean = vec![E::zero(); rows];
        let mut rstd = vec![E::zero(); rows];
        let mut out = Tensor::zeros(xv.shape());
        {
            let gd = self.nodes[gamma].value.data();
            let bd = self.nodes[beta].value.data();
            let od = out.data_mut();
            let inv_d = E::from_f64(1.0 / d as f64);
            for r in 0..rows {
                let row = &xv.data()[r * d..(r + 1) * d];
                let mu = row.iter().fold(E::zero(), |s, &v| s + v) * inv_d;
                let var = row.iter().fold(E::zero(), |s, &v| s + (v - mu) * (v - mu)) * inv_d;
                let rs = (var + eps).sqrt().recip();
                mean[r] = mu;
                rstd[r] = rs;
                let orow = &mut od[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (row[j] - mu) * rs * gd[j] + bd[j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, mean, rstd }, needs)
    }

    /// Batch normalization over a `[C, H, W]` map, statistics per channel.
    /// In training mode the observed batch statistics are queued on the graph
    /// ([`Graph::take_bn_updates`]); in eval mode `stat`'s running values are
    /// used and nothing is queued.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stat: &BnStat<E>,
        training: bool,
        momentum: E,
        eps: E,
    ) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.shape().len(), 3, "batch_norm expects [C, H, W]");
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = h * w;
        let inv_n = E::from_f64(1.0 / n as f64);
        let mut mean = vec![E::zero(); c];
        let mut var = vec![E::zero(); c];
        if training {
            for ci in 0..c {
                let plane = &xv.data()[ci * n..(ci + 1) * n];
                let mu = plane.iter().fold(E::zero(), |s, &v| s + v) * inv_n;
                let va = plane.iter().fold(E::zero(), |s, &v| s + (v - mu) * (v - mu)) * inv_n;
                mean[ci] = mu;
                var[ci] = va;
            }
            // unbiased variance for the running estimate
            let bessel = E::from_f64(n as f64 / (n as f64 - 1.0).max(1.0));
            let run_var: Vec<E> = var.iter().map(|&v| v * bessel).collect();
            self.bn_pending.push(BnUpdate {
                stat: stat.clone(),
                mean: Tensor::from_vec(vec![c], mean.clone()),
                var: Tensor::from_vec(vec![c], run_var),
                momentum,
            });
        } else {
            mean.copy_from_slice(stat.mean().data());
            var.copy_from_slice(stat.var().data());
        }
        let rstd: Vec<E> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut out = Tensor::zeros(xv.shape());
        {
            let gd = self.nodes[gamma].value.data();
            let bd = self.nodes[beta].value.data();
            let od = out.data_mut();
            for ci in 0..c {
                let (mu, rs, ga, be) = (mean[ci], rstd[ci], gd[ci], bd[ci]);
                let plane = &xv.data()[ci * n..(ci + 1) * n];
                let oplane = &mut od[ci * n..(ci + 1) * n];
                for j in 0..n {
                    oplane[j] = (plane[j] - mu) * rs * ga + be;
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::BatchNorm { x, gamma, beta, mean, rstd, training }, needs)
    }

    // -- convolutional --------------------------------------------------------

    /// 2-D convolution, stride 1, zero padding preserving extent. `x` is
    /// `[Cin, H, W]`, `w` is `[Cout, Cin, k, k]` with odd `k`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let v = conv2d_fwd(&self.nodes[x].value, &self.nodes[w].value, &self.nodes[b].value);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Conv2d { x, w, b }, needs)
    }

    /// Bilinear ×2 upsample of `[C, H, W]` (half-pixel centers).
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let v = upsample2x_fwd(&self.nodes[x].value);
        let needs = self.needs(x);
        self.push(v, Op::Upsample2x(x), needs)
    }

    // -- losses ----------------------------------------------------------------

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        self.zip2(pred, target, "mse").unwrap();
        let (p, t) = (&self.nodes[pred].value, &self.nodes[target].value);
        let n = E::from_f64(p.len() as f64);
        let s = p
            .data()
            .iter()
            .zip(t.data())
            .fold(E::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        let needs = self.needs(pred) || self.needs(target);
        self.push(Tensor::scalar(s / n), Op::Mse { pred, target }, needs)
    }

    /// Cross-entropy with integer class labels, mean over rows; optional
    /// per-class weights (weighted mean).
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Arc<Vec<u32>>,
        class_weights: Option<Arc<Vec<E>>>,
    ) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        assert_eq!(lv.shape().len(), 2, "cross_entropy expects [n, classes]");
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "label count mismatch");
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Contract(format!(
                "label id {bad} out of range for {c} classes"
            )));
        }
        let probs = softmax_last_fwd(lv);
        let mut loss = E::zero();
        let mut wsum = E::zero();
        for i in 0..n {
            let y = labels[i] as usize;
            let wy = class_weights.as_ref().map_or(E::one(), |w| w[y]);
            let p = probs.data()[i * c + y].max(E::from_f64(1e-30));
            loss = loss - wy * p.ln();
            wsum = wsum + wy;
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / wsum),
            Op::CrossEntropy { logits, labels, class_weights, probs, weight_sum: wsum },
            needs,
        ))
    }

    /// Rotate query/key vectors by per-token 2-axis angles. `x` is
    /// `[heads, n, dh]`; `ay` `[n, ky]` rotates dims `0..2*ky` pairwise,
    /// `ax` `[n, kx]` rotates dims `2*ky..2*(ky+kx)`; the rest pass through.
    pub fn rope(&mut self, x: NodeId, ay: NodeId, ax: NodeId) -> NodeId {
        let v = rope_fwd(
            &self.nodes[x].value,
            &self.nodes[ay].value,
            &self.nodes[ax].value,
        );
        let needs = self.needs(x) || self.needs(ay) || self.needs(ax);
        self.push(v, Op::Rope { x, ay, ax }, needs)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.data().iter().fold(E::zero(), |a, &b| a + b);
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Column sums of a `[n, d]` matrix.
    pub fn sum_axis0(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.shape().len(), 2, "sum_axis0 expects 2-D");
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Tensor::zeros(&[d]);
        {
            let od = out.data_mut();
            for r in 0..n {
                for j in 0..d {
                    od[j] = od[j] + xv.data()[r * d + j];
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, Op::SumAxis0(x), needs)
    }

    /// Mean over all elements.
    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].value.len();
        let s = self.sum_all(x);
        self.scale(s, E::from_f64(1.0 / n as f64))
    }

    // -- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients for `requires_grad`
    /// tensors are available via [`Graph::grad`] afterwards; forward values
    /// are unchanged.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference graph".into()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss] =
            Some(Tensor::from_vec(self.nodes[loss].value.shape().to_vec(), vec![E::one()]));
        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad || self.grads[id].is_none() {
                continue;
            }
            self.backprop(id)?;
        }
        Ok(())
    }

    fn acc_grad(&mut self, id: NodeId, delta: Tensor<E>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(g) => {
                let gd = g.data_mut();
                for (d, s) in gd.iter_mut().zip(delta.data()) {
                    *d = *d + *s;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop(&mut self, id: NodeId) -> Result<()> {
        let g = self.grads[id].clone().unwrap();
        // Some arms need immutable access to node values while accumulating;
        // all tensors are cheaply cloneable so we copy handles up front.
        match &self.nodes[id].op {
            Op::Leaf | Op::ParamLeaf(_) => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, g.clone());
                self.acc_grad(b, g);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.acc_grad(a, g.clone());
                self.acc_grad(b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                self.acc_grad(a, ew2(&g, &bv, |x, y| x * y));
                self.acc_grad(b, ew2(&g, &av, |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                let da = ew2(&g, &bv, |gy, y| gy / y);
                let mut db = ew2(&g, &av, |gy, x| gy * x);
                for (d, y) in db.data_mut().iter_mut().zip(bv.data()) {
                    *d = -*d / (*y * *y);
                }
                self.acc_grad(a, da);
                self.acc_grad(b, db);
            }
            Op::AddRow(a, row) => {
                let (a, row) = (*a, *row);
                let d = self.nodes[row].value.len();
                let mut rg = Tensor::zeros(&[d]);
                {
                    let rgd = rg.data_mut();
                    for chunk in g.data().chunks(d) {
                        for (acc, v) in rgd.iter_mut().zip(chunk) {
                            *acc = *acc + *v;
                        }
                    }
                }
                self.acc_grad(a, g);
                self.acc_grad(row, rg);
            }
            Op::Scale(a, s) => {
                let (a, s) = (*a, *s);
                self.acc_grad(a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => {
                let a = *a;
                self.acc_grad(a, g);
            }
            Op::Exp(a) => {
                let a = *a;
                let y = self.nodes[id].value.clone();
                self.acc_grad(a, ew2(&g, &y, |gy, yv| gy * yv));
            }
            Op::Gelu(a) => {
                let a = *a;
                let x = self.nodes[a].value.clone();
                self.acc_grad(a, ew2(&g, &x, |gy, xv| gy * gelu_bwd(xv)));
            }
            Op::Relu(a) => {
                let a = *a;
                let x = self.nodes[a].value.clone();
                self.acc_grad(
                    a,
                    ew2(&g, &x, |gy, xv| if xv > E::zero() { gy } else { E::zero() }),
                );
            }
            Op::Matmul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                if self.nodes[a].needs_grad {
                    let da = matmul_grad_a(&g, &av, &bv, ta, tb);
                    self.acc_grad(a, da);
                }
                if self.nodes[b].needs_grad {
                    let db = matmul_grad_b(&g, &av, &bv, ta, tb);
                    self.acc_grad(b, db);
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (av, bv) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                let bsz = av.shape()[0];
                let gm: usize = g.shape()[1];
                let gn: usize = g.shape()[2];
                let (ash, bsh) = (&av.shape()[1..], &bv.shape()[1..]);
                let (astep, bstep) = (ash[0] * ash[1], bsh[0] * bsh[1]);
                if self.nodes[a].needs_grad {
                    let mut da = Tensor::zeros(av.shape());
                    {
                        let dad = da.data_mut();
                        for i in 0..bsz {
                            let gs = slice2(&g, i, gm * gn);
                            let bs = slice2(&bv, i, bstep);
                            let sub = matmul_grad_a_slices(gs, [gm, gn], bs, bsh, ash, ta, tb);
                            dad[i * astep..(i + 1) * astep].copy_from_slice(sub.data());
                        }
                    }
                    self.acc_grad(a, da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = Tensor::zeros(bv.shape());
                    {
                        let dbd = db.data_mut();
                        for i in 0..bsz {
                            let gs = slice2(&g, i, gm * gn);
                            let as_ = slice2(&av, i, astep);
                            let sub = matmul_grad_b_slices(gs, [gm, gn], as_, ash, bsh, ta, tb);
                            dbd[i * bstep..(i + 1) * bstep].copy_from_slice(sub.data());
                        }
                    }
                    self.acc_grad(b, db);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a].value.shape().to_vec();
                self.acc_grad(a, g.reshaped(shape));
            }
            Op::Permute3(a, perm) => {
                let (a, perm) = (*a, *perm);
                let mut inv = [0usize; 3];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.acc_grad(a, permute3_fwd(&g, inv));
            }
            Op::Concat { axis, inputs } => {
                let axis = *axis;
                let inputs = inputs.clone();
                let mut start = 0;
                for inp in inputs {
                    let len = self.nodes[inp].value.shape()[axis];
                    let piece = narrow_fwd(&g, axis, start, len);
                    start += len;
                    self.acc_grad(inp, piece);
                }
            }
            Op::Narrow { x, axis, start } => {
                let (x, axis, start) = (*x, *axis, *start);
                let full = self.nodes[x].value.shape().to_vec();
                self.acc_grad(x, narrow_bwd(&g, &full, axis, start));
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let shape = self.nodes[x].value.shape().to_vec();
                let rowlen: usize = shape[1..].iter().product();
                let mut dx = Tensor::zeros(&shape);
                {
                    let dd = dx.data_mut();
                    for (i, &r) in idx.iter().enumerate() {
                        let src = &g.data()[i * rowlen..(i + 1) * rowlen];
                        let dst = &mut dd[r * rowlen..(r + 1) * rowlen];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                self.acc_grad(x, dx);
            }
            Op::ScatterRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let shape = self.nodes[x].value.shape().to_vec();
                let rowlen: usize = shape[1..].iter().product();
                let mut dx = Tensor::zeros(&shape);
                {
                    let dd = dx.data_mut();
                    for (i, &r) in idx.iter().enumerate() {
                        dd[i * rowlen..(i + 1) * rowlen]
                            .copy_from_slice(&g.data()[r * rowlen..(r + 1) * rowlen]);
                    }
                }
                self.acc_grad(x, dx);
            }
            Op::RepeatRow { x } => {
                let x = *x;
                let d = self.nodes[x].value.len();
                let mut dx = Tensor::zeros(&[d]);
                {
                    let dd = dx.data_mut();
                    for chunk in g.data().chunks(d) {
                        for (acc, v) in dd.iter_mut().zip(chunk) {
                            *acc = *acc + *v;
                        }
                    }
                }
                self.acc_grad(x, dx);
            }
            Op::SoftmaxLast(x) => {
                let x = *x;
                let y = self.nodes[id].value.clone();
                let d = *y.shape().last().unwrap();
                let mut dx = Tensor::zeros(y.shape());
                {
                    let dd = dx.data_mut();
                    for r in 0..y.len() / d {
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let dot =
                            yr.iter().zip(gr).fold(E::zero(), |s, (&yv, &gv)| s + yv * gv);
                        let dr = &mut dd[r * d..(r + 1) * d];
                        for j in 0..d {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.acc_grad(x, dx);
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let xv = self.nodes[x].value.clone();
                let gv = self.nodes[gamma].value.clone();
                let d = *xv.shape().last().unwrap();
                let rows = xv.len() / d;
                let inv_d = E::from_f64(1.0 / d as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = Tensor::zeros(&[d]);
                let mut dbeta = Tensor::zeros(&[d]);
                {
                    let dxd = dx.data_mut();
                    let dgd = dgamma.data_mut();
                    let dbd = dbeta.data_mut();
                    for r in 0..rows {
                        let xr = &xv.data()[r * d..(r + 1) * d];
                        let gr = &g.data()[r * d..(r + 1) * d];
                        let (mu, rs) = (mean[r], rstd[r]);
                        let mut sum_dxhat = E::zero();
                        let mut sum_dxhat_xhat = E::zero();
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * gv.data()[j];
                            sum_dxhat = sum_dxhat + dxhat;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            dgd[j] = dgd[j] + gr[j] * xhat;
                            dbd[j] = dbd[j] + gr[j];
                        }
                        let dr = &mut dxd[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xhat = (xr[j] - mu) * rs;
                            let dxhat = gr[j] * gv.data()[j];
                            dr[j] = rs
                                * (dxhat
                                    - inv_d * sum_dxhat
                                    - xhat * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
                self.acc_grad(x, dx);
                self.acc_grad(gamma, dgamma);
                self.acc_grad(beta, dbeta);
            }
            Op::BatchNorm { x, gamma, beta, mean, rstd, training } => {
                let (x, gamma, beta, training) = (*x, *gamma, *beta, *training);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let xv = self.nodes[x].value.clone();
                let gv = self.nodes[gamma].value.clone();
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let n = h * w;
                let inv_n = E::from_f64(1.0 / n as f64);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                {
                    let dxd = dx.data_mut();
                    let dgd = dgamma.data_mut();
                    let dbd = dbeta.data_mut();
                    for ci in 0..c {
                        let (mu, rs, ga) = (mean[ci], rstd[ci], gv.data()[ci]);
                        let xp = &xv.data()[ci * n..(ci + 1) * n];
                        let gp = &g.data()[ci * n..(ci + 1) * n];
                        let mut sum_g = E::zero();
                        let mut sum_gx = E::zero();
                        for j in 0..n {
                            let xhat = (xp[j] - mu) * rs;
                            sum_g = sum_g + gp[j];
                            sum_gx = sum_gx + gp[j] * xhat;
                        }
                        dgd[ci] = dgd[ci] + sum_gx;
                        dbd[ci] = dbd[ci] + sum_g;
                        let dp = &mut dxd[ci * n..(ci + 1) * n];
                        if training {
                            for j in 0..n {
                                let xhat = (xp[j] - mu) * rs;
                                dp[j] = ga
                                    * rs
                                    * (gp[j] - inv_n * sum_g - xhat * inv_n * sum_gx);
                            }
                        } else {
                            for j in 0..n {
                                dp[j] = ga * rs * gp[j];
                            }
                        }
                    }
                }
                self.acc_grad(x, dx);
                self.acc_grad(gamma, dgamma);
                self.acc_grad(beta, dbeta);
            }
            Op::Conv2d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv = self.nodes[x].value.clone();
                let wv = self.nodes[w].value.clone();
                if self.nodes[x].needs_grad {
                    self.acc_grad(x, conv2d_bwd_x(&g, &wv, xv.shape()));
                }
                if self.nodes[w].needs_grad {
                    self.acc_grad(w, conv2d_bwd_w(&g, &xv, wv.shape()));
                }
                if self.nodes[b].needs_grad {
                    let cout = wv.shape()[0];
                    let plane = g.len() / cout;
                    let mut db = Tensor::zeros(&[cout]);
                    {
                        let dbd = db.data_mut();
                        for co in 0..cout {
                            dbd[co] = g.data()[co * plane..(co + 1) * plane]
                                .iter()
                                .fold(E::zero(), |s, &v| s + v);
                        }
                    }
                    self.acc_grad(b, db);
                }
            }
            Op::Upsample2x(x) => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                self.acc_grad(x, upsample2x_bwd(&g, &shape));
            }
            Op::Mse { pred, target } => {
                let (pred, target) = (*pred, *target);
                let (pv, tv) = (self.nodes[pred].value.clone(), self.nodes[target].value.clone());
                let gscale = g.item() * E::from_f64(2.0 / pv.len() as f64);
                let d = ew2(&pv, &tv, |p, t| (p - t) * gscale);
                if self.nodes[pred].needs_grad {
                    self.acc_grad(pred, d.clone());
                }
                if self.nodes[target].needs_grad {
                    self.acc_grad(target, d.map(|v| -v));
                }
            }
            Op::CrossEntropy { logits, labels, class_weights, probs, weight_sum } => {
                let logits = *logits;
                let labels = labels.clone();
                let cw = class_weights.clone();
                let probs = probs.clone();
                let wsum = *weight_sum;
                let (n, c) = (probs.shape()[0], probs.shape()[1]);
                let gs = g.item() / wsum;
                let mut dl = Tensor::zeros(&[n, c]);
                {
                    let dd = dl.data_mut();
                    for i in 0..n {
                        let y = labels[i] as usize;
                        let wy = cw.as_ref().map_or(E::one(), |w| w[y]);
                        for j in 0..c {
                            let onehot = if j == y { E::one() } else { E::zero() };
                            dd[i * c + j] = (probs.data()[i * c + j] - onehot) * wy * gs;
                        }
                    }
                }
                self.acc_grad(logits, dl);
            }
            Op::Rope { x, ay, ax } => {
                let (x, ay, ax) = (*x, *ay, *ax);
                let y = self.nodes[id].value.clone();
                let ayv = self.nodes[ay].value.clone();
                let axv = self.nodes[ax].value.clone();
                let (dx, day, dax) = rope_bwd(&g, &y, &ayv, &axv);
                self.acc_grad(x, dx);
                self.acc_grad(ay, day);
                self.acc_grad(ax, dax);
            }
            Op::SumAll(x) => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                let gv = g.item();
                self.acc_grad(x, Tensor::full(&shape, gv));
            }
            Op::SumAxis0(x) => {
                let x = *x;
                let shape = self.nodes[x].value.shape().to_vec();
                let (n, d) = (shape[0], shape[1]);
                let mut dx = Tensor::zeros(&shape);
                {
                    let dd = dx.data_mut();
                    for r in 0..n {
                        dd[r * d..(r + 1) * d].copy_from_slice(g.data());
                    }
                }
                self.acc_grad(x, dx);
            }
        }
        Ok(())
    }

    /// Accumulate node gradients into their parameter cells. Call from one
    /// thread only; ordering across graphs is the caller's responsibility.
    pub fn accumulate_param_grads(&self) {
        for (_, &id) in self.param_ids.iter() {
            if let (Op::ParamLeaf(p), Some(g)) = (&self.nodes[id].op, &self.grads.get(id).and_then(|g| g.clone())) {
                p.add_grad(g);
            }
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<E>> {
        std::mem::take(&mut self.bn_pending)
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

fn ew2<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, f: impl Fn(E, E) -> E) -> Tensor<E> {
    debug_assert_eq!(a.len(), b.len());
    Tensor::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn logical_dims(shape: &[usize], t: bool) -> (usize, usize) {
    if t {
        (shape[1], shape[0])
    } else {
        (shape[0], shape[1])
    }
}

/// `c = a_op(a) @ b_op(b) + beta*c` into a row-major `[m, n]` slice.
#[allow(clippy::too_many_arguments)]
fn gemm_into<E: Scalar>(
    c: &mut [E],
    m: usize,
    n: usize,
    a: &[E],
    ashape: &[usize],
    ta: bool,
    b: &[E],
    bshape: &[usize],
    tb: bool,
    beta: E,
) {
    let k = if ta { ashape[0] } else { ashape[1] };
    let (rsa, csa) = if ta { (1, ashape[1] as isize) } else { (ashape[1] as isize, 1) };
    let (rsb, csb) = if tb { (1, bshape[1] as isize) } else { (bshape[1] as isize, 1) };
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        E::gemm(
            m,
            k,
            n,
            E::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn slice2<E: Scalar>(t: &Tensor<E>, i: usize, step: usize) -> &[E] {
    &t.data()[i * step..(i + 1) * step]
}

fn matmul_grad_a_slices<E: Scalar>(
    g: &[E],
    gshape: [usize; 2],
    b: &[E],
    bshape: &[usize],
    ashape: &[usize],
    ta: bool,
    tb: bool,
) -> Tensor<E> {
    let mut da = Tensor::zeros(ashape);
    if !ta {
        // dA = dC @ B^T  (B = op_b(b))
        gemm_into(da.data_mut(), ashape[0], ashape[1], g, &gshape, false, b, bshape, !tb, E::zero());
    } else {
        // a stores Aᵀ: da = (dC @ Bᵀ)ᵀ = B @ dCᵀ
        gemm_into(da.data_mut(), ashape[0], ashape[1], b, bshape, tb, g, &gshape, true, E::zero());
    }
    da
}

fn matmul_grad_b_slices<E: Scalar>(
    g: &[E],
    gshape: [usize; 2],
    a: &[E],
    ashape: &[usize],
    bshape: &[usize],
    ta: bool,
    tb: bool,
) -> Tensor<E> {
    let mut db = Tensor::zeros(bshape);
    if !tb {
        // dB = A^T @ dC
        gemm_into(db.data_mut(), bshape[0], bshape[1], a, ashape, !ta, g, &gshape, false, E::zero());
    } else {
        // b stores Bᵀ: db = (Aᵀ dC)ᵀ = dCᵀ @ A
        gemm_into(db.data_mut(), bshape[0], bshape[1], g, &gshape, true, a, ashape, ta, E::zero());
    }
    db
}

fn matmul_grad_a<E: Scalar>(
    g: &Tensor<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    ta: bool,
    tb: bool,
) -> Tensor<E> {
    matmul_grad_a_slices(
        g.data(),
        [g.shape()[0], g.shape()[1]],
        b.data(),
        b.shape(),
        a.shape(),
        ta,
        tb,
    )
}

fn matmul_grad_b<E: Scalar>(
    g: &Tensor<E>,
    a: &Tensor<E>,
    b: &Tensor<E>,
    ta: bool,
    tb: bool,
) -> Tensor<E> {
    matmul_grad_b_slices(
        g.data(),
        [g.shape()[0], g.shape()[1]],
        a.data(),
        a.shape(),
        b.shape(),
        ta,
        tb,
    )
}

fn permute3_fwd<E: Scalar>(x: &Tensor<E>, perm: [usize; 3]) -> Tensor<E> {
    let s = x.shape();
    assert_eq!(s.len(), 3, "permute3 expects 3-D");
    let out_shape = [s[perm[0]], s[perm[1]], s[perm[2]]];
    let in_str = strides(s);
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let xd = x.data();
        let (s0, s1, s2) = (in_str[perm[0]], in_str[perm[1]], in_str[perm[2]]);
        let mut o = 0;
        for i in 0..out_shape[0] {
            for j in 0..out_shape[1] {
                let base = i * s0 + j * s1;
                for k in 0..out_shape[2] {
                    od[o] = xd[base + k * s2];
                    o += 1;
                }
            }
        }
    }
    out
}

fn concat_fwd<E: Scalar>(axis: usize, tensors: &[&Tensor<E>]) -> Tensor<E> {
    let first = tensors[0].shape();
    let mut out_shape = first.to_vec();
    out_shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
    for t in tensors {
        for (d, (a, b)) in t.shape().iter().zip(first).enumerate() {
            assert!(d == axis || a == b, "concat: shape mismatch off-axis");
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for t in tensors {
            let ax = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * ax * inner..(o + 1) * ax * inner];
                let dst_start = o * total_axis * inner + offset * inner;
                od[dst_start..dst_start + ax * inner].copy_from_slice(src);
            }
            offset += ax;
        }
    }
    out
}

fn narrow_fwd<E: Scalar>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Tensor<E> {
    let s = x.shape();
    assert!(start + len <= s[axis], "narrow out of range");
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out_shape = s.to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(&out_shape);
    {
        let od = out.data_mut();
        for o in 0..outer {
            let src_start = o * s[axis] * inner + start * inner;
            od[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&x.data()[src_start..src_start + len * inner]);
        }
    }
    out
}

fn narrow_bwd<E: Scalar>(g: &Tensor<E>, full: &[usize], axis: usize, start: usize) -> Tensor<E> {
    let len = g.shape()[axis];
    let outer: usize = full[..axis].iter().product();
    let inner: usize = full[axis + 1..].iter().product();
    let mut out = Tensor::zeros(full);
    {
        let od = out.data_mut();
        for o in 0..outer {
            let dst_start = o * full[axis] * inner + start * inner;
            od[dst_start..dst_start + len * inner]
                .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    out
}

/// Lane-parallel max so the reduction vectorizes.
fn row_max<E: Scalar>(row: &[E]) -> E {
    let mut lanes = [E::neg_infinity(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            lanes[i] = lanes[i].max(c[i]);
        }
    }
    let mut m = E::neg_infinity();
    for &v in chunks.remainder() {
        m = m.max(v);
    }
    for l in lanes {
        m = m.max(l);
    }
    m
}

fn row_sum<E: Scalar>(row: &[E]) -> E {
    let mut lanes = [E::zero(); 8];
    let mut chunks = row.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            lanes[i] = lanes[i] + c[i];
        }
    }
    let mut s = E::zero();
    for &v in chunks.remainder() {
        s = s + v;
    }
    for l in lanes {
        s = s + l;
    }
    s
}

fn softmax_last_fwd<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let d = *x.shape().last().expect("softmax on scalar");
    let mut out = Tensor::zeros(x.shape());
    {
        let od = out.data_mut();
        for r in 0..x.len() / d {
            let row = &x.data()[r * d..(r + 1) * d];
            let orow = &mut od[r * d..(r + 1) * d];
            let mx = row_max(row);
            for j in 0..d {
                orow[j] = (row[j] - mx).exp_act();
            }
            let inv = row_sum(orow).recip();
            for v in orow.iter_mut() {
                *v = *v * inv;
            }
        }
    }
    out
}

fn gelu_fwd<E: Scalar>(x: E) -> E {
    // tanh approximation
    let c = E::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh_act())
}

fn gelu_bwd<E: Scalar>(x: E) -> E {
    let c = E::from_f64(0.797_884_560_802_865_4);
    let a = E::from_f64(0.044715);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh_act();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

fn conv2d_fwd<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv2d channel mismatch: input {cin} vs weight {cin_w}");
    assert_eq!(kh, kw, "conv2d expects square kernels");
    assert_eq!(kh % 2, 1, "conv2d expects odd kernel size");
    assert_eq!(b.shape(), [cout]);
    let pad = kh / 2;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let xp = pad_chw(x, pad);
    let mut out = Tensor::zeros(&[cout, h, wd]);
    {
        let od = out.data_mut();
        // bias fill
        for co in 0..cout {
            let bv = b.data()[co];
            for v in od[co * h * wd..(co + 1) * h * wd].iter_mut() {
                *v = bv;
            }
        }
        // per (dy, dx): out[co, y, :] += W[co, ci, dy, dx] @ xp[ci, y+dy, dx..dx+wd]
        for dy in 0..kh {
            for dx in 0..kw {
                // weight slice [cout, cin] at (dy, dx), strided
                let wslice_stride = kh * kw;
                for y in 0..h {
                    // build gemm over strided views: out rows [cout, wd]
                    unsafe {
                        E::gemm(
                            cout,
                            cin,
                            wd,
                            E::one(),
                            w.data().as_ptr().add(dy * kw + dx),
                            (cin * wslice_stride) as isize,
                            wslice_stride as isize,
                            xp.as_ptr().add((y + dy) * wp + dx),
                            (hp * wp) as isize,
                            1,
                            E::one(),
                            od.as_mut_ptr().add(y * wd),
                            (h * wd) as isize,
                            1,
                        );
                    }
                }
            }
        }
    }
    out
}

fn conv2d_bwd_x<E: Scalar>(g: &Tensor<E>, w: &Tensor<E>, xshape: &[usize]) -> Tensor<E> {
    let (cin, h, wd) = (xshape[0], xshape[1], xshape[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let pad = kh / 2;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let mut dxp = vec![E::zero(); cin * hp * wp];
    let wslice_stride = kh * kw;
    for dy in 0..kh {
        for dx in 0..kw {
            for y in 0..h {
                // dxp[ci, y+dy, dx..dx+wd] += W[:, ci, dy, dx]^T @ g[:, y, :]
                unsafe {
                    E::gemm(
                        cin,
                        cout,
                        wd,
                        E::one(),
                        w.data().as_ptr().add(dy * kw + dx),
                        wslice_stride as isize,
                        (cin * wslice_stride) as isize,
                        g.data().as_ptr().add(y * wd),
                        (h * wd) as isize,
                        1,
                        E::one(),
                        dxp.as_mut_ptr().add((y + dy) * wp + dx),
                        (hp * wp) as isize,
                        1,
                    );
                }
            }
        }
    }
    unpad_chw(&dxp, cin, h, wd, pad)
}

fn conv2d_bwd_w<E: Scalar>(g: &Tensor<E>, x: &Tensor<E>, wshape: &[usize]) -> Tensor<E> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let pad = kh / 2;
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    let xp = pad_chw(x, pad);
    let mut dw: Tensor<E> = Tensor::zeros(wshape);
    {
        let dwd: &mut [E] = dw.data_mut();
        let wslice_stride = kh * kw;
        for dy in 0..kh {
            for dx in 0..kw {
                for y in 0..h {
                    // dW[co, ci, dy, dx] += g[co, y, :] @ xp[ci, y+dy, dx..dx+wd]^T
                    unsafe {
                        E::gemm(
                            cout,
                            wd,
                            cin,
                            E::one(),
                            g.data().as_ptr().add(y * wd),
                            (h * wd) as isize,
                            1,
                            xp.as_ptr().add((y + dy) * wp + dx),
                            1,
                            (hp * wp) as isize,
                            E::one(),
                            dwd.as_mut_ptr().add(dy * kw + dx),
                            (cin * wslice_stride) as isize,
                            wslice_stride as isize,
                        );
                    }
                }
            }
        }
    }
    dw
}

fn pad_chw<E: Scalar>(x: &Tensor<E>, pad: usize) -> Vec<E> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if pad == 0 {
        return x.data().to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![E::zero(); c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = &x.data()[ci * h * w + y * w..ci * h * w + (y + 1) * w];
            let dst_start = ci * hp * wp + (y + pad) * wp + pad;
            out[dst_start..dst_start + w].copy_from_slice(src);
        }
    }
    out
}

fn unpad_chw<E: Scalar>(xp: &[E], c: usize, h: usize, w: usize, pad: usize) -> Tensor<E> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = Tensor::zeros(&[c, h, w]);
    {
        let od = out.data_mut();
        for ci in 0..c {
            for y in 0..h {
                let src_start = ci * hp * wp + (y + pad) * wp + pad;
                od[ci * h * w + y * w..ci * h * w + (y + 1) * w]
                    .copy_from_slice(&xp[src_start..src_start + w]);
            }
        }
    }
    out
}

/// Source taps for ×2 bilinear upsampling with half-pixel centers:
/// output index i maps to source (i+0.5)/2-0.5.
fn up2_taps(len_in: usize, i_out: usize) -> (usize, usize, f64) {
    let s = (i_out as f64 + 0.5) / 2.0 - 0.5;
    let i0 = s.floor().max(0.0) as usize;
    let i1 = (i0 + 1).min(len_in - 1);
    let w1 = (s - s.floor()).clamp(0.0, 1.0);
    let w1 = if s < 0.0 { 0.0 } else { w1 };
    (i0, i1, w1)
}

fn upsample2x_fwd<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (h2, w2) = (h * 2, w * 2);
    let mut out = Tensor::zeros(&[c, h2, w2]);
    let ytaps: Vec<(usize, usize, E)> = (0..h2)
        .map(|i| {
            let (a, b, w1) = up2_taps(h, i);
            (a, b, E::from_f64(w1))
        })
        .collect();
    let xtaps: Vec<(usize, usize, E)> = (0..w2)
        .map(|i| {
            let (a, b, w1) = up2_taps(w, i);
            (a, b, E::from_f64(w1))
        })
        .collect();
    {
        let od = out.data_mut();
        for ci in 0..c {
            let plane = &x.data()[ci * h * w..(ci + 1) * h * w];
            let oplane = &mut od[ci * h2 * w2..(ci + 1) * h2 * w2];
            for (yo, &(y0, y1, wy)) in ytaps.iter().enumerate() {
                for (xo, &(x0, x1, wx)) in xtaps.iter().enumerate() {
                    let one = E::one();
                    let v = plane[y0 * w + x0] * (one - wy) * (one - wx)
                        + plane[y0 * w + x1] * (one - wy) * wx
                        + plane[y1 * w + x0] * wy * (one - wx)
                        + plane[y1 * w + x1] * wy * wx;
                    oplane[yo * w2 + xo] = v;
                }
            }
        }
    }
    out
}

fn upsample2x_bwd<E: Scalar>(g: &Tensor<E>, xshape: &[usize]) -> Tensor<E> {
    let (c, h, w) = (xshape[0], xshape[1], xshape[2]);
    let (h2, w2) = (h * 2, w * 2);
    let mut out = Tensor::zeros(xshape);
    {
        let od = out.data_mut();
        for ci in 0..c {
            let gplane = &g.data()[ci * h2 * w2..(ci + 1) * h2 * w2];
            let oplane = &mut od[ci * h * w..(ci + 1) * h * w];
            for yo in 0..h2 {
                let (y0, y1, wyf) = up2_taps(h, yo);
                let wy = E::from_f64(wyf);
                for xo in 0..w2 {
                    let (x0, x1, wxf) = up2_taps(w, xo);
                    let wx = E::from_f64(wxf);
                    let gv = gplane[yo * w2 + xo];
                    let one = E::one();
                    oplane[y0 * w + x0] = oplane[y0 * w + x0] + gv * (one - wy) * (one - wx);
                    oplane[y0 * w + x1] = oplane[y0 * w + x1] + gv * (one - wy) * wx;
                    oplane[y1 * w + x0] = oplane[y1 * w + x0] + gv * wy * (one - wx);
                    oplane[y1 * w + x1] = oplane[y1 * w + x1] + gv * wy * wx;
                }
            }
        }
    }
    out
}

fn rope_fwd<E: Scalar>(x: &Tensor<E>, ay: &Tensor<E>, ax: &Tensor<E>) -> Tensor<E> {
    let (heads, n, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ky = ay.shape()[1];
    let kx = ax.shape()[1];
    assert_eq!(ay.shape()[0], n, "rope: y-angle token count");
    assert_eq!(ax.shape()[0], n, "rope: x-angle token count");
    assert!(2 * (ky + kx) <= dh, "rope: angle dims exceed head dim");
    let mut out = x.clone();
    {
        let od = out.data_mut();
        for hh in 0..heads {
            for t in 0..n {
                let base = hh * n * dh + t * dh;
                for k in 0..ky {
                    let th = ay.data()[t * ky + k];
                    let (c, s) = (th.cos(), th.sin());
                    let (v0, v1) = (od[base + 2 * k], od[base + 2 * k + 1]);
                    od[base + 2 * k] = v0 * c - v1 * s;
                    od[base + 2 * k + 1] = v0 * s + v1 * c;
                }
                let off = 2 * ky;
                for k in 0..kx {
                    let th = ax.data()[t * kx + k];
                    let (c, s) = (th.cos(), th.sin());
                    let (v0, v1) = (od[base + off + 2 * k], od[base + off + 2 * k + 1]);
                    od[base + off + 2 * k] = v0 * c - v1 * s;
                    od[base + off + 2 * k + 1] = v0 * s + v1 * c;
                }
            }
        }
    }
    out
}

/// dθ for a rotated pair is `g1*y0 - g0*y1`; dx is the gradient rotated back.
fn rope_bwd<E: Scalar>(
    g: &Tensor<E>,
    y: &Tensor<E>,
    ay: &Tensor<E>,
    ax: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let (heads, n, dh) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let ky = ay.shape()[1];
    let kx = ax.shape()[1];
    let mut dx = g.clone();
    let mut day = Tensor::zeros(ay.shape());
    let mut dax = Tensor::zeros(ax.shape());
    {
        let dd = dx.data_mut();
        let dyd = day.data_mut();
        let dxd = dax.data_mut();
        for hh in 0..heads {
            for t in 0..n {
                let base = hh * n * dh + t * dh;
                for k in 0..ky {
                    let th = ay.data()[t * ky + k];
                    let (c, s) = (th.cos(), th.sin());
                    let (g0, g1) = (dd[base + 2 * k], dd[base + 2 * k + 1]);
                    let (y0, y1) = (y.data()[base + 2 * k], y.data()[base + 2 * k + 1]);
                    dyd[t * ky + k] = dyd[t * ky + k] + g1 * y0 - g0 * y1;
                    // inverse rotation of the gradient
                    dd[base + 2 * k] = g0 * c + g1 * s;
                    dd[base + 2 * k + 1] = -g0 * s + g1 * c;
                }
                let off = 2 * ky;
                for k in 0..kx {
                    let th = ax.data()[t * kx + k];
                    let (c, s) = (th.cos(), th.sin());
                    let (g0, g1) = (dd[base + off + 2 * k], dd[base + off + 2 * k + 1]);
                    let (y0, y1) = (y.data()[base + off + 2 * k], y.data()[base + off + 2 * k + 1]);
                    dxd[t * kx + k] = dxd[t * kx + k] + g1 * y0 - g0 * y1;
                    dd[base + off + 2 * k] = g0 * c + g1 * s;
                    dd[base + off + 2 * k + 1] = -g0 * s + g1 * c;
                }
            }
        }
    }
    (dx, day, dax)
}
