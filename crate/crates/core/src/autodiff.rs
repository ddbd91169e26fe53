//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] walks it once in reverse.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{self, Activation, ClassLayout, ConvGeom, Tensor};

/// Stable identifier of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u32);

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradients keyed by parameter. Parameters that do not influence the loss
/// have no entry.
pub type GradMap = BTreeMap<ParamId, Tensor>;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    BiasAdd { x: Var, bias: Var, axis: usize },
    Conv2d { input: Var, kernels: Var, geom: ConvGeom, unfolded: Vec<f64> },
    Activation(Var, Activation),
    Softmax { x: Var, len: usize, inner: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    Upsample { x: Var, factor: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    BceWithLogits { logits: Var, targets: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    /// Whether any parameter feeds this node.
    tracked: bool,
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Input | Op::Param(_) => [None, None],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => [Some(a), Some(b)],
            Op::BiasAdd { x, bias, .. } => [Some(x), Some(bias)],
            Op::Conv2d { input, kernels, .. } => [Some(input), Some(kernels)],
            Op::Scale(x, _)
            | Op::Activation(x, _)
            | Op::Softmax { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::GlobalAvgPool(x)
            | Op::Upsample { x, .. }
            | Op::CrossEntropy { logits: x, .. }
            | Op::BceWithLogits { logits: x, .. } => [Some(x), None],
        }
    }
}

/// Append-only record of one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let tracked = matches!(op, Op::Param(_)) || op.parents().iter().flatten().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Op::Input, value)
    }

    /// Trainable leaf. Registering the same id twice accumulates both
    /// contributions into one gradient entry.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(Op::Param(id), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = tensor::matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = tensor::add(&self.node(a)?.value, &self.node(b)?.value)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = tensor::mul(&self.node(a)?.value, &self.node(b)?.value)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        let out = tensor::scale(&self.node(x)?.value, factor);
        Ok(self.push(Op::Scale(x, factor), out))
    }

    pub fn bias_add(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var, TensorError> {
        let out = tensor::bias_add(&self.node(x)?.value, &self.node(bias)?.value, axis)?;
        Ok(self.push(Op::BiasAdd { x, bias, axis }, out))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (x, k) = (&self.node(input)?.value, &self.node(kernels)?.value);
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        let unfolded = geom.unfold(x.data());
        let out = Tensor::from_parts(geom.out_shape(x.rank() == 4), geom.forward_unfolded(&unfolded, k.data()));
        Ok(self.push(Op::Conv2d { input, kernels, geom, unfolded }, out))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        if kind == Activation::Softmax {
            let last = self.node(x)?.value.rank().saturating_sub(1);
            return self.softmax_axis(x, last);
        }
        let out = tensor::apply_activation(&self.node(x)?.value, kind)?;
        Ok(self.push(Op::Activation(x, kind), out))
    }

    /// Softmax normalised along `axis` (e.g. the class axis of `[N×K×H×W]`).
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let v = &self.node(x)?.value;
        if !v.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let shape = v.shape();
        if axis >= shape.len().max(1) {
            return Err(TensorError::RankMismatch { op: "softmax", expected: axis + 1, shape: shape.to_vec() });
        }
        let len = shape.get(axis).copied().unwrap_or(1);
        let inner: usize = shape.get(axis + 1..).map_or(1, |s| s.iter().product());
        let outer = v.len() / (len * inner);
        let out = Tensor::from_parts(shape.to_vec(), tensor::softmax_strided(v.data(), outer, len, inner));
        Ok(self.push(Op::Softmax { x, len, inner }, out))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total = self.node(x)?.value.data().iter().sum();
        Ok(self.push(Op::Sum(x), Tensor::scalar(total)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = &self.node(x)?.value;
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Op::Mean(x), Tensor::scalar(mean)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.node(x)?.value.reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = tensor::global_avg_pool(&self.node(x)?.value)?;
        Ok(self.push(Op::GlobalAvgPool(x), out))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        let out = tensor::upsample_nearest(&self.node(x)?.value, factor)?;
        Ok(self.push(Op::Upsample { x, factor }, out))
    }

    /// Mean softmax cross-entropy; see [`tensor::cross_entropy`] for layouts.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let loss = tensor::cross_entropy(&self.node(logits)?.value, labels)?;
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec() }, Tensor::scalar(loss)))
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let loss = tensor::bce_with_logits(&self.node(logits)?.value, targets)?;
        Ok(self.push(
            Op::BceWithLogits { logits, targets: targets.clone() },
            Tensor::scalar(loss),
        ))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// parameter leaf that reaches it.
    pub fn backward(&self, loss: Var) -> Result<GradMap, TensorError> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar { shape: root.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));
        let mut out = GradMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => match out.get_mut(id) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(*id, g);
                    }
                },
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, n, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    let mut da = vec![0.0; m * n];
                    tensor::gemm_nt(g.data(), bv.data(), &mut da, m, n, p);
                    let mut db = vec![0.0; n * p];
                    tensor::gemm_tn(av.data(), g.data(), &mut db, m, n, p);
                    accumulate(&mut grads, *a, Tensor::from_parts(vec![m, n], da));
                    accumulate(&mut grads, *b, Tensor::from_parts(vec![n, p], db));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    accumulate(&mut grads, *a, tensor::mul(&g, bv)?);
                    accumulate(&mut grads, *b, tensor::mul(&g, av)?);
                }
                Op::Scale(x, factor) => {
                    accumulate(&mut grads, *x, tensor::scale(&g, *factor));
                }
                Op::BiasAdd { x, bias, axis } => {
                    let shape = g.shape();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let extent = shape[*axis];
                    let mut db = vec![0.0; extent];
                    for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                        db[chunk_idx % extent] += chunk.iter().sum::<f64>();
                    }
                    accumulate(&mut grads, *bias, Tensor::from_parts(vec![extent], db));
                    accumulate(&mut grads, *x, g);
                }
                Op::Conv2d { input, kernels, geom, unfolded } => {
                    let (xv, kv) = (&self.nodes[input.0].value, &self.nodes[kernels.0].value);
                    let need_dx = self.nodes[input.0].tracked;
                    let (dx, dk) = geom.backward_unfolded(unfolded, kv.data(), g.data(), need_dx);
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
                    }
                    accumulate(&mut grads, *kernels, Tensor::from_parts(kv.shape().to_vec(), dk));
                }
                Op::Activation(x, kind) => {
                    let y = &node.value;
                    let dx = match kind {
                        Activation::Relu => {
                            let xv = &self.nodes[x.0].value;
                            zip_map(xv, &g, |xi, gi| if xi > 0.0 { gi } else { 0.0 })
                        }
                        Activation::Sigmoid => zip_map(y, &g, |yi, gi| gi * yi * (1.0 - yi)),
                        Activation::Softmax => unreachable!("softmax is recorded as Op::Softmax"),
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax { x, len, inner } => {
                    let (y, gd) = (node.value.data(), g.data());
                    let (len, inner) = (*len, *inner);
                    let outer = y.len() / (len * inner);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|k| y[base + k * inner] * gd[base + k * inner]).sum();
                            for k in 0..len {
                                let at = base + k * inner;
                                dx[at] = y[at] * (gd[at] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(node.value.shape().to_vec(), dx));
                }
                Op::Sum(x) => {
                    let xv = &self.nodes[x.0].value;
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), g.item()));
                }
                Op::Mean(x) => {
                    let xv = &self.nodes[x.0].value;
                    let share = g.item() / xv.len() as f64;
                    accumulate(&mut grads, *x, Tensor::full(xv.shape(), share));
                }
                Op::Reshape(x) => {
                    let xv = &self.nodes[x.0].value;
                    accumulate(&mut grads, *x, g.reshape_like(xv));
                }
                Op::GlobalAvgPool(x) => {
                    let xv = &self.nodes[x.0].value;
                    let r = xv.rank();
                    let spatial = xv.shape()[r - 2] * xv.shape()[r - 1];
                    let mut dx = Vec::with_capacity(xv.len());
                    for &gi in g.data() {
                        let share = gi / spatial as f64;
                        dx.extend(std::iter::repeat_n(share, spatial));
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::Upsample { x, factor } => {
                    let xv = &self.nodes[x.0].value;
                    let r = xv.rank();
                    let (h, w) = (xv.shape()[r - 2], xv.shape()[r - 1]);
                    let (oh, ow) = (h * factor, w * factor);
                    let planes = xv.len() / (h * w);
                    let mut dx = vec![0.0; xv.len()];
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                dx[(p * h + oy / factor) * w + ox / factor] +=
                                    g.data()[(p * oh + oy) * ow + ox];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::CrossEntropy { logits, labels } => {
                    let zv = &self.nodes[logits.0].value;
                    let layout = ClassLayout::of(zv.shape())?;
                    let probs =
                        tensor::softmax_strided(zv.data(), layout.outer, layout.classes, layout.inner);
                    let weight = g.item() / labels.len() as f64;
                    let mut dz = probs;
                    for (pos, &label) in labels.iter().enumerate() {
                        dz[layout.base(pos) + label * layout.inner] -= 1.0;
                    }
                    dz.iter_mut().for_each(|v| *v *= weight);
                    accumulate(&mut grads, *logits, Tensor::from_parts(zv.shape().to_vec(), dz));
                }
                Op::BceWithLogits { logits, targets } => {
                    let zv = &self.nodes[logits.0].value;
                    let weight = g.item() / zv.len() as f64;
                    let dz = zip_map(zv, targets, |z, y| (tensor::sigmoid_scalar(z) - y) * weight);
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl Tensor {
    fn reshape_like(self, like: &Tensor) -> Tensor {
        Tensor::from_parts(like.shape().to_vec(), self.into_data())
    }
}

/// Central-difference gradient of `f` at `p`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, p: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = p.clone();
    let mut grad = vec![0.0; p.len()];
    for (i, slot) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * h);
    }
    Tensor::from_parts(p.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::from_vec(vec![0.3, -2.0, 5.0]));
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[&ParamId(0)].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let p = g.param(ParamId(7), Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads[&ParamId(7)].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn dead_branch_has_no_entry() {
        let mut g = Graph::new();
        let live = g.param(ParamId(0), Tensor::from_vec(vec![1.0]));
        let dead = g.param(ParamId(1), Tensor::from_vec(vec![1.0]));
        let _unused = g.scale(dead, 3.0).unwrap();
        let s = g.sum(live).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.contains_key(&ParamId(0)));
        assert!(!grads.contains_key(&ParamId(1)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param(ParamId(0), Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn repeated_param_registration_accumulates() {
        let mut g = Graph::new();
        let a = g.param(ParamId(0), Tensor::from_vec(vec![2.0]));
        let b = g.param(ParamId(0), Tensor::from_vec(vec![2.0]));
        let prod = g.mul(a, b).unwrap();
        let s = g.sum(prod).unwrap();
        assert_eq!(g.backward(s).unwrap()[&ParamId(0)].data(), &[4.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let sq = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>();
        let g = finite_diff_grad(sq, &Tensor::from_vec(vec![3.0]), 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);

        let constant = |_: &Tensor| 4.2;
        let g = finite_diff_grad(constant, &Tensor::from_vec(vec![1.0, -1.0]), 1e-5);
        assert_eq!(g.data(), &[0.0, 0.0]);

        let sum = |t: &Tensor| t.data().iter().sum::<f64>();
        let g = finite_diff_grad(sum, &Tensor::from_vec(vec![0.1, 7.0, -3.0]), 1e-5);
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }
}
