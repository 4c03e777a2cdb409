//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every differentiable operation appends one node to a [`Tape`]. Nodes are
//! only ever appended, so append order is a topological order and the
//! backward pass is a single reverse sweep. Gradients flowing into a node
//! from several consumers are summed in the order the sweep reaches them,
//! which is fixed by the tape, so results are bitwise reproducible.
//!
//! A [`Var`] is a cheap `Copy` handle into the tape. Operations whose inputs
//! do not require gradients record no backward closure, so an inference pass
//! keeps no intermediate values alive beyond the node outputs.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::ops::{self, gemm::gemm, Conv2dOptions, ConvGeometry, NormMode, Unary};
use crate::tensor::{Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<usize>,
    requires_grad: bool,
    is_leaf: bool,
    backward: Option<BackwardFn<T>>,
    macs: u64,
}

/// Multiply-accumulate count recorded for one tape node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpCost {
    pub op: &'static str,
    pub macs: u64,
}

pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Requires exclusive access, so no `Var`
    /// into this tape can outlive the call.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: "leaf",
            value,
            parents: Vec::new(),
            requires_grad,
            is_leaf: true,
            backward: None,
            macs: 0,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Per-node MAC counts in tape order (zero for data-movement and elementwise ops).
    pub fn costs(&self) -> Vec<OpCost> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| OpCost { op: n.op, macs: n.macs })
            .collect()
    }

    fn value(&self, id: usize) -> Tensor<T> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push<F>(
        &self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[usize],
        macs: u64,
        backward: F,
    ) -> Result<Var<'_, T>>
    where
        F: Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.to_string() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            requires_grad,
            is_leaf: false,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
            macs,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`. Every leaf that requires a
    /// gradient gets one; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut pending: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        let mut leaves: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        pending[loss.id] = Some(Tensor::ones(root.value.shape().to_vec()));
        let mut visited = 0;
        for id in (0..=loss.id).rev() {
            visited += 1;
            let node = &nodes[id];
            let Some(grad) = pending[id].take() else {
                continue;
            };
            if node.is_leaf {
                if node.requires_grad {
                    leaves[id] = Some(grad);
                }
                continue;
            }
            let Some(backward) = &node.backward else {
                continue;
            };
            let parent_grads = backward(&grad)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut pending[p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, node) in nodes.iter().enumerate() {
            if node.is_leaf && node.requires_grad && leaves[id].is_none() {
                leaves[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            by_node: leaves,
            visited,
        })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.by_node.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.by_node.get_mut(var.id).and_then(Option::take)
    }

    /// Number of tape nodes the reverse sweep stepped through.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }
}

/// Per-channel batch statistics observed by a train-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance.
    pub var: Vec<T>,
    /// Values per channel.
    pub count: usize,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, opts: Conv2dOptions) -> Result<Var<'t, T>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let out = ops::conv2d(&x, &w, b.as_ref(), opts)?;
        let macs = ConvGeometry::new(x.shape(), w.shape(), opts)?.macs();
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        let with_bias = bias.is_some();
        self.tape.push("conv2d", out, &parents, macs, move |g| {
            let (dx, dw, db) = ops::conv2d_backward(&x, &w, g, opts, with_bias)?;
            let mut grads = vec![Some(dx), Some(dw)];
            if with_bias {
                grads.push(db);
            }
            Ok(grads)
        })
    }

    pub fn avg_pool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, T>> {
        let x_shape = self.shape();
        let out = ops::avg_pool2d(&self.value(), kernel, stride)?;
        self.tape.push("avg_pool2d", out, &[self.id], 0, move |g| {
            Ok(vec![Some(ops::avg_pool2d_backward(&x_shape, g, kernel, stride)?)])
        })
    }

    /// Batch norm over `[N,C,H,W]`. Returns the batch statistics in train
    /// mode so the caller can fold them into its running estimates.
    pub fn batch_norm2d(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        mode: NormMode,
        eps: T,
    ) -> Result<(Var<'t, T>, Option<BatchStats<T>>)> {
        let x = self.value();
        let gamma_t = gamma.value();
        let fwd = ops::batch_norm2d_forward(&x, &gamma_t, &beta.value(), running_mean, running_var, mode, eps)?;
        let [n, _, h, w] = x.dims::<4>("batch_norm2d")?;
        let stats = fwd.batch_stats.map(|(mean, var)| BatchStats {
            mean,
            var,
            count: n * h * w,
        });
        let normalized = fwd.normalized;
        let inv_std = fwd.inv_std;
        let var = self
            .tape
            .push("batch_norm2d", fwd.output, &[self.id, gamma.id, beta.id], 0, move |g| {
                let (dx, dg, db) = ops::batch_norm2d_backward(&normalized, &inv_std, &gamma_t, g, mode)?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            })?;
        Ok((var, stats))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        let gamma_t = gamma.value();
        let fwd = ops::layer_norm_forward(&self.value(), &gamma_t, &beta.value(), eps)?;
        let normalized = fwd.normalized;
        let inv_std = fwd.inv_std;
        self.tape
            .push("layer_norm", fwd.output, &[self.id, gamma.id, beta.id], 0, move |g| {
                let (dx, dg, db) = ops::layer_norm_backward(&normalized, &inv_std, &gamma_t, g)?;
                Ok(vec![Some(dx), Some(dg), Some(db)])
            })
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let out = ops::softmax(&self.value(), axis)?;
        let saved = out.clone();
        self.tape.push("softmax", out, &[self.id], 0, move |g| {
            Ok(vec![Some(ops::softmax_backward(&saved, g, axis)?)])
        })
    }

    /// Batched matrix product `[..., M, K] · [..., K, P]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let out = ops::matmul_batched(&a, &b)?;
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let macs = (out.numel() / out.shape()[out.rank() - 1] / m * m * k * out.shape()[out.rank() - 1]) as u64;
        self.tape.push("matmul", out, &[self.id, other.id], macs, move |g| {
            let (da, db) = ops::matmul_backward(&a, &b, g)?;
            Ok(vec![Some(da), Some(db)])
        })
    }

    /// `x · W + b` over the last axis of `x`, with `W` shaped `[C_in, C_out]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        const OP: &str = "linear";
        let x = self.value();
        let w = weight.value();
        let [cin, cout] = w.dims::<2>(OP)?;
        let Some(&xc) = x.shape().last() else {
            return Err(Error::dim(OP, "input is a scalar"));
        };
        if xc != cin {
            return Err(Error::dim_axis(
                OP,
                x.rank() - 1,
                format!("input has {xc} features, weight expects {cin}"),
            ));
        }
        let rows = x.numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        gemm(rows, cin, cout, x.data(), false, w.data(), false, &mut out);
        if let Some(b) = bias {
            let b = b.value();
            if b.shape() != [cout] {
                return Err(Error::dim(OP, format!("bias must be [{cout}], got {:?}", b.shape())));
            }
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let mut parents = vec![self.id, weight.id];
        parents.extend(bias.map(|b| b.id));
        let with_bias = bias.is_some();
        let macs = (rows * cin * cout) as u64;
        self.tape
            .push(OP, Tensor::from_parts(shape, out), &parents, macs, move |g| {
                let gd = g.data();
                let mut dx = vec![T::zero(); rows * cin];
                gemm(rows, cout, cin, gd, false, w.data(), true, &mut dx);
                let mut dw = vec![T::zero(); cin * cout];
                gemm(cin, rows, cout, x.data(), true, gd, false, &mut dw);
                let mut grads = vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), dx)),
                    Some(Tensor::from_parts(vec![cin, cout], dw)),
                ];
                if with_bias {
                    let mut db = vec![T::zero(); cout];
                    for row in gd.chunks(cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(Some(Tensor::from_parts(vec![cout], db)));
                }
                Ok(grads)
            })
    }

    pub fn bilinear_upsample(self, out_h: usize, out_w: usize, align_corners: bool) -> Result<Var<'t, T>> {
        let x_shape = self.shape();
        let out = ops::bilinear_upsample(&self.value(), out_h, out_w, align_corners)?;
        self.tape.push("bilinear_upsample", out, &[self.id], 0, move |g| {
            Ok(vec![Some(ops::bilinear_upsample_backward(&x_shape, g, align_corners)?)])
        })
    }

    pub fn unary(self, f: Unary) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = ops::unary_map(&x, f);
        self.tape.push("unary", out, &[self.id], 0, move |g| {
            Ok(vec![Some(ops::unary_backward(&x, g, f)?)])
        })
    }

    pub fn gelu(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Gelu)
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Relu)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        self.unary(Unary::Scale(c))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let in_shape = self.shape();
        let out = self.value().reshape(shape)?;
        self.tape.push("reshape", out, &[self.id], 0, move |g| {
            Ok(vec![Some(g.reshape(in_shape.clone())?)])
        })
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let out = ops::permute(&self.value(), perm)?;
        let inverse = ops::inverse_permutation(perm);
        self.tape.push("permute", out, &[self.id], 0, move |g| {
            Ok(vec![Some(ops::permute(g, &inverse)?)])
        })
    }

    /// `[N,C,H,W] → [N,H·W,C]`
    pub fn img2seq(self) -> Result<Var<'t, T>> {
        let [_, _, h, w] = self.value().dims::<4>("img2seq")?;
        let out = ops::img2seq(&self.value())?;
        self.tape.push("img2seq", out, &[self.id], 0, move |g| {
            Ok(vec![Some(ops::seq2img(g, h, w)?)])
        })
    }

    /// `[N,H·W,C] → [N,C,H,W]`
    pub fn seq2img(self, h: usize, w: usize) -> Result<Var<'t, T>> {
        let out = ops::seq2img(&self.value(), h, w)?;
        self.tape
            .push("seq2img", out, &[self.id], 0, move |g| Ok(vec![Some(ops::img2seq(g)?)]))
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let values: Vec<Tensor<T>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let out = ops::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        first.tape.push("concat", out, &ids, 0, move |g| {
            Ok(ops::split(g, axis, &sizes)?.into_iter().map(Some).collect())
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.value().add(&other.value())?;
        self.tape.push("add", out, &[self.id, other.id], 0, |g| {
            Ok(vec![Some(g.clone()), Some(g.clone())])
        })
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let a = self.value();
        let b = other.value();
        let out = a.mul(&b)?;
        self.tape.push("mul", out, &[self.id, other.id], 0, move |g| {
            Ok(vec![Some(g.mul(&b)?), Some(g.mul(&a)?)])
        })
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x_shape = self.shape();
        let out = Tensor::scalar(self.value().sum());
        self.tape.push("sum", out, &[self.id], 0, move |g| {
            Ok(vec![Some(Tensor::full(x_shape.clone(), g.item()?))])
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().numel();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Mean pixelwise cross-entropy of `[N,K,H,W]` logits against class ids.
    pub fn cross_entropy(self, labels: &[u8], ignore_index: u8) -> Result<Var<'t, T>> {
        let (loss, grad) = ops::cross_entropy(&self.value(), labels, ignore_index)?;
        self.tape
            .push("cross_entropy", Tensor::scalar(loss), &[self.id], 0, move |g| {
                Ok(vec![Some(grad.scale(g.item()?))])
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let loss = x.mul(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2, 2]), true);
        let y = tape.leaf(Tensor::ones(vec![3]), true);
        let loss = y.sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), true);
        // loss = Σ (x + x + x)
        let loss = x.add(x).unwrap().add(x).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn sweep_visits_each_node_once() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(vec![4]), true);
        let loss = x.gelu().unwrap().scale(2.0).unwrap().sum().unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.nodes_visited(), tape.len());
    }

    #[test]
    fn clear_empties_the_tape() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(vec![2]), true);
        x.sum().unwrap();
        assert_eq!(tape.len(), 2);
        tape.clear();
        assert!(tape.is_empty());
    }

    #[test]
    fn constants_record_no_closures() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![2]));
        let y = x.relu().unwrap();
        assert!(!y.requires_grad());
        assert!(tape.nodes.borrow()[y.id()].backward.is_none());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(vec![2], 1e30), true);
        assert!(matches!(x.mul(x), Err(Error::NonFinite { .. })));
    }
}
