//! Central finite differences and gradient comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{multi_head_attention, IncepFormer};
use crate::ops::{Conv2dOptions, NormMode};
use crate::tensor::{Scalar, Tensor};

/// Default denominator floor for [`relative_error`]. Gradients that are
/// analytically zero (a bias feeding a batch norm, say) come out of finite
/// differences as rounding noise near 1e-10; the floor keeps such entries
/// from reading as a 100% error.
pub const DEFAULT_REL_FLOOR: f64 = 1e-6;

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, h: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Contract(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let up = f(&probe)?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push(T::from_f64((up - down) / (2.0 * h)));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a − b| / max(|a|, |b|, floor)`
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst-case agreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradComparison {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the entry with the largest relative error.
    pub worst_index: usize,
    pub numel: usize,
}

impl GradComparison {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn compare_gradients<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>, floor: f64) -> Result<GradComparison> {
    analytic.expect_same_shape(numeric, "compare_gradients")?;
    let mut out = GradComparison {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        numel: analytic.numel(),
    };
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let (a, n) = (a.as_f64(), n.as_f64());
        let rel = relative_error(a, n, floor);
        out.max_abs_error = out.max_abs_error.max((a - n).abs());
        if rel > out.max_rel_error {
            out.max_rel_error = rel;
            out.worst_index = i;
        }
    }
    Ok(out)
}

/// A differentiable function of several tensors, built on a tape.
pub type TapeFn<'a> = dyn for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'a;

/// `Σ op(inputs) ⊙ r` for a fixed random `r` drawn from `seed`, with its
/// gradient per input. The projection gives outputs that sum to a
/// constant, such as softmax, a nonzero gradient.
pub fn projected_loss(op: &TapeFn<'_>, inputs: &[Tensor<f64>], seed: u64) -> Result<(f64, Vec<Tensor<f64>>)> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = op(&vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = tape.constant(Tensor::randn(out.shape(), 1.0, &mut rng));
    let loss = out.mul(r)?.sum()?;
    let grads = tape.backward(loss)?;
    let value = loss.value().item()?;
    let grads = vars
        .iter()
        .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    Ok((value, grads))
}

/// Worst agreement over all inputs of `op` between backward and central differences.
pub fn check_op(op: &TapeFn<'_>, inputs: &[Tensor<f64>], seed: u64, h: f64, floor: f64) -> Result<GradComparison> {
    let (_, analytic) = projected_loss(op, inputs, seed)?;
    let mut worst: Option<GradComparison> = None;
    for (i, a) in analytic.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut xs = inputs.to_vec();
                xs[i] = probe.clone();
                projected_loss(op, &xs, seed).map(|(v, _)| v)
            },
            &inputs[i],
            h,
        )?;
        let cmp = compare_gradients(a, &numeric, floor)?;
        if worst.is_none_or(|w| cmp.max_rel_error >= w.max_rel_error) {
            worst = Some(cmp);
        }
    }
    worst.ok_or_else(|| Error::Contract("check_op needs at least one input".into()))
}

/// Result of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedCheck {
    pub name: String,
    pub comparison: GradComparison,
}

/// Backward of every kernel the model uses, each on a small random input.
pub fn op_suite(seed: u64, h: f64, floor: f64) -> Result<Vec<NamedCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng);
    let (rm, rv) = (randn(&[3]), Tensor::full(vec![3], 1.5));
    let labels: Vec<u8> = vec![0, 2, 1, 255, 1, 0, 2, 2];
    type Case<'a> = (&'static str, Vec<Tensor<f64>>, Box<TapeFn<'a>>);
    let cases: Vec<Case> = vec![
        (
            "conv2d",
            vec![randn(&[1, 2, 4, 4]), randn(&[3, 2, 3, 3]), randn(&[3])],
            Box::new(|v| v[0].conv2d(v[1], Some(v[2]), Conv2dOptions::default().stride(2, 2).padding(1, 1))),
        ),
        (
            "conv2d_depthwise",
            vec![randn(&[1, 3, 4, 4]), randn(&[3, 1, 3, 3])],
            Box::new(|v| v[0].conv2d(v[1], None, Conv2dOptions::default().padding(1, 1).groups(3))),
        ),
        (
            "conv2d_strip",
            vec![randn(&[1, 2, 4, 4]), randn(&[2, 1, 1, 2]), randn(&[2, 1, 2, 1])],
            Box::new(|v| {
                let a = v[0].conv2d(v[1], None, Conv2dOptions::default().stride(1, 2).groups(2))?;
                a.conv2d(v[2], None, Conv2dOptions::default().stride(2, 1).groups(2))
            }),
        ),
        (
            "avg_pool2d",
            vec![randn(&[1, 2, 4, 4])],
            Box::new(|v| v[0].avg_pool2d(2, 2)),
        ),
        (
            "batch_norm2d_train",
            vec![randn(&[2, 3, 2, 2]), randn(&[3]), randn(&[3])],
            Box::new(|v| Ok(v[0].batch_norm2d(v[1], v[2], &rm, &rv, NormMode::Train, 1e-5)?.0)),
        ),
        (
            "batch_norm2d_eval",
            vec![randn(&[2, 3, 2, 2]), randn(&[3]), randn(&[3])],
            Box::new(|v| Ok(v[0].batch_norm2d(v[1], v[2], &rm, &rv, NormMode::Eval, 1e-5)?.0)),
        ),
        (
            "layer_norm",
            vec![randn(&[2, 3, 4]), randn(&[4]), randn(&[4])],
            Box::new(|v| v[0].layer_norm(v[1], v[2], 1e-5)),
        ),
        ("softmax", vec![randn(&[2, 3, 4])], Box::new(|v| v[0].softmax(2))),
        (
            "matmul",
            vec![randn(&[2, 3, 4]), randn(&[2, 4, 2])],
            Box::new(|v| v[0].matmul(v[1])),
        ),
        (
            "linear",
            vec![randn(&[2, 3, 4]), randn(&[4, 5]), randn(&[5])],
            Box::new(|v| v[0].linear(v[1], Some(v[2]))),
        ),
        (
            "bilinear_upsample",
            vec![randn(&[1, 2, 3, 3])],
            Box::new(|v| v[0].bilinear_upsample(5, 4, false)),
        ),
        ("gelu", vec![randn(&[2, 8])], Box::new(|v| v[0].gelu())),
        (
            "layout",
            vec![randn(&[1, 2, 2, 3])],
            Box::new(|v| v[0].img2seq()?.permute(&[0, 2, 1])?.reshape(vec![1, 3, 2, 2])),
        ),
        (
            "concat",
            vec![randn(&[1, 2, 2, 2]), randn(&[1, 1, 2, 2])],
            Box::new(|v| Var::concat(&[v[0], v[1]], 1)),
        ),
        (
            "attention",
            vec![randn(&[1, 3, 4]), randn(&[1, 5, 4]), randn(&[1, 5, 4])],
            Box::new(|v| multi_head_attention(v[0], v[1], v[2], 2)),
        ),
        (
            "cross_entropy",
            vec![randn(&[1, 3, 2, 4])],
            Box::new(move |v| v[0].cross_entropy(&labels, 255)),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, op))| {
            Ok(NamedCheck {
                name: name.to_string(),
                comparison: check_op(op.as_ref(), &inputs, seed.wrapping_add(i as u64), h, floor)?,
            })
        })
        .collect()
}

/// Train-mode forward, logits upsampled to the input size, mean cross-entropy.
pub fn segmentation_loss<T: Scalar>(
    model: &IncepFormer<T>,
    images: &Tensor<T>,
    labels: &[u8],
    ignore_index: u8,
) -> Result<f64> {
    let tape = Tape::new();
    let session = model.session(&tape, NormMode::Train, false);
    let [_, _, h, w] = images.dims::<4>("segmentation_loss")?;
    let logits = session.segment(tape.constant(images.clone()))?;
    Ok(logits
        .bilinear_upsample(h, w, false)?
        .cross_entropy(labels, ignore_index)?
        .value()
        .item()?
        .as_f64())
}

/// Compares the backward pass of [`segmentation_loss`] with central
/// differences for every parameter of `model`, in store order.
pub fn check_model<T: Scalar>(
    model: &IncepFormer<T>,
    images: &Tensor<T>,
    labels: &[u8],
    ignore_index: u8,
    h: f64,
    floor: f64,
) -> Result<Vec<NamedCheck>> {
    let [_, _, ih, iw] = images.dims::<4>("check_model")?;
    let analytic = {
        let tape = Tape::new();
        let session = model.session(&tape, NormMode::Train, true);
        let logits = session.segment(tape.constant(images.clone()))?;
        let loss = logits
            .bilinear_upsample(ih, iw, false)?
            .cross_entropy(labels, ignore_index)?;
        session.gradients(&tape.backward(loss)?)?
    };
    let mut probe_model = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    ids.into_iter()
        .zip(analytic)
        .map(|(id, a)| {
            let numeric = finite_diff_grad(
                |p| {
                    *probe_model.params_mut().get_mut(id) = p.clone();
                    segmentation_loss(&probe_model, images, labels, ignore_index)
                },
                model.params().get(id),
                h,
            )?;
            *probe_model.params_mut().get_mut(id) = model.params().get(id).clone();
            Ok(NamedCheck {
                name: model.params().name(id).to_string(),
                comparison: compare_gradients(&a, &numeric, floor)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0f64);
        let g = finite_diff_grad(|t| Ok(t.item()?.powi(2)), &x, 1e-4).unwrap();
        assert_abs_diff_eq!(g.item().unwrap(), 6.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        let g = finite_diff_grad(|_| Ok(4.2), &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::scalar(1.0f64);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }

    /// loss = Σ relu(x·W1 + b1)·W2
    fn two_layer(x: &Tensor<f64>, w1: &Tensor<f64>, b1: &Tensor<f64>, w2: &Tensor<f64>) -> (f64, Tensor<f64>) {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w1v = tape.leaf(w1.clone(), true);
        let b1v = tape.constant(b1.clone());
        let w2v = tape.constant(w2.clone());
        let loss = xv
            .linear(w1v, Some(b1v))
            .and_then(|h| h.gelu())
            .and_then(|h| h.linear(w2v, None))
            .and_then(|y| y.sum())
            .unwrap();
        let grads = tape.backward(loss).unwrap();
        (loss.value().item().unwrap(), grads.get(w1v).unwrap().clone())
    }

    #[test]
    fn agrees_with_backward_on_two_layer_net() {
        let x = Tensor::from_fn(vec![3, 4], |i| ((i * 7 % 11) as f64 - 5.0) * 0.2);
        let w1 = Tensor::from_fn(vec![4, 5], |i| ((i * 5 % 13) as f64 - 6.0) * 0.1);
        let b1 = Tensor::from_fn(vec![5], |i| i as f64 * 0.05);
        let w2 = Tensor::from_fn(vec![5, 2], |i| ((i * 3 % 7) as f64 - 3.0) * 0.3);
        let (_, analytic) = two_layer(&x, &w1, &b1, &w2);
        let numeric = finite_diff_grad(|w| Ok(two_layer(&x, w, &b1, &w2).0), &w1, 1e-5).unwrap();
        let cmp = compare_gradients(&analytic, &numeric, DEFAULT_REL_FLOOR).unwrap();
        assert!(cmp.passes(1e-4), "{cmp:?}");
    }

    #[test]
    fn op_suite_passes() {
        for c in op_suite(5, 1e-5, DEFAULT_REL_FLOOR).unwrap() {
            assert!(c.comparison.passes(1e-4), "{}: {:?}", c.name, c.comparison);
        }
    }

    #[test]
    fn segmentation_loss_depends_on_classifier() {
        let mut cfg = ModelConfig::micro();
        for s in &mut cfg.stages {
            s.channels = 4;
        }
        cfg.decoder_channels = 4;
        let model = IncepFormer::<f64>::new(cfg, 1).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 32, 32], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
        let labels: Vec<u8> = (0..2048).map(|i| (i % 3 % 2) as u8).collect();
        let decoder = model.params().id("decoder/classifier/weight").unwrap();
        let loss = |m: &IncepFormer<f64>| segmentation_loss(m, &x, &labels, 255).unwrap();
        let base = loss(&model);
        assert!(base.is_finite());
        let mut m = model.clone();
        m.params_mut().get_mut(decoder).data_mut()[0] += 1.0;
        assert_ne!(loss(&m), base);
    }
}
