//! Batch and layer normalization.
//!
//! Zero variance convention: when `var + eps == 0` the normalized value is
//! defined as 0, so the output collapses to the affine bias instead of NaN.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates only.
    Eval,
}

fn inv_std<T: Scalar>(var: T, eps: T) -> T {
    let denom = var + eps;
    if denom > T::zero() {
        T::one() / denom.sqrt()
    } else {
        T::zero()
    }
}

fn check_eps<T: Scalar>(eps: T) -> Result<()> {
    if eps.is_nan() || eps < T::zero() {
        return Err(Error::config("eps", format!("eps must be non-negative, got {eps}")));
    }
    Ok(())
}

fn check_channel_param<T: Scalar>(op: &'static str, t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    if t.shape() != [c] {
        return Err(Error::dim(
            op,
            format!("{what} must have shape [{c}], got {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Everything the backward pass of batch norm needs.
#[derive(Debug, Clone)]
pub struct BatchNormForward<T: Scalar> {
    pub output: Tensor<T>,
    /// Pre-affine normalized input.
    pub normalized: Tensor<T>,
    /// Per-channel `1/sqrt(var + eps)` (0 where that is undefined).
    pub inv_std: Vec<T>,
    /// Per-channel batch mean and biased batch variance; `None` in eval mode.
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

pub(crate) fn batch_norm2d_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    mode: NormMode,
    eps: T,
) -> Result<BatchNormForward<T>> {
    const OP: &str = "batch_norm2d";
    let [n, c, h, w] = input.dims::<4>(OP)?;
    check_eps(eps)?;
    for (t, what) in [
        (gamma, "gamma"),
        (beta, "beta"),
        (running_mean, "running_mean"),
        (running_var, "running_var"),
    ] {
        check_channel_param(OP, t, c, what)?;
    }
    let hw = h * w;
    let count = n * hw;
    let x = input.data();
    let plane = |ni: usize, ci: usize| &x[(ni * c + ci) * hw..][..hw];

    let (mean, istd, batch_stats) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::Contract(
                    "batch_norm2d: train mode needs more than one value per channel".into(),
                ));
            }
            let m = T::from_usize(count);
            let mut means = Vec::with_capacity(c);
            let mut vars = Vec::with_capacity(c);
            for ci in 0..c {
                let sum = super::compensated_sum((0..n).flat_map(|ni| plane(ni, ci).iter().copied()));
                let mu = sum / m;
                let sq = super::compensated_sum(
                    (0..n).flat_map(|ni| plane(ni, ci).iter().map(move |&v| (v - mu) * (v - mu))),
                );
                means.push(mu);
                vars.push(sq / m);
            }
            let istd: Vec<T> = vars.iter().map(|&v| inv_std(v, eps)).collect();
            (means.clone(), istd, Some((means, vars)))
        }
        NormMode::Eval => (
            running_mean.data().to_vec(),
            running_var.data().iter().map(|&v| inv_std(v, eps)).collect(),
            None,
        ),
    };

    let mut normalized = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let (g, b) = (gamma.data()[ci], beta.data()[ci]);
            for i in off..off + hw {
                let xh = (x[i] - mean[ci]) * istd[ci];
                normalized[i] = xh;
                output[i] = g * xh + b;
            }
        }
    }
    Ok(BatchNormForward {
        output: Tensor::from_parts(input.shape().to_vec(), output),
        normalized: Tensor::from_parts(input.shape().to_vec(), normalized),
        inv_std: istd,
        batch_stats,
    })
}

/// Exponential-moving-average update of running statistics. The variance
/// estimate uses the unbiased batch variance.
pub fn update_running_stats<T: Scalar>(
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    batch_mean: &[T],
    batch_var: &[T],
    count: usize,
    momentum: T,
) {
    let keep = T::one() - momentum;
    let correction = if count > 1 {
        T::from_usize(count) / T::from_usize(count - 1)
    } else {
        T::one()
    };
    for (r, &m) in running_mean.data_mut().iter_mut().zip(batch_mean) {
        *r = keep * *r + momentum * m;
    }
    for (r, &v) in running_var.data_mut().iter_mut().zip(batch_var) {
        *r = keep * *r + momentum * v * correction;
    }
}

/// Per-channel batch normalization of `[N,C,H,W]`. In train mode the running
/// statistics are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut Tensor<T>,
    running_var: &mut Tensor<T>,
    mode: NormMode,
    momentum: T,
    eps: T,
) -> Result<Tensor<T>> {
    let fwd = batch_norm2d_forward(input, gamma, beta, running_mean, running_var, mode, eps)?;
    if let Some((mean, var)) = &fwd.batch_stats {
        let [n, _, h, w] = input.dims::<4>("batch_norm2d")?;
        update_running_stats(running_mean, running_var, mean, var, n * h * w, momentum);
    }
    Ok(fwd.output)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn batch_norm2d_backward<T: Scalar>(
    fwd_normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, c, h, w] = fwd_normalized.dims::<4>("batch_norm2d_backward")?;
    fwd_normalized.expect_same_shape(grad_out, "batch_norm2d_backward")?;
    let hw = h * w;
    let xh = fwd_normalized.data();
    let gy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                dgamma[ci] += gy[i] * xh[i];
                dbeta[ci] += gy[i];
            }
        }
    }
    let mut dx = vec![T::zero(); xh.len()];
    match mode {
        NormMode::Eval => {
            for ni in 0..n {
                for (ci, &inv) in inv_std.iter().enumerate() {
                    let scale = gamma.data()[ci] * inv;
                    let off = (ni * c + ci) * hw;
                    for i in off..off + hw {
                        dx[i] = gy[i] * scale;
                    }
                }
            }
        }
        NormMode::Train => {
            // dx = istd/M · (M·dxh − Σdxh − xh·Σ(dxh·xh)) with dxh = g·gamma,
            // so Σdxh = gamma·dbeta and Σ(dxh·xh) = gamma·dgamma.
            let m = T::from_usize(n * hw);
            for ni in 0..n {
                for ci in 0..c {
                    let g = gamma.data()[ci];
                    let k = inv_std[ci] / m;
                    let (sum_d, sum_dx) = (g * dbeta[ci], g * dgamma[ci]);
                    let off = (ni * c + ci) * hw;
                    for i in off..off + hw {
                        dx[i] = k * (m * gy[i] * g - sum_d - xh[i] * sum_dx);
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_parts(fwd_normalized.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNormForward<T: Scalar> {
    pub output: Tensor<T>,
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub(crate) fn layer_norm_forward<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<LayerNormForward<T>> {
    const OP: &str = "layer_norm";
    let Some(&c) = input.shape().last() else {
        return Err(Error::dim(OP, "input has no channel axis"));
    };
    check_eps(eps)?;
    check_channel_param(OP, gamma, c, "gamma")?;
    check_channel_param(OP, beta, c, "beta")?;
    let m = T::from_usize(c);
    let mut normalized = Vec::with_capacity(input.numel());
    let mut output = Vec::with_capacity(input.numel());
    let mut istds = Vec::with_capacity(input.numel() / c);
    for row in input.data().chunks(c) {
        let mu = row.iter().fold(T::zero(), |a, &v| a + v) / m;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
        let istd = inv_std(var, eps);
        istds.push(istd);
        for ((&v, &g), &b) in row.iter().zip(gamma.data()).zip(beta.data()) {
            let xh = (v - mu) * istd;
            normalized.push(xh);
            output.push(g * xh + b);
        }
    }
    Ok(LayerNormForward {
        output: Tensor::from_parts(input.shape().to_vec(), output),
        normalized: Tensor::from_parts(input.shape().to_vec(), normalized),
        inv_std: istds,
    })
}

/// Normalizes over the last axis.
pub fn layer_norm<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    layer_norm_forward(input, gamma, beta, eps).map(|f| f.output)
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    normalized: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    normalized.expect_same_shape(grad_out, "layer_norm_backward")?;
    let c = gamma.numel();
    let m = T::from_usize(c);
    let g = gamma.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Vec::with_capacity(normalized.numel());
    for ((xh, gy), &istd) in normalized.data().chunks(c).zip(grad_out.data().chunks(c)).zip(inv_std) {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..c {
            dgamma[j] += gy[j] * xh[j];
            dbeta[j] += gy[j];
            let d = gy[j] * g[j];
            sum_d += d;
            sum_dx += d * xh[j];
        }
        let k = istd / m;
        for j in 0..c {
            dx.push(k * (m * gy[j] * g[j] - sum_d - xh[j] * sum_dx));
        }
    }
    Ok((
        Tensor::from_parts(normalized.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dgamma),
        Tensor::from_parts(vec![c], dbeta),
    ))
}
