//! Bilinear resampling of `[N,C,H,W]` feature maps.
//!
//! With `align_corners = false` output pixel `d` samples source coordinate
//! `(d + 0.5)·in/out − 0.5`, clamped below at 0 (half-pixel centers). With
//! `align_corners = true` it samples `d·(in−1)/(out−1)`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps `(i0, i1, frac)` for each output index along one axis.
pub(crate) fn taps(input: usize, output: usize, align_corners: bool) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|d| {
            let src = if align_corners {
                if output > 1 {
                    d as f64 * (input - 1) as f64 / (output - 1) as f64
                } else {
                    0.0
                }
            } else {
                ((d as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0)
            };
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn geometry(shape: &[usize], out_h: usize, out_w: usize) -> Result<[usize; 4]> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("size", "upsample target must be at least 1×1"));
    }
    shape
        .try_into()
        .map_err(|_| Error::dim("bilinear_upsample", format!("input must be [N,C,H,W], got {shape:?}")))
}

pub fn bilinear_upsample<T: Scalar>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = geometry(input.shape(), out_h, out_w)?;
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks(h * w) {
        for &(y0, y1, fy) in &ty {
            let fy = T::from_f64(fy);
            for &(x0, x1, fx) in &tx {
                let fx = T::from_f64(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (T::one() - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub fn bilinear_upsample_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    align_corners: bool,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = geometry(input_shape, 1, 1)?;
    let [gn, gc, out_h, out_w] = grad_out.dims::<4>("bilinear_upsample_backward")?;
    if (gn, gc) != (n, c) {
        return Err(Error::dim("bilinear_upsample_backward", "batch/channel mismatch"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = taps(h, out_h, align_corners);
    let tx = taps(w, out_w, align_corners);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::from_f64(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::from_f64(fx);
                let g = gplane[oy * out_w + ox];
                plane[y0 * w + x0] += g * (T::one() - fy) * (T::one() - fx);
                plane[y0 * w + x1] += g * (T::one() - fy) * fx;
                plane[y1 * w + x0] += g * fy * (T::one() - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}
