use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn pool_geometry(shape: &[usize], kernel: usize, stride: usize) -> Result<[usize; 6]> {
    const OP: &str = "avg_pool2d";
    let [n, c, h, w]: [usize; 4] = shape
        .try_into()
        .map_err(|_| Error::dim(OP, format!("input must be [N,C,H,W], got {shape:?}")))?;
    if kernel == 0 || stride == 0 {
        return Err(Error::config("kernel", "pool kernel and stride must be at least 1"));
    }
    if kernel > h {
        return Err(Error::dim_axis(OP, 2, format!("kernel {kernel} > height {h}")));
    }
    if kernel > w {
        return Err(Error::dim_axis(OP, 3, format!("kernel {kernel} > width {w}")));
    }
    Ok([n, c, h, w, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
}

/// Mean over `kernel×kernel` windows, no padding.
pub fn avg_pool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    let [n, c, h, w, ho, wo] = pool_geometry(input.shape(), kernel, stride)?;
    let x = input.data();
    let area = T::from_usize(kernel * kernel);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    let row = &plane[(oy * stride + ky) * w + ox * stride..][..kernel];
                    for &v in row {
                        acc += v;
                    }
                }
                out.push(acc / area);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ho, wo], out))
}

pub fn avg_pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w, ho, wo] = pool_geometry(input_shape, kernel, stride)?;
    if grad_out.shape() != [n, c, ho, wo] {
        return Err(Error::dim("avg_pool2d_backward", "gradient shape mismatch"));
    }
    let area = T::from_usize(kernel * kernel);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, gplane) in dx.chunks_mut(h * w).zip(grad_out.data().chunks(ho * wo)) {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gplane[oy * wo + ox] / area;
                for ky in 0..kernel {
                    for v in &mut plane[(oy * stride + ky) * w + ox * stride..][..kernel] {
                        *v += g;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape.to_vec(), dx))
}
