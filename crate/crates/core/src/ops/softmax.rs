use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `(outer, extent, inner)` strides for reducing along `axis`.
fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, dim, inner) = split_axis(input.shape(), axis, "softmax")?;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * dim * inner + k * inner + i;
            let max = (0..dim).map(|k| x[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for k in 0..dim {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..dim {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

/// `dx = y ⊙ (g − Σ g⊙y)` along `axis`, given the forward output `y`.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    output.expect_same_shape(grad_out, "softmax_backward")?;
    let (outer, dim, inner) = split_axis(output.shape(), axis, "softmax_backward")?;
    let y = output.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * dim * inner + k * inner + i;
            let dot = (0..dim).fold(T::zero(), |a, k| a + g[at(k)] * y[at(k)]);
            for k in 0..dim {
                dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(output.shape().to_vec(), dx))
}
