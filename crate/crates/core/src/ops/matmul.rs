use crate::error::{Error, Result};
use crate::ops::gemm::gemm;
use crate::tensor::{Scalar, Tensor};

/// Splits `[..., r, c]` into `(batch, r, c)`.
fn as_batched(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(op, format!("need rank >= 2, got {shape:?}")));
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Shape checks shared by forward and backward; returns `(batch, m, k, p)`.
fn conform(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    const OP: &str = "matmul";
    let (batch, m, k) = as_batched(a, OP)?;
    let (_, k2, p) = as_batched(b, OP)?;
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(Error::dim(OP, format!("batch dims differ: {a:?} vs {b:?}")));
    }
    if k != k2 {
        return Err(Error::dim_axis(
            OP,
            a.len() - 1,
            format!("inner dims differ: {k} vs {k2}"),
        ));
    }
    Ok((batch, m, k, p))
}

/// `[..., M, K] · [..., K, P] → [..., M, P]` with equal leading dims.
pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (batch, m, k, p) = conform(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); batch * m * p];
    for i in 0..batch {
        gemm(
            m,
            k,
            p,
            &a.data()[i * m * k..][..m * k],
            false,
            &b.data()[i * k * p..][..k * p],
            false,
            &mut out[i * m * p..][..m * p],
        );
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    Ok(Tensor::from_parts(shape, out))
}

/// `(dA, dB) = (G·Bᵀ, Aᵀ·G)` per batch element.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, p) = conform(a.shape(), b.shape())?;
    if grad_out.numel() != batch * m * p {
        return Err(Error::dim("matmul_backward", "gradient shape mismatch"));
    }
    let g = grad_out.data();
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for i in 0..batch {
        let gi = &g[i * m * p..][..m * p];
        gemm(
            m,
            p,
            k,
            gi,
            false,
            &b.data()[i * k * p..][..k * p],
            true,
            &mut da[i * m * k..][..m * k],
        );
        gemm(
            k,
            m,
            p,
            &a.data()[i * m * k..][..m * k],
            true,
            gi,
            false,
            &mut db[i * k * p..][..k * p],
        );
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), da),
        Tensor::from_parts(b.shape().to_vec(), db),
    ))
}
