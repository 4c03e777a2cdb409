use crate::tensor::Scalar;

/// `c[m×n] += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the slice `a` holds a `k×m` matrix, with `trans_b` the slice
/// `b` holds `n×k`. Each output element accumulates its `k` products in
/// ascending order, so results are bitwise reproducible.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);

    let a_owned;
    let a = if trans_a {
        a_owned = transpose(a, k, m);
        &a_owned[..]
    } else {
        a
    };
    let b_owned;
    let b = if trans_b {
        b_owned = transpose(b, n, k);
        &b_owned[..]
    } else {
        b
    };

    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// Transposes a `rows×cols` row-major matrix.
pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
