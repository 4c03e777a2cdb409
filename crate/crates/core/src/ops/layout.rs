//! Data-movement ops: sequence/image reshapes, axis permutation, concatenation.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Direction of a sequence/image conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqImg {
    /// `[N, H·W, C] → [N, C, H, W]`
    Seq2Img { h: usize, w: usize },
    /// `[N, C, H, W] → [N, H·W, C]`, tokens in row-major pixel order.
    Img2Seq,
}

pub fn reshape_seq_img<T: Scalar>(input: &Tensor<T>, direction: SeqImg) -> Result<Tensor<T>> {
    match direction {
        SeqImg::Img2Seq => {
            let [n, c, h, w] = input.dims::<4>("img2seq")?;
            let perm = permute(input, &[0, 2, 3, 1])?;
            perm.reshape(vec![n, h * w, c])
        }
        SeqImg::Seq2Img { h, w } => {
            let [n, l, c] = input.dims::<3>("seq2img")?;
            if l != h * w {
                return Err(Error::dim_axis(
                    "seq2img",
                    1,
                    format!("{l} tokens cannot form a {h}×{w} map"),
                ));
            }
            permute(&input.reshape(vec![n, h, w, c])?, &[0, 3, 1, 2])
        }
    }
}

pub fn img2seq<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    reshape_seq_img(input, SeqImg::Img2Seq)
}

pub fn seq2img<T: Scalar>(input: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    reshape_seq_img(input, SeqImg::Seq2Img { h, w })
}

/// Output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(input: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = input.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(
            "permute",
            format!("{perm:?} is not a permutation of {rank} axes"),
        ));
    }
    let in_shape = input.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        return Ok(input.clone());
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // Stride in the input for a step along each output axis.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let x = input.data();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..x.len() {
        out.push(x[offset]);
        for ax in (0..rank).rev() {
            index[ax] += 1;
            offset += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for rank {rank}"),
        ));
    }
    for t in inputs {
        if t.rank() != rank {
            return Err(Error::dim("concat", "ranks differ"));
        }
        if let Some(ax) = (0..rank).find(|&i| i != axis && t.shape()[i] != first.shape()[i]) {
            return Err(Error::dim_axis(
                "concat",
                ax,
                format!("{:?} vs {:?}", t.shape(), first.shape()),
            ));
        }
    }
    let outer: usize = first.shape()[..axis].iter().product();
    let inner: usize = first.shape()[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in inputs {
            let chunk = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, out))
}

/// Inverse of [`concat`]: splits along `axis` into pieces of the given extents.
pub fn split<T: Scalar>(input: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= input.rank() || sizes.iter().sum::<usize>() != input.shape()[axis] {
        return Err(Error::dim(
            "split",
            format!("cannot split {:?} into {sizes:?}", input.shape()),
        ));
    }
    let outer: usize = input.shape()[..axis].iter().product();
    let inner: usize = input.shape()[axis + 1..].iter().product();
    let total = input.shape()[axis];
    let mut offset = 0;
    sizes
        .iter()
        .map(|&s| {
            let mut data = Vec::with_capacity(outer * s * inner);
            for o in 0..outer {
                let start = (o * total + offset) * inner;
                data.extend_from_slice(&input.data()[start..start + s * inner]);
            }
            offset += s;
            let mut shape = input.shape().to_vec();
            shape[axis] = s;
            Tensor::new(shape, data)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn img2seq_token_order() {
        // channel c, pixel (r, col) holds 100·c + 10·r + col
        let x = Tensor::<f64>::from_fn(vec![1, 2, 2, 2], |i| {
            let (c, r, col) = (i / 4, (i / 2) % 2, i % 2);
            (100 * c + 10 * r + col) as f64
        });
        let s = img2seq(&x).unwrap();
        assert_eq!(s.shape(), &[1, 4, 2]);
        assert_eq!(s.data(), &[0.0, 100.0, 1.0, 101.0, 10.0, 110.0, 11.0, 111.0]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let x = Tensor::<f64>::from_fn(vec![2, 4, 3, 5], |i| (i as f64 * 0.77).sin());
        let back = seq2img(&img2seq(&x).unwrap(), 3, 5).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn token_count_mismatch() {
        let s = Tensor::<f64>::zeros(vec![1, 5, 3]);
        assert!(matches!(seq2img(&s, 2, 3), Err(Error::Dimension { axis: Some(1), .. })));
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::<f64>::from_fn(vec![2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![2, 2, 3], |i| 10.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(&c.data()[..9], &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0]);
        let parts = split(&c, 1, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_mismatched_extent() {
        let a = Tensor::<f64>::zeros(vec![2, 1, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 1, 4]);
        assert!(matches!(
            concat(&[&a, &b], 1),
            Err(Error::Dimension { axis: Some(2), .. })
        ));
    }

    proptest! {
        #[test]
        fn seq_img_round_trip(n in 1usize..3, c in 1usize..5, h in 1usize..6, w in 1usize..6) {
            let x = Tensor::<f32>::from_fn(vec![n, c, h, w], |i| i as f32);
            let s = img2seq(&x).unwrap();
            prop_assert_eq!(s.shape(), &[n, h * w, c]);
            prop_assert_eq!(seq2img(&s, h, w).unwrap(), x);
        }

        #[test]
        fn permute_inverse(dims in prop::collection::vec(1usize..4, 1..5), seed in 0u64..1000) {
            let rank = dims.len();
            let mut perm: Vec<usize> = (0..rank).collect();
            // Deterministic shuffle from the seed.
            for i in (1..rank).rev() {
                perm.swap(i, (seed as usize + i * 7) % (i + 1));
            }
            let x = Tensor::<f64>::from_fn(dims, |i| i as f64);
            let y = permute(&x, &perm).unwrap();
            prop_assert_eq!(permute(&y, &inverse_permutation(&perm)).unwrap(), x);
        }
    }
}
