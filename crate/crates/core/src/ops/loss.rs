use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean pixelwise negative log-likelihood of softmax over the class axis.
///
/// `logits` is `[N, K, H, W]`, `labels` holds `N·H·W` class ids in row-major
/// order. Pixels equal to `ignore_index` contribute neither loss nor
/// gradient. Returns the loss and `∂loss/∂logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[u8], ignore_index: u8) -> Result<(T, Tensor<T>)> {
    const OP: &str = "cross_entropy";
    let [n, k, h, w] = logits.dims::<4>(OP)?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::dim(
            OP,
            format!("{} labels for {n}×{h}×{w} logits", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    let count = labels.iter().filter(|&&l| l != ignore_index).count();
    if count == 0 {
        return Err(Error::Contract(
            "cross_entropy: every pixel is ignored, mean loss undefined".into(),
        ));
    }
    let x = logits.data();
    let inv_count = T::one() / T::from_usize(count);
    let mut nll = Vec::with_capacity(count);
    let mut grad = vec![T::zero(); x.len()];
    for ni in 0..n {
        let base = ni * k * hw;
        for p in 0..hw {
            let label = labels[ni * hw + p];
            if label == ignore_index {
                continue;
            }
            let at = |c: usize| base + c * hw + p;
            let max = (0..k).map(|c| x[at(c)]).fold(T::neg_infinity(), T::max);
            let sum_exp = (0..k).fold(T::zero(), |a, c| a + (x[at(c)] - max).exp());
            let lse = max + sum_exp.ln();
            nll.push(lse - x[at(label as usize)]);
            for c in 0..k {
                let prob = (x[at(c)] - lse).exp();
                let onehot = if c == label as usize { T::one() } else { T::zero() };
                grad[at(c)] = (prob - onehot) * inv_count;
            }
        }
    }
    Ok((
        super::compensated_sum(nll) * inv_count,
        Tensor::from_parts(logits.shape().to_vec(), grad),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_two_class_is_ln2() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 2, 2]);
        let (loss, _) = cross_entropy(&logits, &[0, 1, 1, 0], 255).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn single_pixel_hand_value() {
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![1.0f64, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0], 255).unwrap();
        assert_abs_diff_eq!(loss, 0.313_261_687_518_222_86, epsilon = 1e-12);
    }

    #[test]
    fn ignored_pixels_have_zero_gradient() {
        let logits = Tensor::<f64>::from_fn(vec![1, 3, 1, 4], |i| i as f64 * 0.3);
        let (_, g) = cross_entropy(&logits, &[0, 255, 2, 255], 255).unwrap();
        for c in 0..3 {
            assert_eq!(g.get(&[0, c, 0, 1]).unwrap(), 0.0);
            assert_eq!(g.get(&[0, c, 0, 3]).unwrap(), 0.0);
        }
    }

    #[test]
    fn all_ignored_is_a_contract_error() {
        let logits = Tensor::<f64>::zeros(vec![1, 2, 1, 2]);
        assert!(matches!(
            cross_entropy(&logits, &[255, 255], 255),
            Err(Error::Contract(_))
        ));
    }
}
