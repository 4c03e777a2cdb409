use crate::tensor::Scalar;

/// Neumaier-compensated sum. Keeps reductions over many elements accurate
/// to about one rounding, independent of length and ordering.
pub(crate) fn compensated_sum<T: Scalar>(values: impl IntoIterator<Item = T>) -> T {
    let (mut sum, mut carry) = (T::zero(), T::zero());
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}
