use crate::tensor::{Scalar, Tensor};

/// `sqrt(2/π)` in the tanh GELU approximation.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh GELU approximation.
const GELU_CUBIC: f64 = 0.044_715;

/// Elementwise maps with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`
    Gelu,
    Relu,
    Neg,
    Scale(f64),
}

impl Unary {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Gelu => {
                let half = T::from_f64(0.5);
                let inner = T::from_f64(GELU_SQRT_2_OVER_PI) * (x + T::from_f64(GELU_CUBIC) * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
            Unary::Relu => x.max(T::zero()),
            Unary::Neg => -x,
            Unary::Scale(c) => x * T::from_f64(c),
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Unary::Gelu => {
                let half = T::from_f64(0.5);
                let k = T::from_f64(GELU_SQRT_2_OVER_PI);
                let a = T::from_f64(GELU_CUBIC);
                let t = (k * (x + a * x * x * x)).tanh();
                let dinner = k * (T::one() + T::from_f64(3.0) * a * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Neg => -T::one(),
            Unary::Scale(c) => T::from_f64(c),
        }
    }
}

pub fn unary_map<T: Scalar>(input: &Tensor<T>, f: Unary) -> Tensor<T> {
    input.map(|v| f.apply(v))
}

pub fn unary_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>, f: Unary) -> crate::Result<Tensor<T>> {
    input.zip_map(grad_out, "unary_backward", |x, g| g * f.derivative(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gelu_values() {
        assert_eq!(Unary::Gelu.apply(0.0f64), 0.0);
        // 0.5·(1 + tanh(0.7978845608·1.044715))
        assert_abs_diff_eq!(Unary::Gelu.apply(1.0f64), 0.841_191_990_608_276_8, epsilon = 1e-12);
        assert_abs_diff_eq!(Unary::Gelu.apply(-1.0f64), -0.158_808_009_391_723_24, epsilon = 1e-12);
    }

    #[test]
    fn relu_values() {
        assert_eq!(Unary::Relu.apply(-1.0f64), 0.0);
        assert_eq!(Unary::Relu.apply(2.0f64), 2.0);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (Unary::Gelu.apply(x + h) - Unary::Gelu.apply(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(Unary::Gelu.derivative(x), fd, epsilon = 1e-8);
        }
    }
}
