/// Output nonlinearity of a [`DenseLayer`](super::DenseLayer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
    /// `elu(x) + 1`: strictly positive, used for variance heads.
    EluPlusOne,
    /// Applied across the whole output vector.
    Softmax,
}

#[inline]
pub fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

#[inline]
pub fn elu_plus_one_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax, overwriting `v`.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl Activation {
    pub(crate) fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Sigmoid => v.iter_mut().for_each(|x| *x = sigmoid(*x)),
            Activation::EluPlusOne => v.iter_mut().for_each(|x| *x = elu_plus_one(*x)),
            Activation::Softmax => softmax_in_place(v),
        }
    }

    /// Gradient w.r.t. the pre-activation, written into `dy` in place.
    ///
    /// Only the activation output `y` is needed: relu's `y > 0` iff the
    /// pre-activation is positive (subgradient 0 at 0), and `elu + 1` has
    /// `y < 1` exactly on the exponential branch where the derivative is `y`.
    pub(crate) fn backward_in_place(self, y: &[f64], dy: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Relu => {
                for (d, &yi) in dy.iter_mut().zip(y) {
                    if yi <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (d, &yi) in dy.iter_mut().zip(y) {
                    *d *= yi * (1.0 - yi);
                }
            }
            Activation::EluPlusOne => {
                for (d, &yi) in dy.iter_mut().zip(y) {
                    if yi < 1.0 {
                        *d *= yi;
                    }
                }
            }
            Activation::Softmax => {
                let dot: f64 = dy.iter().zip(y).map(|(d, yi)| d * yi).sum();
                for (d, &yi) in dy.iter_mut().zip(y) {
                    *d = yi * (*d - dot);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn elu_plus_one_values() {
        assert_eq!(elu_plus_one(0.0), 1.0);
        assert_eq!(elu_plus_one(2.0), 3.0);
        assert!((elu_plus_one(-1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert!(elu_plus_one(-700.0) > 0.0);
        assert!(elu_plus_one(-30.0) > 0.0);
        // derivative continuous at the seam
        assert_eq!(elu_plus_one_grad(0.0), 1.0);
        assert!((elu_plus_one_grad(-1e-12) - 1.0).abs() < 1e-11);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = vec![1000.0, -3.0, 2.5, 0.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn relu_backward_zero_at_kink() {
        let y = [0.0, 2.0, 0.0];
        let mut dy = [1.0, 1.0, 1.0];
        Activation::Relu.backward_in_place(&y, &mut dy);
        assert_eq!(dy, [0.0, 1.0, 0.0]);
    }

    #[test]
    fn sigmoid_stays_in_unit_interval() {
        let mut v = vec![-30.0, 0.0, 30.0];
        Activation::Sigmoid.apply(&mut v);
        assert!(v.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(v[1], 0.5);
    }
}
