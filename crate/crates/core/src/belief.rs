//! Factorized Gaussian belief over the latent state.

use crate::error::{Error, Result};
use crate::nn::VAR_FLOOR;

/// Initial variance on every latent dimension.
pub const INITIAL_VARIANCE: f64 = 10.0;

/// Mean over `n = 2m` latent units plus the three diagonal covariance
/// vectors of the paired `(upper_i, lower_i)` blocks.
///
/// The first `m` mean entries are the observed ("upper") units, the last `m`
/// the memory ("lower") units. Covariance between unit `i` and `m + i` is
/// `var_side[i]`; every other cross-covariance is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub mean: Vec<f64>,
    pub var_upper: Vec<f64>,
    pub var_lower: Vec<f64>,
    pub var_side: Vec<f64>,
}

/// Gradient with respect to every field of a [`BeliefState`].
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefGrad {
    pub mean: Vec<f64>,
    pub var_upper: Vec<f64>,
    pub var_lower: Vec<f64>,
    pub var_side: Vec<f64>,
}

impl BeliefGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            mean: vec![0.0; 2 * m],
            var_upper: vec![0.0; m],
            var_lower: vec![0.0; m],
            var_side: vec![0.0; m],
        }
    }

    pub fn add_assign(&mut self, other: &BeliefGrad) {
        let pairs = [
            (&mut self.mean, &other.mean),
            (&mut self.var_upper, &other.var_upper),
            (&mut self.var_lower, &other.var_lower),
            (&mut self.var_side, &other.var_side),
        ];
        for (a, b) in pairs {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

/// Zero mean, `10 * I` covariance.
pub fn initial_belief(m: usize) -> Result<BeliefState> {
    if m == 0 {
        return Err(Error::InvalidDimension(
            "latent observation size m must be at least 1".into(),
        ));
    }
    Ok(BeliefState {
        mean: vec![0.0; 2 * m],
        var_upper: vec![INITIAL_VARIANCE; m],
        var_lower: vec![INITIAL_VARIANCE; m],
        var_side: vec![0.0; m],
    })
}

impl BeliefState {
    /// Latent observation size `m` (the state has `2m` units).
    pub fn m(&self) -> usize {
        self.var_upper.len()
    }

    /// Number of stored covariance scalars: always `3m`.
    pub fn covariance_len(&self) -> usize {
        self.var_upper.len() + self.var_lower.len() + self.var_side.len()
    }

    pub fn upper_mean(&self) -> &[f64] {
        &self.mean[..self.m()]
    }

    pub fn lower_mean(&self) -> &[f64] {
        &self.mean[self.m()..]
    }

    /// Smallest `u*l - s^2` over all paired blocks.
    pub fn min_block_determinant(&self) -> f64 {
        (0..self.m())
            .map(|i| self.var_upper[i] * self.var_lower[i] - self.var_side[i] * self.var_side[i])
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks shapes, finiteness, positivity and block PSD up to `slack`.
    pub fn validate(&self, slack: f64) -> Result<()> {
        let m = self.m();
        if m == 0 || self.mean.len() != 2 * m || self.var_lower.len() != m || self.var_side.len() != m
        {
            return Err(Error::InvalidDimension(format!(
                "belief with mean {} and variances {}/{}/{}",
                self.mean.len(),
                self.var_upper.len(),
                self.var_lower.len(),
                self.var_side.len()
            )));
        }
        let all = self
            .mean
            .iter()
            .chain(&self.var_upper)
            .chain(&self.var_lower)
            .chain(&self.var_side);
        if all.clone().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("belief state", None));
        }
        for i in 0..m {
            let (u, l, s) = (self.var_upper[i], self.var_lower[i], self.var_side[i]);
            if u <= 0.0 || l <= 0.0 {
                return Err(Error::InvalidDimension(format!(
                    "non-positive variance at unit {i}: upper {u}, lower {l}"
                )));
            }
            if u * l - s * s < -slack {
                return Err(Error::InvalidDimension(format!(
                    "block {i} not PSD: u*l - s^2 = {}",
                    u * l - s * s
                )));
            }
        }
        Ok(())
    }
}

/// Encoder output for one time step.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentObservation {
    pub w: Vec<f64>,
    pub var_obs: Vec<f64>,
    pub present: bool,
}

impl LatentObservation {
    /// Present observation; variances below [`VAR_FLOOR`] are raised to it.
    pub fn new(w: Vec<f64>, var_obs: Vec<f64>) -> Result<Self> {
        if w.len() != var_obs.len() {
            return Err(Error::ShapeMismatch {
                context: "latent observation variances",
                expected: w.len(),
                got: var_obs.len(),
            });
        }
        if w.iter().chain(&var_obs).any(|x| !x.is_finite()) {
            return Err(Error::non_finite("latent observation", None));
        }
        let var_obs = var_obs.into_iter().map(|v| v.max(VAR_FLOOR)).collect();
        Ok(Self {
            w,
            var_obs,
            present: true,
        })
    }

    pub fn absent(m: usize) -> Self {
        Self {
            w: vec![0.0; m],
            var_obs: vec![1.0; m],
            present: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_belief_values() {
        let b = initial_belief(1).unwrap();
        assert_eq!(b.mean, vec![0.0, 0.0]);
        assert_eq!((b.var_upper[0], b.var_lower[0], b.var_side[0]), (10.0, 10.0, 0.0));

        let b = initial_belief(3).unwrap();
        assert_eq!(b.mean, vec![0.0; 6]);
        assert!(b.var_upper.iter().chain(&b.var_lower).all(|&v| v == 10.0));
        assert!(b.var_side.iter().all(|&v| v == 0.0));
        assert_eq!(b.min_block_determinant(), 100.0);
        b.validate(0.0).unwrap();
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(matches!(initial_belief(0), Err(Error::InvalidDimension(_))));
    }

    #[test]
    fn storage_is_three_m() {
        for m in [1, 2, 15, 64] {
            assert_eq!(initial_belief(m).unwrap().covariance_len(), 3 * m);
        }
    }

    #[test]
    fn validation_catches_violations() {
        let mut b = initial_belief(2).unwrap();
        b.var_side[1] = 11.0;
        assert!(b.validate(1e-9).is_err());
        let mut b = initial_belief(2).unwrap();
        b.var_upper[0] = 0.0;
        assert!(b.validate(1e-9).is_err());
        let mut b = initial_belief(2).unwrap();
        b.mean[3] = f64::NAN;
        assert!(b.validate(1e-9).is_err());
    }

    #[test]
    fn observation_variance_floor() {
        let obs = LatentObservation::new(vec![0.0, 1.0], vec![0.0, 2.0]).unwrap();
        assert_eq!(obs.var_obs, vec![VAR_FLOOR, 2.0]);
    }
}
