//! Sequence losses as negative log-likelihoods (to be minimized).
//!
//! Both losses average over time steps and sum over feature dimensions.
//! Inputs are row-major `T x D` slices.

use crate::error::{Error, Result};

/// Lower bound applied to every predicted variance.
pub const VAR_FLOOR: f64 = 1e-6;
/// Predicted probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-7;
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone)]
pub struct GaussianNll {
    pub loss: f64,
    pub d_means: Vec<f64>,
    pub d_vars: Vec<f64>,
    /// Number of variances that were raised to [`VAR_FLOOR`].
    pub floored: usize,
}

#[derive(Debug, Clone)]
pub struct BernoulliNll {
    pub loss: f64,
    pub d_probs: Vec<f64>,
    /// Number of probabilities that hit the clamp.
    pub clamped: usize,
}

fn check_shapes(dim: usize, a: usize, b: usize, context: &'static str) -> Result<usize> {
    if dim == 0 || a % dim != 0 || a == 0 {
        return Err(Error::InvalidDimension(format!(
            "{context}: {a} values do not form rows of width {dim}"
        )));
    }
    if a != b {
        return Err(Error::ShapeMismatch {
            context,
            expected: a,
            got: b,
        });
    }
    Ok(a / dim)
}

/// `-(1/T) sum_t sum_d log N(s_td | mu_td, var_td)` and its gradients.
pub fn gaussian_nll(targets: &[f64], means: &[f64], vars: &[f64], dim: usize) -> Result<GaussianNll> {
    let steps = check_shapes(dim, targets.len(), means.len(), "gaussian_nll means")?;
    check_shapes(dim, targets.len(), vars.len(), "gaussian_nll variances")?;
    let inv_t = 1.0 / steps as f64;
    let mut loss = 0.0;
    let mut floored = 0;
    let mut d_means = vec![0.0; targets.len()];
    let mut d_vars = vec![0.0; targets.len()];
    for i in 0..targets.len() {
        let (v, clamped) = if vars[i] < VAR_FLOOR {
            (VAR_FLOOR, true)
        } else {
            (vars[i], false)
        };
        floored += clamped as usize;
        let r = targets[i] - means[i];
        loss += HALF_LN_2PI + 0.5 * v.ln() + r * r / (2.0 * v);
        d_means[i] = -r / v * inv_t;
        if !clamped {
            d_vars[i] = (0.5 / v - r * r / (2.0 * v * v)) * inv_t;
        }
    }
    Ok(GaussianNll {
        loss: loss * inv_t,
        d_means,
        d_vars,
        floored,
    })
}

/// `-(1/T) sum_t sum_i [o ln p + (1 - o) ln(1 - p)]` with clamped `p`.
pub fn bernoulli_nll(targets: &[f64], probs: &[f64], dim: usize) -> Result<BernoulliNll> {
    let steps = check_shapes(dim, targets.len(), probs.len(), "bernoulli_nll")?;
    let inv_t = 1.0 / steps as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut d_probs = vec![0.0; targets.len()];
    for i in 0..targets.len() {
        let raw = probs[i];
        let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let o = targets[i];
        loss -= o * p.ln() + (1.0 - o) * (1.0 - p).ln();
        if p != raw {
            clamped += 1;
        } else {
            d_probs[i] = -(o / p - (1.0 - o) / (1.0 - p)) * inv_t;
        }
    }
    Ok(BernoulliNll {
        loss: loss * inv_t,
        d_probs,
        clamped,
    })
}
