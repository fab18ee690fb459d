use crate::error::{Error, Result};
use crate::params::Parameterized;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

impl AdamState {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
        }
    }

    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch {
                context: "adam step",
                expected: self.first_moment.len(),
                got: params.len().max(grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient entry {i}"), None));
        }
        self.apply(params, grads);
        Ok(())
    }

    /// Updates `params` in place; a non-finite gradient names its block.
    pub fn step<P: Parameterized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut bad = None;
        grads.visit_blocks("", &mut |name, g| {
            if bad.is_none() && g.iter().any(|x| !x.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        if let Some(name) = bad {
            return Err(Error::non_finite(format!("gradient block {name}"), None));
        }
        let mut flat = params.to_flat();
        let g = grads.to_flat();
        if flat.len() != self.first_moment.len() {
            return Err(Error::ShapeMismatch {
                context: "adam step",
                expected: self.first_moment.len(),
                got: flat.len(),
            });
        }
        self.apply(&mut flat, &g);
        params.set_flat(&flat);
        Ok(())
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
        }
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut adam = AdamState::new(AdamConfig::default(), 3);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step_flat(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_value() {
        let mut adam = AdamState::new(AdamConfig::default(), 1);
        let mut p = vec![1.0];
        adam.step_flat(&mut p, &[1.0]).unwrap();
        let expect = 1.0 - 0.001 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expect).abs() < 1e-15);
        assert!((p[0] - 0.999).abs() < 1e-10);
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let mut adam = AdamState::new(AdamConfig::default(), 2);
        let mut p = vec![0.0, 0.0];
        assert!(adam.step_flat(&mut p, &[1.0, f64::NAN]).is_err());
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut adam = AdamState::new(AdamConfig::default(), 2);
            let mut p = vec![0.5, -0.5];
            for k in 0..50 {
                let g = [p[0] * 2.0 + k as f64 * 0.01, (p[1] - 1.0).sin()];
                adam.step_flat(&mut p, &g).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![3.0, 4.0];
        let norm = clip_gradients(&mut g, 1.0);
        assert_eq!(norm, 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);

        let mut g = vec![0.3, 0.4];
        clip_gradients(&mut g, 1.0);
        assert_eq!(g, vec![0.3, 0.4]);
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(g in proptest::collection::vec(-1e6f64..1e6, 1..40), max in 1e-3f64..100.0) {
            let mut g = g;
            clip_gradients(&mut g, max);
            prop_assert!(global_norm(&g) <= max + 1e-12 * max.max(1.0));
        }
    }
}
