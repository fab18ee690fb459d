//! Evaluation: per-sequence log-likelihood, RMSE, calibration of normalized
//! errors, imputation scoring and the two reference baselines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward_sequence, frames, sequence_loss, LossHead, RknModel, SequenceLoss, SequenceTrace};
use crate::nn::{Activation, AdamConfig, AdamState, Mlp, PROB_CLAMP, VAR_FLOOR};
use crate::params::Parameterized;
use crate::pendulum::Trajectory;

pub const HIST_BINS: usize = 61;
pub const HIST_RANGE: f64 = 6.0;

/// Pooled statistics of normalized errors `(s - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub count: usize,
    /// NaN when `count == 0`.
    pub mean: f64,
    pub std: f64,
    /// 61 equal bins over `[-6, 6]`; the last bin is closed on the right.
    pub histogram: Vec<u64>,
    pub below: u64,
    pub above: u64,
}

impl Calibration {
    pub fn bin_edges(i: usize) -> (f64, f64) {
        let w = 2.0 * HIST_RANGE / HIST_BINS as f64;
        (-HIST_RANGE + i as f64 * w, -HIST_RANGE + (i + 1) as f64 * w)
    }

    /// CSV with header `bin_lo,bin_hi,count`, one row per bin.
    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            let (lo, hi) = Self::bin_edges(i);
            s.push_str(&format!("{lo},{hi},{c}\n"));
        }
        s
    }
}

/// Mean, population standard deviation and histogram of `errors`.
pub fn calibration_stats(errors: &[f64]) -> Calibration {
    let mut histogram = vec![0u64; HIST_BINS];
    let (mut below, mut above) = (0, 0);
    for &e in errors {
        if e < -HIST_RANGE {
            below += 1;
        } else if e > HIST_RANGE {
            above += 1;
        } else {
            let pos = (e + HIST_RANGE) / (2.0 * HIST_RANGE) * HIST_BINS as f64;
            histogram[(pos as usize).min(HIST_BINS - 1)] += 1;
        }
    }
    let n = errors.len();
    let (mean, std) = if n == 0 {
        (f64::NAN, f64::NAN)
    } else {
        let mean = errors.iter().sum::<f64>() / n as f64;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    Calibration {
        count: n,
        mean,
        std,
        histogram,
        below,
        above,
    }
}

/// What one sequence contributes to an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceStats {
    /// Per-step negative log-likelihood of the training head.
    pub nll: f64,
    /// Root mean squared error of the decoded state (Gaussian head) or of the
    /// decoded frames against the true frames (Bernoulli head).
    pub rmse: f64,
    /// Normalized state errors; empty for the Bernoulli head.
    pub normalized: Vec<f64>,
    /// Summed Bernoulli negative log-likelihood over absent frames and their count.
    pub missing_nll: f64,
    pub missing_frames: usize,
}

fn bernoulli_frame_nll(target: &[f64], probs: &[f64]) -> f64 {
    target
        .iter()
        .zip(probs)
        .map(|(&o, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(o * p.ln() + (1.0 - o) * (1.0 - p).ln())
        })
        .sum()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / a.len() as f64).sqrt()
}

/// Statistics of one sequence from its forward trace and loss.
pub fn sequence_stats(model: &RknModel, traj: &Trajectory, trace: &SequenceTrace, loss: &SequenceLoss) -> SequenceStats {
    match model.config.head {
        LossHead::GaussianState => {
            let means = trace.means();
            let vars = trace.vars();
            let normalized = traj
                .targets
                .iter()
                .zip(means.iter().zip(&vars))
                .map(|(s, (mu, v))| (s - mu) / v.max(VAR_FLOOR).sqrt())
                .collect();
            SequenceStats {
                nll: loss.loss,
                rmse: rmse(&means, &traj.targets),
                normalized,
                missing_nll: 0.0,
                missing_frames: 0,
            }
        }
        LossHead::BernoulliImage => {
            let truth = frames(traj);
            let images = trace.images().unwrap_or_default();
            let d = traj.obs_dim;
            let mut missing_nll = 0.0;
            let mut missing_frames = 0;
            for t in (0..traj.len()).filter(|&t| !traj.mask[t]) {
                missing_nll += bernoulli_frame_nll(&truth[t * d..(t + 1) * d], &images[t * d..(t + 1) * d]);
                missing_frames += 1;
            }
            SequenceStats {
                nll: loss.loss,
                rmse: rmse(&images, &truth),
                normalized: Vec::new(),
                missing_nll,
                missing_frames,
            }
        }
    }
}

/// Mean and population standard deviation over sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub sequences: usize,
    /// Per-step log-likelihood (higher is better).
    pub log_likelihood: Summary,
    pub rmse: Summary,
    pub calibration: Calibration,
    /// Per-frame Bernoulli log-likelihood pooled over absent frames, if any.
    pub missing_log_likelihood: Option<f64>,
}

impl EvalReport {
    /// Mean per-step negative log-likelihood, the value logged as `loss`.
    pub fn loss(&self) -> f64 {
        -self.log_likelihood.mean
    }
}

/// Combines per-sequence statistics in the order given.
pub fn aggregate(stats: &[SequenceStats]) -> EvalReport {
    let ll: Vec<f64> = stats.iter().map(|s| -s.nll).collect();
    let rmse: Vec<f64> = stats.iter().map(|s| s.rmse).collect();
    let normalized: Vec<f64> = stats.iter().flat_map(|s| s.normalized.iter().copied()).collect();
    let missing: usize = stats.iter().map(|s| s.missing_frames).sum();
    let missing_nll: f64 = stats.iter().map(|s| s.missing_nll).sum();
    EvalReport {
        sequences: stats.len(),
        log_likelihood: Summary::of(&ll),
        rmse: Summary::of(&rmse),
        calibration: calibration_stats(&normalized),
        missing_log_likelihood: (missing > 0).then(|| -missing_nll / missing as f64),
    }
}

pub fn evaluate_sequence(model: &RknModel, traj: &Trajectory) -> Result<SequenceStats> {
    let trace = forward_sequence(model, traj)?;
    let loss = sequence_loss(model, traj, &trace)?;
    Ok(sequence_stats(model, traj, &trace, &loss))
}

/// Evaluates `model` on every sequence; read-only and parallel, with results
/// combined in dataset order.
pub fn evaluate(model: &RknModel, dataset: &[Trajectory]) -> Result<EvalReport> {
    let stats: Vec<SequenceStats> = dataset
        .par_iter()
        .map(|traj| evaluate_sequence(model, traj))
        .collect::<Result<_>>()?;
    Ok(aggregate(&stats))
}

/// Bernoulli log-likelihood per absent frame when each absent frame is
/// predicted by the last visible one (all zeros before the first), pooled
/// over the dataset. `None` when no frame is absent.
pub fn copy_last_visible_log_likelihood(dataset: &[Trajectory]) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in dataset {
        let d = traj.obs_dim;
        let truth = frames(traj);
        let mut last = vec![0.0; d];
        for t in 0..traj.len() {
            let frame = &truth[t * d..(t + 1) * d];
            if traj.mask[t] {
                last.copy_from_slice(frame);
            } else {
                total += bernoulli_frame_nll(frame, &last);
                count += 1;
            }
        }
    }
    (count > 0).then(|| -total / count as f64)
}

/// RMSE per sequence when the observation itself is read as the state
/// estimate; only meaningful when observations are noisy states.
pub fn identity_rmse(dataset: &[Trajectory]) -> Result<Summary> {
    let per_seq = dataset
        .iter()
        .map(|traj| {
            if traj.obs_dim != traj.target_dim {
                return Err(Error::ShapeMismatch {
                    context: "identity baseline",
                    expected: traj.target_dim,
                    got: traj.obs_dim,
                });
            }
            Ok(rmse(&frames(traj), &traj.targets))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary::of(&per_seq))
}

/// Per-frame regressor from a single observation straight to the state:
/// `obs -> 30 relu -> D_s linear`, fit by least squares with Adam. It sees
/// one corrupted frame at a time and carries no memory.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRegressor {
    pub net: Mlp,
}

pub const REGRESSOR_HIDDEN: usize = 30;
const REGRESSOR_BATCH: usize = 64;

impl FrameRegressor {
    pub fn fit(dataset: &[Trajectory], epochs: usize, seed: u64) -> Result<FrameRegressor> {
        let first = dataset
            .first()
            .ok_or_else(|| Error::InvalidDimension("empty dataset for the frame regressor".into()))?;
        let (d_in, d_out) = (first.obs_dim, first.target_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::glorot(&[d_in, REGRESSOR_HIDDEN, d_out], Activation::Relu, Activation::Linear, &mut rng);
        let mut frames_idx: Vec<(usize, usize)> = dataset
            .iter()
            .enumerate()
            .flat_map(|(i, tr)| (0..tr.len()).filter(|&t| tr.mask[t]).map(move |t| (i, t)))
            .collect();
        let mut adam = AdamState::new(AdamConfig::default(), net.num_params());
        let mut grad = net.zeros_like();
        for _ in 0..epochs {
            frames_idx.shuffle(&mut rng);
            for batch in frames_idx.chunks(REGRESSOR_BATCH) {
                grad.fill_zero();
                for &(i, t) in batch {
                    let x: Vec<f64> = dataset[i].observation(t).iter().map(|&v| v as f64).collect();
                    let trace = net.forward_traced(&x);
                    let scale = 2.0 / batch.len() as f64;
                    let dy: Vec<f64> = trace
                        .output()
                        .iter()
                        .zip(dataset[i].target(t))
                        .map(|(y, s)| scale * (y - s))
                        .collect();
                    net.backward(&trace, &dy, &mut grad);
                }
                adam.step(&mut net, &grad)?;
            }
        }
        Ok(FrameRegressor { net })
    }

    pub fn predict(&self, obs: &[f32]) -> Vec<f64> {
        let x: Vec<f64> = obs.iter().map(|&v| v as f64).collect();
        self.net.forward(&x)
    }

    /// Per-sequence RMSE over all frames.
    pub fn rmse(&self, dataset: &[Trajectory]) -> Summary {
        let per_seq: Vec<f64> = dataset
            .iter()
            .map(|traj| {
                let pred: Vec<f64> = (0..traj.len()).flat_map(|t| self.predict(traj.observation(t))).collect();
                rmse(&pred, &traj.targets)
            })
            .collect();
        Summary::of(&per_seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::pendulum::{make_dataset, ObservationKind, TaskKind};
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn calibration_of_standard_normal_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = calibration_stats(&xs);
        assert!(c.mean.abs() < 0.02, "{}", c.mean);
        assert!((0.98..=1.02).contains(&c.std), "{}", c.std);
        assert_eq!(c.histogram.len(), 61);
        assert_eq!(c.histogram.iter().sum::<u64>() + c.below + c.above, 100_000);
    }

    #[test]
    fn calibration_degenerate_and_scaling() {
        let c = calibration_stats(&[0.0; 10]);
        assert_eq!((c.mean, c.std), (0.0, 0.0));
        assert_eq!(c.histogram[30], 10);
        let xs = [-1.0, 0.5, 2.0, 3.0];
        let half: Vec<f64> = xs.iter().map(|x| x / 2.0).collect();
        assert!((calibration_stats(&half).std - calibration_stats(&xs).std / 2.0).abs() < 1e-15);
    }

    #[test]
    fn histogram_edges() {
        let c = calibration_stats(&[-6.0, 6.0, -6.5, 7.0]);
        assert_eq!(c.histogram[0], 1);
        assert_eq!(c.histogram[60], 1);
        assert_eq!((c.below, c.above), (1, 1));
        assert_eq!(Calibration::bin_edges(0).0, -6.0);
        assert!((Calibration::bin_edges(60).1 - 6.0).abs() < 1e-12);
        assert_eq!(c.histogram_csv().lines().count(), 62);
    }

    fn tiny(head: LossHead, kind: ObservationKind) -> (RknModel, Vec<Trajectory>) {
        let task = if head == LossHead::BernoulliImage { TaskKind::Impute50 } else { TaskKind::FilterNoisy };
        let data = make_dataset(task, kind, 5, 12, 9, 0);
        let mut cfg = ModelConfig::pendulum(kind.dim(), head);
        cfg.m = 3;
        cfg.num_basis = 2;
        cfg.bandwidth = 1;
        let model = RknModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (model, data)
    }

    #[test]
    fn log_likelihood_matches_external_recomputation() {
        let (model, data) = tiny(LossHead::GaussianState, ObservationKind::LowDim);
        let report = evaluate(&model, &data).unwrap();
        let mut ll = 0.0;
        for traj in &data {
            let trace = forward_sequence(&model, traj).unwrap();
            let g = crate::nn::gaussian_nll(&traj.targets, &trace.means(), &trace.vars(), 2).unwrap();
            ll -= g.loss;
        }
        assert!((report.log_likelihood.mean - ll / data.len() as f64).abs() < 1e-10);
        assert_eq!(report.calibration.count, 5 * 12 * 2);
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let (model, mut data) = tiny(LossHead::GaussianState, ObservationKind::LowDim);
        let a = evaluate(&model, &data).unwrap();
        data.reverse();
        let b = evaluate(&model, &data).unwrap();
        assert!((a.log_likelihood.mean - b.log_likelihood.mean).abs() < 1e-12);
        assert!((a.rmse.mean - b.rmse.mean).abs() < 1e-12);
        assert!((a.calibration.std - b.calibration.std).abs() < 1e-12);
    }

    #[test]
    fn bernoulli_report_scores_missing_frames() {
        let (model, data) = tiny(LossHead::BernoulliImage, ObservationKind::Image);
        let report = evaluate(&model, &data).unwrap();
        assert!(report.missing_log_likelihood.unwrap() < 0.0);
        assert_eq!(report.calibration.count, 0);
        assert!(report.rmse.mean > 0.0 && report.rmse.mean < 1.0);
    }

    #[test]
    fn copy_last_visible_baseline_by_hand() {
        let traj = Trajectory {
            seed: 0,
            obs_dim: 2,
            target_dim: 2,
            observations: vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0],
            mask: vec![false, true, false],
            targets: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            noise_factors: None,
        };
        // frame 0 against zeros: one pixel on -> ln(eps); frame 2 against (1,1): one pixel off -> ln(eps)
        let expected = (PROB_CLAMP.ln() + (1.0 - PROB_CLAMP).ln() + PROB_CLAMP.ln() + (1.0 - PROB_CLAMP).ln()) / 2.0;
        let got = copy_last_visible_log_likelihood(&[traj]).unwrap();
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn identity_baseline_on_clean_observations_is_zero() {
        let data = make_dataset(TaskKind::Impute50, ObservationKind::LowDim, 3, 10, 2, 0);
        assert!(identity_rmse(&data).unwrap().mean < 1e-6);
    }

    #[test]
    fn frame_regressor_learns_low_dim_states() {
        let data = make_dataset(TaskKind::Impute50, ObservationKind::LowDim, 20, 50, 4, 0);
        let untrained = FrameRegressor::fit(&data, 0, 1).unwrap().rmse(&data).mean;
        let trained = FrameRegressor::fit(&data, 20, 1).unwrap().rmse(&data).mean;
        assert!(trained < 0.5 * untrained, "{trained} vs {untrained}");
    }
}
