//! End-to-end model: dense encoder, the factorized filter unrolled over a
//! sequence, and Gaussian state / Bernoulli image decoders, with an exact
//! reverse pass through time.

use rand::Rng;

use crate::belief::{initial_belief, BeliefGrad, BeliefState, LatentObservation};
use crate::cell::{
    normalize_latent, normalize_latent_backward, predict_with, predict_with_backward,
    trans_noise_raw_grad, update, update_backward,
};
use crate::error::{Error, Result};
use crate::nn::{bernoulli_nll, gaussian_nll, Activation, DenseLayer, Mlp, MlpTrace, VAR_FLOOR};
use crate::params::{join, Parameterized};
use crate::pendulum::Trajectory;
use crate::transition::{
    assemble_transition, assemble_transition_backward, AssembledTransition, TransitionModel,
};

/// Which likelihood drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossHead {
    /// Gaussian likelihood of the ground-truth state under the decoded mean/variance.
    GaussianState,
    /// Bernoulli likelihood of the true frames under the decoded image.
    BernoulliImage,
}

impl LossHead {
    pub fn name(self) -> &'static str {
        match self {
            LossHead::GaussianState => "gaussian_state",
            LossHead::BernoulliImage => "bernoulli_image",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gaussian_state" => Some(LossHead::GaussianState),
            "bernoulli_image" => Some(LossHead::BernoulliImage),
            _ => None,
        }
    }
}

/// Architecture of an [`RknModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub state_dim: usize,
    pub m: usize,
    pub bandwidth: usize,
    pub num_basis: usize,
    /// Hidden width of the transition coefficient network; 0 is a direct affine map.
    pub coeff_hidden: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    pub head: LossHead,
}

impl ModelConfig {
    /// `m = 15, b = 3, K = 15`, encoder width 30, state decoders of width 10
    /// and an image decoder of width 64.
    pub fn pendulum(obs_dim: usize, head: LossHead) -> Self {
        Self {
            obs_dim,
            state_dim: 2,
            m: 15,
            bandwidth: 3,
            num_basis: 15,
            coeff_hidden: 0,
            encoder_hidden: vec![30],
            decoder_hidden: vec![10],
            image_hidden: vec![64],
            head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("obs_dim", self.obs_dim),
            ("state_dim", self.state_dim),
            ("m", self.m),
            ("K", self.num_basis),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidDimension(format!("{name} must be positive")));
        }
        if self.encoder_hidden.is_empty() {
            return Err(Error::InvalidDimension(
                "encoder needs at least one hidden layer".into(),
            ));
        }
        let hidden = self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .chain(&self.image_hidden);
        if hidden.clone().any(|&h| h == 0) {
            return Err(Error::InvalidDimension("hidden layer of width 0".into()));
        }
        Ok(())
    }
}

fn stack_sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RknModel {
    pub config: ModelConfig,
    /// Shared trunk; every layer is relu.
    pub encoder_trunk: Mlp,
    pub encoder_mean: DenseLayer,
    pub encoder_var: DenseLayer,
    pub transition: TransitionModel,
    pub decoder_mean: Mlp,
    /// Input is `(var_upper, var_side, var_lower)` concatenated.
    pub decoder_var: Mlp,
    pub decoder_image: Option<Mlp>,
}

impl RknModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (m, n) = (config.m, 2 * config.m);
        let trunk_sizes = stack_sizes(config.obs_dim, &config.encoder_hidden[..config.encoder_hidden.len() - 1], *config.encoder_hidden.last().unwrap());
        let encoder_trunk = Mlp::glorot(&trunk_sizes, Activation::Relu, Activation::Relu, rng);
        let width = encoder_trunk.outputs();
        let encoder_mean = DenseLayer::glorot(width, m, Activation::Linear, rng);
        let encoder_var = DenseLayer::glorot(width, m, Activation::EluPlusOne, rng);
        let transition =
            TransitionModel::new(m, config.bandwidth, config.num_basis, config.coeff_hidden, rng)?;
        let decoder_mean = Mlp::glorot(
            &stack_sizes(n, &config.decoder_hidden, config.state_dim),
            Activation::Relu,
            Activation::Linear,
            rng,
        );
        let decoder_var = Mlp::glorot(
            &stack_sizes(3 * m, &config.decoder_hidden, config.state_dim),
            Activation::Relu,
            Activation::EluPlusOne,
            rng,
        );
        let decoder_image = (config.head == LossHead::BernoulliImage).then(|| {
            Mlp::glorot(
                &stack_sizes(n, &config.image_hidden, config.obs_dim),
                Activation::Relu,
                Activation::Sigmoid,
                rng,
            )
        });
        Ok(Self {
            config,
            encoder_trunk,
            encoder_mean,
            encoder_var,
            transition,
            decoder_mean,
            decoder_var,
            decoder_image,
        })
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// Adds `other`'s parameters scaled by `scale`.
    pub fn add_scaled(&mut self, scale: f64, other: &RknModel) {
        let flat = other.to_flat();
        let mut pos = 0;
        self.visit_blocks_mut("", &mut |_, b| {
            let len = b.len();
            for (x, g) in b.iter_mut().zip(&flat[pos..pos + len]) {
                *x += scale * g;
            }
            pos += len;
        });
    }

    /// `(w, var_obs)` before normalization and flooring, with the trunk trace.
    fn encode(&self, obs: &[f64]) -> EncoderTrace {
        let trunk = self.encoder_trunk.forward_traced(obs);
        let mut w_raw = vec![0.0; self.m()];
        let mut var_raw = vec![0.0; self.m()];
        self.encoder_mean.forward_into(trunk.output(), &mut w_raw);
        self.encoder_var.forward_into(trunk.output(), &mut var_raw);
        EncoderTrace {
            trunk,
            w_raw,
            var_raw,
        }
    }
}

impl Parameterized for RknModel {
    fn visit_blocks(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder_trunk.visit_blocks(&join(prefix, "encoder.trunk"), f);
        self.encoder_mean.visit_blocks(&join(prefix, "encoder.mean_head"), f);
        self.encoder_var.visit_blocks(&join(prefix, "encoder.var_head"), f);
        self.transition.visit_blocks(&join(prefix, "transition"), f);
        self.decoder_mean.visit_blocks(&join(prefix, "decoder_mean"), f);
        self.decoder_var.visit_blocks(&join(prefix, "decoder_var"), f);
        if let Some(d) = &self.decoder_image {
            d.visit_blocks(&join(prefix, "decoder_image"), f);
        }
    }

    fn visit_blocks_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder_trunk.visit_blocks_mut(&join(prefix, "encoder.trunk"), f);
        self.encoder_mean.visit_blocks_mut(&join(prefix, "encoder.mean_head"), f);
        self.encoder_var.visit_blocks_mut(&join(prefix, "encoder.var_head"), f);
        self.transition.visit_blocks_mut(&join(prefix, "transition"), f);
        self.decoder_mean.visit_blocks_mut(&join(prefix, "decoder_mean"), f);
        self.decoder_var.visit_blocks_mut(&join(prefix, "decoder_var"), f);
        if let Some(d) = &mut self.decoder_image {
            d.visit_blocks_mut(&join(prefix, "decoder_image"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub trunk: MlpTrace,
    pub w_raw: Vec<f64>,
    pub var_raw: Vec<f64>,
}

/// Everything one time step keeps for the reverse pass.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// `None` when the frame is absent; the encoder is then never run.
    pub encoder: Option<EncoderTrace>,
    pub observation: Option<LatentObservation>,
    pub assembled: AssembledTransition,
    pub prior: BeliefState,
    pub posterior: BeliefState,
    pub mean_trace: MlpTrace,
    pub var_trace: MlpTrace,
    pub image_trace: Option<MlpTrace>,
}

impl StepTrace {
    pub fn decoded_mean(&self) -> &[f64] {
        self.mean_trace.output()
    }

    pub fn decoded_var(&self) -> &[f64] {
        self.var_trace.output()
    }

    pub fn decoded_image(&self) -> Option<&[f64]> {
        self.image_trace.as_ref().map(|t| t.output())
    }
}

#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub initial: BeliefState,
    pub steps: Vec<StepTrace>,
}

impl SequenceTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Decoded state means, row-major `T x D_s`.
    pub fn means(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.decoded_mean().iter().copied()).collect()
    }

    /// Decoded state variances, row-major `T x D_s`.
    pub fn vars(&self) -> Vec<f64> {
        self.steps.iter().flat_map(|s| s.decoded_var().iter().copied()).collect()
    }

    /// Decoded pixel probabilities, row-major `T x D_o`, if the model has an image decoder.
    pub fn images(&self) -> Option<Vec<f64>> {
        let mut out = Vec::new();
        for s in &self.steps {
            out.extend_from_slice(s.decoded_image()?);
        }
        Some(out)
    }

    fn posterior_before(&self, t: usize) -> &BeliefState {
        if t == 0 {
            &self.initial
        } else {
            &self.steps[t - 1].posterior
        }
    }
}

fn check_trajectory(model: &RknModel, traj: &Trajectory) -> Result<()> {
    traj.validate()?;
    if traj.obs_dim != model.config.obs_dim {
        return Err(Error::ShapeMismatch {
            context: "observation width",
            expected: model.config.obs_dim,
            got: traj.obs_dim,
        });
    }
    if traj.target_dim != model.config.state_dim {
        return Err(Error::ShapeMismatch {
            context: "target width",
            expected: model.config.state_dim,
            got: traj.target_dim,
        });
    }
    Ok(())
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn belief_finite(b: &BeliefState) -> bool {
    all_finite(&b.mean) && all_finite(&b.var_upper) && all_finite(&b.var_lower) && all_finite(&b.var_side)
}

fn posterior_scale(b: &BeliefState) -> f64 {
    b.var_upper.iter().zip(&b.var_lower).map(|(u, l)| u * l).fold(1.0, f64::max)
}

fn variance_input(b: &BeliefState) -> Vec<f64> {
    let mut v = Vec::with_capacity(3 * b.m());
    v.extend_from_slice(&b.var_upper);
    v.extend_from_slice(&b.var_side);
    v.extend_from_slice(&b.var_lower);
    v
}

/// Runs the filter over `traj`: encode present frames, normalize, predict,
/// update, decode the posterior.
pub fn forward_sequence(model: &RknModel, traj: &Trajectory) -> Result<SequenceTrace> {
    check_trajectory(model, traj)?;
    let m = model.m();
    let initial = initial_belief(m)?;
    let noise = model.transition.trans_noise();
    let mut steps: Vec<StepTrace> = Vec::with_capacity(traj.len());
    let mut obs_buf = vec![0.0; traj.obs_dim];
    for t in 0..traj.len() {
        let post_prev = steps.last().map_or(&initial, |s| &s.posterior);
        let assembled = assemble_transition(&model.transition, &post_prev.mean).map_err(|e| e.at_time(t))?;
        let prior = predict_with(post_prev, &assembled.matrix, &noise);
        if !belief_finite(&prior) {
            return Err(Error::non_finite("predicted belief", Some(t)));
        }
        let (encoder, observation, posterior) = if traj.mask[t] {
            for (d, &s) in obs_buf.iter_mut().zip(traj.observation(t)) {
                *d = s as f64;
            }
            let enc = model.encode(&obs_buf);
            let obs = LatentObservation::new(normalize_latent(&enc.w_raw), enc.var_raw.clone())
                .map_err(|e| e.at_time(t))?;
            let post = update(&prior, &obs);
            if !belief_finite(&post) {
                return Err(Error::non_finite("updated belief", Some(t)));
            }
            (Some(enc), Some(obs), post)
        } else {
            (None, None, prior.clone())
        };
        // rounding in u*l - s^2 scales with u*l
        if let Err(e) = posterior.validate(1e-9 * posterior_scale(&posterior)) {
            return Err(Error::Numeric {
                what: format!("belief invariant: {e}"),
                time: Some(t),
            });
        }

        let mean_trace = model.decoder_mean.forward_traced(&posterior.mean);
        let var_trace = model.decoder_var.forward_traced(&variance_input(&posterior));
        let image_trace = model.decoder_image.as_ref().map(|d| d.forward_traced(&posterior.mean));
        let decoded_ok = all_finite(mean_trace.output())
            && all_finite(var_trace.output())
            && image_trace.as_ref().is_none_or(|tr| all_finite(tr.output()));
        if !decoded_ok {
            return Err(Error::non_finite("decoder output", Some(t)));
        }
        steps.push(StepTrace {
            encoder,
            observation,
            assembled,
            prior,
            posterior,
            mean_trace,
            var_trace,
            image_trace,
        });
    }
    Ok(SequenceTrace { initial, steps })
}

/// Loss of one sequence and its gradient w.r.t. the decoder outputs used by the head.
#[derive(Debug, Clone)]
pub struct SequenceLoss {
    pub loss: f64,
    pub d_means: Option<Vec<f64>>,
    pub d_vars: Option<Vec<f64>>,
    pub d_images: Option<Vec<f64>>,
}

/// Frames of `traj` as `f64`, row-major `T x D_o`. Absent frames are included.
pub fn frames(traj: &Trajectory) -> Vec<f64> {
    traj.observations.iter().map(|&v| v as f64).collect()
}

pub fn sequence_loss(model: &RknModel, traj: &Trajectory, trace: &SequenceTrace) -> Result<SequenceLoss> {
    match model.config.head {
        LossHead::GaussianState => {
            let g = gaussian_nll(&traj.targets, &trace.means(), &trace.vars(), model.config.state_dim)?;
            Ok(SequenceLoss {
                loss: g.loss,
                d_means: Some(g.d_means),
                d_vars: Some(g.d_vars),
                d_images: None,
            })
        }
        LossHead::BernoulliImage => {
            let probs = trace
                .images()
                .ok_or_else(|| Error::Config("bernoulli_image head without an image decoder".into()))?;
            let b = bernoulli_nll(&frames(traj), &probs, model.config.obs_dim)?;
            Ok(SequenceLoss {
                loss: b.loss,
                d_means: None,
                d_vars: None,
                d_images: Some(b.d_probs),
            })
        }
    }
}

fn row(v: &Option<Vec<f64>>, t: usize, width: usize) -> Option<&[f64]> {
    v.as_ref().map(|v| &v[t * width..(t + 1) * width])
}

/// Reverse pass through decoders, cell and encoder, accumulating into `grad`.
///
/// The gradient flowing into the posterior of step `t - 1` is cut whenever
/// `t` is a positive multiple of `truncation`; the forward pass is untouched.
pub fn backward_sequence(
    model: &RknModel,
    trace: &SequenceTrace,
    loss: &SequenceLoss,
    truncation: usize,
    grad: &mut RknModel,
) -> Result<()> {
    let m = model.m();
    let ds = model.config.state_dim;
    let d_obs = model.config.obs_dim;
    let truncation = truncation.max(1);
    let mut carry = BeliefGrad::zeros(m);
    for t in (0..trace.len()).rev() {
        let st = &trace.steps[t];
        let mut d_post = std::mem::replace(&mut carry, BeliefGrad::zeros(m));

        if let Some(dy) = row(&loss.d_means, t, ds) {
            let dx = model.decoder_mean.backward(&st.mean_trace, dy, &mut grad.decoder_mean);
            d_post.mean.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        if let Some(dy) = row(&loss.d_vars, t, ds) {
            let dx = model.decoder_var.backward(&st.var_trace, dy, &mut grad.decoder_var);
            for i in 0..m {
                d_post.var_upper[i] += dx[i];
                d_post.var_side[i] += dx[m + i];
                d_post.var_lower[i] += dx[2 * m + i];
            }
        }
        if let (Some(dy), Some(dec), Some(tr)) = (
            row(&loss.d_images, t, d_obs),
            &model.decoder_image,
            &st.image_trace,
        ) {
            let g = grad
                .decoder_image
                .as_mut()
                .ok_or_else(|| Error::Config("gradient model lacks an image decoder".into()))?;
            let dx = dec.backward(tr, dy, g);
            d_post.mean.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }

        let d_prior = match (&st.encoder, &st.observation) {
            (Some(enc), Some(obs)) => {
                let (d_prior, d_w, d_var) = update_backward(&st.prior, obs, &d_post);
                let mut d_w_raw = normalize_latent_backward(&enc.w_raw, &d_w);
                let mut d_var_raw: Vec<f64> = d_var
                    .iter()
                    .zip(&enc.var_raw)
                    .map(|(&g, &v)| if v < VAR_FLOOR { 0.0 } else { g })
                    .collect();
                let trunk_out = enc.trunk.output();
                let mut d_trunk = vec![0.0; trunk_out.len()];
                let mut d_trunk_var = vec![0.0; trunk_out.len()];
                model.encoder_mean.backward_accumulate(
                    trunk_out,
                    &enc.w_raw,
                    &mut d_w_raw,
                    &mut grad.encoder_mean,
                    Some(&mut d_trunk),
                );
                model.encoder_var.backward_accumulate(
                    trunk_out,
                    &enc.var_raw,
                    &mut d_var_raw,
                    &mut grad.encoder_var,
                    Some(&mut d_trunk_var),
                );
                d_trunk.iter_mut().zip(&d_trunk_var).for_each(|(a, b)| *a += b);
                model.encoder_trunk.backward(&enc.trunk, &d_trunk, &mut grad.encoder_trunk);
                d_prior
            }
            _ => d_post,
        };

        let post_prev = trace.posterior_before(t);
        let (mut d_prev, d_a, d_noise) = predict_with_backward(post_prev, &st.assembled.matrix, &d_prior);
        for (g, d) in grad
            .transition
            .trans_noise_raw
            .iter_mut()
            .zip(trans_noise_raw_grad(&model.transition.trans_noise_raw, &d_noise))
        {
            *g += d;
        }
        let d_mean = assemble_transition_backward(&model.transition, &st.assembled, &d_a, &mut grad.transition);
        d_prev.mean.iter_mut().zip(&d_mean).for_each(|(a, b)| *a += b);

        let finite = all_finite(&d_prev.mean)
            && all_finite(&d_prev.var_upper)
            && all_finite(&d_prev.var_lower)
            && all_finite(&d_prev.var_side);
        if !finite {
            return Err(Error::non_finite("belief gradient", Some(t)));
        }
        if t % truncation != 0 {
            carry = d_prev;
        }
    }
    let mut bad = None;
    grad.visit_blocks("", &mut |name, b| {
        if bad.is_none() && !all_finite(b) {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::non_finite(format!("gradient of {name}"), None)),
        None => Ok(()),
    }
}

/// Loss of one sequence.
pub fn loss_only(model: &RknModel, traj: &Trajectory) -> Result<f64> {
    let trace = forward_sequence(model, traj)?;
    Ok(sequence_loss(model, traj, &trace)?.loss)
}

/// Loss of one sequence and its full parameter gradient.
pub fn loss_and_grad(model: &RknModel, traj: &Trajectory, truncation: usize) -> Result<(f64, RknModel)> {
    let trace = forward_sequence(model, traj)?;
    let loss = sequence_loss(model, traj, &trace)?;
    let mut grad = model.zeros_like();
    backward_sequence(model, &trace, &loss, truncation, &mut grad)?;
    Ok((loss.loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::reference_gradient_check;
    use crate::pendulum::{make_trajectory, ObservationKind, PendulumParams, TaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config(obs_dim: usize, head: LossHead) -> ModelConfig {
        ModelConfig {
            obs_dim,
            state_dim: 2,
            m: 2,
            bandwidth: 0,
            num_basis: 2,
            coeff_hidden: 0,
            encoder_hidden: vec![6],
            decoder_hidden: vec![5],
            image_hidden: vec![4],
            head,
        }
    }

    fn lowdim(task: TaskKind, steps: usize, seed: u64) -> Trajectory {
        make_trajectory(task, ObservationKind::LowDim, steps, seed, &PendulumParams::default())
    }

    fn grad_check(model: &RknModel, traj: &Trajectory, truncation: usize) -> f64 {
        let (_, grad) = loss_and_grad(model, traj, truncation).unwrap();
        reference_gradient_check(model, traj, &grad.to_flat(), 1e-6).max_rel_err
    }

    #[test]
    fn parameter_blocks_cover_cell_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = RknModel::new(ModelConfig::pendulum(2, LossHead::GaussianState), &mut rng).unwrap();
        let mut cell = 0;
        model.visit_blocks("", &mut |name, b| {
            if name.starts_with("transition.") {
                cell += b.len();
            }
        });
        assert_eq!(cell, crate::transition::parameter_count(15, 3, 15, 0));
    }

    #[test]
    fn single_step_pulls_toward_observation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = RknModel::new(tiny_config(2, LossHead::GaussianState), &mut rng).unwrap();
        let traj = lowdim(TaskKind::FilterNoisy, 1, 4);
        let trace = forward_sequence(&model, &traj).unwrap();
        let st = &trace.steps[0];
        let obs = st.observation.as_ref().unwrap();
        // prior upper variance is 10 + 0.2^2 * 10 + noise
        for i in 0..2 {
            let u = st.prior.var_upper[i];
            let q = u / (u + obs.var_obs[i]);
            let expect = st.prior.mean[i] + q * (obs.w[i] - st.prior.mean[i]);
            assert!((st.posterior.mean[i] - expect).abs() < 1e-14);
            assert!((u - (10.0 + 0.4 + 0.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn all_absent_skips_encoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = RknModel::new(tiny_config(2, LossHead::GaussianState), &mut rng).unwrap();
        let mut traj = lowdim(TaskKind::Impute50, 6, 3);
        traj.mask.iter_mut().for_each(|m| *m = false);
        let trace = forward_sequence(&model, &traj).unwrap();
        assert!(trace.steps.iter().all(|s| s.encoder.is_none() && s.posterior == s.prior));
        let (_, grad) = loss_and_grad(&model, &traj, 6).unwrap();
        let mut enc = Vec::new();
        grad.visit_blocks("", &mut |name, b| {
            if name.starts_with("encoder") {
                enc.extend_from_slice(b);
            }
        });
        assert!(enc.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn decoded_variance_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = RknModel::new(tiny_config(2, LossHead::GaussianState), &mut rng).unwrap();
        let trace = forward_sequence(&model, &lowdim(TaskKind::FilterNoisy, 30, 5)).unwrap();
        assert!(trace.vars().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gaussian_gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = RknModel::new(tiny_config(2, LossHead::GaussianState), &mut rng).unwrap();
            let traj = lowdim(TaskKind::Impute50, 5, seed + 10);
            let err = grad_check(&model, &traj, 5);
            assert!(err < 1e-5, "seed {seed}: {err}");
        }
    }

    #[test]
    fn bernoulli_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = RknModel::new(tiny_config(2, LossHead::BernoulliImage), &mut rng).unwrap();
        // low-dimensional rows squashed into [0, 1] serve as tiny "images"
        let mut traj = lowdim(TaskKind::Impute50, 4, 1);
        traj.observations.iter_mut().for_each(|v| *v = 0.5 + 0.4 * v.clamp(-1.0, 1.0));
        let err = grad_check(&model, &traj, 4);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn truncation_of_full_length_is_exact_bptt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = RknModel::new(tiny_config(2, LossHead::GaussianState), &mut rng).unwrap();
        let traj = lowdim(TaskKind::FilterNoisy, 8, 2);
        let (_, full) = loss_and_grad(&model, &traj, 8).unwrap();
        let (_, big) = loss_and_grad(&model, &traj, 1000).unwrap();
        let (_, cut) = loss_and_grad(&model, &traj, 3).unwrap();
        assert_eq!(full.to_flat(), big.to_flat());
        assert_ne!(full.to_flat(), cut.to_flat());
    }

    #[test]
    fn truncated_gradient_matches_detached_reference() {
        // cutting at every step leaves only the decoder and same-step cell paths,
        // so decoder gradients agree with the full gradient while the rest differ
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = RknModel::new(tiny_config(2, LossHead::GaussianState), &mut rng).unwrap();
        let traj = lowdim(TaskKind::FilterNoisy, 6, 8);
        let (_, full) = loss_and_grad(&model, &traj, 6).unwrap();
        let (_, cut) = loss_and_grad(&model, &traj, 1).unwrap();
        assert_eq!(full.decoder_mean, cut.decoder_mean);
        assert_eq!(full.decoder_var, cut.decoder_var);
        assert_ne!(full.encoder_trunk, cut.encoder_trunk);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = RknModel::new(tiny_config(3, LossHead::GaussianState), &mut rng).unwrap();
        let traj = lowdim(TaskKind::FilterNoisy, 4, 1);
        assert!(matches!(forward_sequence(&model, &traj), Err(Error::ShapeMismatch { .. })));
    }
}
