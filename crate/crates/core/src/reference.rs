//! Independent, scalar-generic implementation of the sequence loss.
//!
//! Serves as the oracle for the hand-written reverse pass: covariances are
//! propagated as dense matrices (`A Σ Aᵀ` and a dense gain on the embedded
//! belief) rather than through the factorized formulas, the Bernoulli loss
//! is written in logit form, and the loss can be evaluated in double-double
//! precision so central differences stay accurate for gradients far below
//! the loss magnitude.

use crate::banded::{band_entries, BandedBlock};
use crate::belief::INITIAL_VARIANCE;
use crate::cell::NORMALIZE_EPS;
use crate::ddouble::{DdVec, DoubleDouble, Real, SplitVec};
use crate::model::{LossHead, ModelConfig, RknModel};
use crate::nn::{record, GradCheckReport, HALF_LN_2PI, PROB_CLAMP, VAR_FLOOR};
use crate::params::Parameterized;
use crate::pendulum::Trajectory;
use rayon::prelude::*;

#[derive(Clone, Copy, PartialEq)]
enum Act {
    Linear,
    Relu,
    Sigmoid,
    EluPlusOne,
    Softmax,
}

struct Layer<'a, R> {
    inputs: usize,
    weights: &'a [R],
    bias: &'a [R],
    act: Act,
}

struct Cursor<'a, R> {
    params: &'a [R],
    pos: usize,
}

impl<'a, R: Real> Cursor<'a, R> {
    fn take(&mut self, n: usize) -> &'a [R] {
        let s = &self.params[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn layer(&mut self, inputs: usize, outputs: usize, act: Act) -> Layer<'a, R> {
        Layer {
            inputs,
            weights: self.take(inputs * outputs),
            bias: self.take(outputs),
            act,
        }
    }

    fn stack(&mut self, sizes: &[usize], hidden: Act, output: Act) -> Vec<Layer<'a, R>> {
        let n = sizes.len() - 1;
        (0..n)
            .map(|l| self.layer(sizes[l], sizes[l + 1], if l + 1 == n { output } else { hidden }))
            .collect()
    }
}

fn activate<R: Real>(act: Act, v: &mut [R]) {
    let zero = R::zero();
    let one = R::one();
    match act {
        Act::Linear => {}
        Act::Relu => v.iter_mut().for_each(|x| {
            if *x <= zero {
                *x = zero
            }
        }),
        Act::Sigmoid => v.iter_mut().for_each(|x| *x = one / (one + (-*x).exp())),
        Act::EluPlusOne => v.iter_mut().for_each(|x| {
            *x = if *x >= zero { *x + one } else { x.exp() }
        }),
        Act::Softmax => {
            let mut max = v[0];
            for &x in v.iter() {
                if x > max {
                    max = x;
                }
            }
            let mut sum = zero;
            for x in v.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            v.iter_mut().for_each(|x| *x = *x / sum);
        }
    }
}

fn affine<R: Real>(layer: &Layer<'_, R>, x: &[R]) -> Vec<R> {
    let mut y: Vec<R> = layer.bias.to_vec();
    for (yo, row) in y.iter_mut().zip(layer.weights.chunks_exact(layer.inputs)) {
        for (w, xi) in row.iter().zip(x) {
            *yo += *w * *xi;
        }
    }
    y
}

fn run<R: Real>(layers: &[Layer<'_, R>], x: &[R]) -> Vec<R> {
    let mut cur = x.to_vec();
    for layer in layers {
        cur = affine(layer, &cur);
        activate(layer.act, &mut cur);
    }
    cur
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

type Dense<R> = Vec<Vec<R>>;

fn dense_block<R: Real>(m: usize, bandwidth: usize, stored: &[R]) -> Dense<R> {
    let layout = BandedBlock::zeros(m, bandwidth);
    (0..m)
        .map(|i| {
            (0..m)
                .map(|j| layout.index(i, j).map_or(R::zero(), |k| stored[k]))
                .collect()
        })
        .collect()
}

/// Keeps only the entries a factorized belief stores.
fn restrict<R: Real>(cov: &mut Dense<R>, m: usize) {
    for a in 0..2 * m {
        for b in 0..2 * m {
            if a != b && a.abs_diff(b) != m {
                cov[a][b] = R::zero();
            }
        }
    }
}

fn floored<R: Real>(v: R, floor: R) -> R {
    if v < floor {
        floor
    } else {
        v
    }
}

/// Logit at which the probability reaches `1 - PROB_CLAMP`.
fn clamp_logit<R: Real>() -> R {
    let lo = R::from_f64(PROB_CLAMP);
    ((R::one() - lo) / lo).ln()
}

/// Bernoulli negative log-likelihood of target `o` for the logit `z`, with
/// the probability clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`; `logit_hi`
/// is [`clamp_logit`].
fn pixel_loss<R: Real>(z: R, o: R, logit_hi: R) -> R {
    let one = R::one();
    let z = if z < -logit_hi {
        -logit_hi
    } else if z > logit_hi {
        logit_hi
    } else {
        z
    };
    // -o ln σ(z) - (1-o) ln(1-σ(z)) = softplus(z) - o z
    let abs = if z < R::zero() { -z } else { z };
    let relu = if z > R::zero() { z } else { R::zero() };
    relu + (one + (-abs).exp()).ln() - o * z
}

#[derive(Clone, PartialEq)]
struct Encoded<R> {
    w: Vec<R>,
    var: Vec<R>,
}

struct Posterior<R> {
    mean: Vec<R>,
    var_in: Vec<R>,
}

struct RefModel<'a, R> {
    config: &'a ModelConfig,
    trunk: Vec<Layer<'a, R>>,
    mean_head: Layer<'a, R>,
    var_head: Layer<'a, R>,
    basis: Vec<Dense<R>>,
    coeff: Vec<Layer<'a, R>>,
    noise: Vec<R>,
    dec_mean: Vec<Layer<'a, R>>,
    dec_var: Vec<Layer<'a, R>>,
    dec_image: Vec<Layer<'a, R>>,
}

impl<'a, R: Real> RefModel<'a, R> {
    /// Reads `params` in the block order of [`RknModel`].
    fn parse(config: &'a ModelConfig, params: &'a [R]) -> Self {
        let (m, n) = (config.m, 2 * config.m);
        let mut cur = Cursor { params, pos: 0 };
        let hidden = &config.encoder_hidden;
        let width = hidden[hidden.len() - 1];
        let trunk = cur.stack(&sizes(config.obs_dim, &hidden[..hidden.len() - 1], width), Act::Relu, Act::Relu);
        let mean_head = cur.layer(width, m, Act::Linear);
        let var_head = cur.layer(width, m, Act::EluPlusOne);

        let band = band_entries(m, config.bandwidth);
        let basis = (0..config.num_basis)
            .map(|_| {
                let blocks: Vec<Dense<R>> = (0..4)
                    .map(|_| dense_block(m, config.bandwidth, cur.take(band)))
                    .collect();
                let mut a = vec![vec![R::zero(); n]; n];
                for i in 0..m {
                    for j in 0..m {
                        a[i][j] = blocks[0][i][j];
                        a[i][m + j] = blocks[1][i][j];
                        a[m + i][j] = blocks[2][i][j];
                        a[m + i][m + j] = blocks[3][i][j];
                    }
                }
                a
            })
            .collect();
        let coeff_sizes = if config.coeff_hidden == 0 {
            vec![n, config.num_basis]
        } else {
            vec![n, config.coeff_hidden, config.num_basis]
        };
        let coeff = cur.stack(&coeff_sizes, Act::Relu, Act::Softmax);
        let mut noise = cur.take(n).to_vec();
        activate(Act::EluPlusOne, &mut noise);

        let dec_mean = cur.stack(&sizes(n, &config.decoder_hidden, config.state_dim), Act::Relu, Act::Linear);
        let dec_var = cur.stack(&sizes(3 * m, &config.decoder_hidden, config.state_dim), Act::Relu, Act::EluPlusOne);
        let dec_image = if config.head == LossHead::BernoulliImage {
            cur.stack(&sizes(n, &config.image_hidden, config.obs_dim), Act::Relu, Act::Sigmoid)
        } else {
            Vec::new()
        };
        assert_eq!(cur.pos, params.len(), "parameter vector does not match the architecture");
        Self {
            config,
            trunk,
            mean_head,
            var_head,
            basis,
            coeff,
            noise,
            dec_mean,
            dec_var,
            dec_image,
        }
    }

    /// Pre-activation of the first trunk layer.
    fn first_pre(&self, obs: &[R]) -> Vec<R> {
        affine(&self.trunk[0], obs)
    }

    fn encode_from_pre(&self, pre: &[R]) -> Encoded<R> {
        let mut h = pre.to_vec();
        activate(self.trunk[0].act, &mut h);
        let h = run(&self.trunk[1..], &h);
        let w_raw = run(std::slice::from_ref(&self.mean_head), &h);
        let floor = R::from_f64(VAR_FLOOR);
        let var = run(std::slice::from_ref(&self.var_head), &h)
            .into_iter()
            .map(|v| floored(v, floor))
            .collect();
        let mf = R::from_f64(w_raw.len() as f64);
        let mu = w_raw.iter().fold(R::zero(), |acc, &x| acc + x) / mf;
        let sq = w_raw.iter().fold(R::zero(), |acc, &x| acc + (x - mu) * (x - mu)) / mf;
        let inv = R::one() / (sq + R::from_f64(NORMALIZE_EPS)).sqrt();
        Encoded {
            w: w_raw.iter().map(|&x| (x - mu) * inv).collect(),
            var,
        }
    }

    fn filter(&self, enc: &[Option<Encoded<R>>]) -> Vec<Posterior<R>> {
        let (m, n) = (self.config.m, 2 * self.config.m);
        let zero = R::zero();
        let floor = R::from_f64(VAR_FLOOR);
        let mut mean = vec![zero; n];
        let mut cov = vec![vec![zero; n]; n];
        (0..n).for_each(|i| cov[i][i] = R::from_f64(INITIAL_VARIANCE));
        let mut out = Vec::with_capacity(enc.len());
        for obs in enc {
            let alpha = run(&self.coeff, &mean);
            let mut a = vec![vec![zero; n]; n];
            for (&ak, basis_k) in alpha.iter().zip(&self.basis) {
                for r in 0..n {
                    for c in 0..n {
                        a[r][c] += ak * basis_k[r][c];
                    }
                }
            }
            mean = (0..n)
                .map(|r| (0..n).fold(zero, |acc, c| acc + a[r][c] * mean[c]))
                .collect();
            let a_cov: Dense<R> = (0..n)
                .map(|r| (0..n).map(|c| (0..n).fold(zero, |acc, k| acc + a[r][k] * cov[k][c])).collect())
                .collect();
            cov = (0..n)
                .map(|r| (0..n).map(|c| (0..n).fold(zero, |acc, k| acc + a_cov[r][k] * a[c][k])).collect())
                .collect();
            (0..n).for_each(|i| cov[i][i] += self.noise[i]);
            restrict(&mut cov, m);

            if let Some(obs) = obs {
                // H Σ Hᵀ is diagonal for a factorized belief, so the gain is columnwise
                let mut gain = vec![vec![zero; m]; n];
                for i in 0..m {
                    let s = floored(cov[i][i] + obs.var[i], floor);
                    (0..n).for_each(|r| gain[r][i] = cov[r][i] / s);
                }
                let innov: Vec<R> = (0..m).map(|i| obs.w[i] - mean[i]).collect();
                for r in 0..n {
                    for i in 0..m {
                        mean[r] += gain[r][i] * innov[i];
                    }
                }
                let mut next = cov.clone();
                for r in 0..n {
                    for c in 0..n {
                        for i in 0..m {
                            next[r][c] = next[r][c] - gain[r][i] * cov[i][c];
                        }
                    }
                }
                cov = next;
                restrict(&mut cov, m);
            }

            let mut var_in = Vec::with_capacity(3 * m);
            var_in.extend((0..m).map(|i| cov[i][i]));
            var_in.extend((0..m).map(|i| cov[i][m + i]));
            var_in.extend((0..m).map(|i| cov[m + i][m + i]));
            out.push(Posterior {
                mean: mean.clone(),
                var_in,
            });
        }
        out
    }

    /// Input of the last image-decoder layer.
    fn image_features(&self, mean: &[R]) -> Vec<R> {
        run(&self.dec_image[..self.dec_image.len() - 1], mean)
    }

    fn image_logits(&self, features: &[R]) -> Vec<R> {
        affine(self.dec_image.last().unwrap(), features)
    }

    /// Unnormalized loss of frame `t`.
    fn frame_loss(&self, traj: &Trajectory, t: usize, post: &Posterior<R>) -> R {
        let mut loss = R::zero();
        match self.config.head {
            LossHead::GaussianState => {
                let floor = R::from_f64(VAR_FLOOR);
                let mu = run(&self.dec_mean, &post.mean);
                let var = run(&self.dec_var, &post.var_in);
                for (d, &s) in traj.target(t).iter().enumerate() {
                    let v = floored(var[d], floor);
                    let r = R::from_f64(s) - mu[d];
                    loss += R::from_f64(HALF_LN_2PI) + R::from_f64(0.5) * v.ln() + r * r / (R::from_f64(2.0) * v);
                }
            }
            LossHead::BernoulliImage => {
                let z = self.image_logits(&self.image_features(&post.mean));
                let logit_hi = clamp_logit();
                for (&o, &z) in traj.observation(t).iter().zip(&z) {
                    loss += pixel_loss(z, R::from_f64(o as f64), logit_hi);
                }
            }
        }
        loss
    }

    fn encode_all(&self, traj: &Trajectory) -> Vec<Option<Encoded<R>>> {
        (0..traj.len())
            .map(|t| {
                traj.mask[t].then(|| {
                    let obs: Vec<R> = traj.observation(t).iter().map(|&v| R::from_f64(v as f64)).collect();
                    self.encode_from_pre(&self.first_pre(&obs))
                })
            })
            .collect()
    }

    fn total(&self, traj: &Trajectory, enc: &[Option<Encoded<R>>]) -> R {
        self.filter(enc)
            .iter()
            .enumerate()
            .fold(R::zero(), |acc, (t, post)| acc + self.frame_loss(traj, t, post))
    }
}

/// Per-step loss of `traj` under the model whose flattened parameters are
/// `params` (block order of [`RknModel`]).
pub fn reference_loss<R: Real>(config: &ModelConfig, params: &[R], traj: &Trajectory) -> R {
    let model = RefModel::parse(config, params);
    let enc = model.encode_all(traj);
    model.total(traj, &enc) / R::from_f64(traj.len() as f64)
}

/// The `steps`-frame window used for end-to-end gradient checks: it starts
/// at the first visible frame (or at 0 if fewer than `steps` frames remain).
///
/// Leading absent frames feed the decoders the exact zero initial mean, and
/// with zero biases every hidden relu then sits on its kink, where central
/// differences measure the average of the one-sided slopes rather than the
/// subgradient.
pub fn gate_window(traj: &Trajectory, steps: usize) -> Trajectory {
    let first = traj.mask.iter().position(|&v| v).unwrap_or(0);
    let start = if first + steps <= traj.len() { first } else { 0 };
    traj.window(start, steps)
}

type DD = DoubleDouble;
type Span = std::ops::Range<usize>;

/// Flat index ranges of the blocks that get incremental treatment.
#[derive(Default)]
struct Ranges {
    trunk_w: Span,
    trunk_b: Span,
    image_w: Span,
    image_b: Span,
}

impl Ranges {
    fn of(model: &RknModel) -> Self {
        let last = model.config.image_hidden.len();
        let image_w = format!("decoder_image.layer{last}.weights");
        let image_b = format!("decoder_image.layer{last}.bias");
        let mut pos = 0;
        let mut out = Ranges::default();
        model.visit_blocks("", &mut |name, b| {
            let range = pos..pos + b.len();
            pos += b.len();
            match name {
                "encoder.trunk.layer0.weights" => out.trunk_w = range,
                "encoder.trunk.layer0.bias" => out.trunk_b = range,
                n if n == image_w => out.image_w = range,
                n if n == image_b => out.image_b = range,
                _ => {}
            }
        });
        out
    }
}

/// Double-double loss evaluations under single-parameter perturbations.
///
/// Perturbations of the first encoder layer restart from cached
/// pre-activations. With the Bernoulli head, a perturbed run is scored by
/// propagating the change of the image features to the logits and summing
/// exact per-pixel loss differences, which is both cheaper and more
/// accurate than subtracting two full losses. Every other parameter re-runs
/// the whole reference.
struct Perturber<'a> {
    config: &'a ModelConfig,
    traj: &'a Trajectory,
    base: &'a [DD],
    model: RefModel<'a, DD>,
    obs: Vec<Vec<DD>>,
    pre: Vec<Option<Vec<DD>>>,
    enc: Vec<Option<Encoded<DD>>>,
    features: Vec<Vec<DD>>,
    logits: Vec<Vec<DD>>,
    sigmoid: Vec<Vec<DD>>,
    /// Columns of the image decoder's output weights.
    columns: Vec<SplitVec>,
    logit_hi: DD,
    total: DD,
    ranges: Ranges,
}

impl<'a> Perturber<'a> {
    fn new(model_f64: &'a RknModel, base: &'a [DD], traj: &'a Trajectory) -> Self {
        let config = &model_f64.config;
        let model = RefModel::parse(config, base);
        let obs: Vec<Vec<DD>> = (0..traj.len())
            .map(|t| traj.observation(t).iter().map(|&v| DD::new(v as f64)).collect())
            .collect();
        let pre: Vec<Option<Vec<DD>>> = (0..traj.len())
            .map(|t| traj.mask[t].then(|| model.first_pre(&obs[t])))
            .collect();
        let enc: Vec<_> = pre.iter().map(|p| p.as_ref().map(|p| model.encode_from_pre(p))).collect();
        let (mut features, mut logits, mut sigmoid, mut columns) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        if config.head == LossHead::BernoulliImage {
            for post in model.filter(&enc) {
                let f = model.image_features(&post.mean);
                let z = model.image_logits(&f);
                let mut p = z.clone();
                activate(Act::Sigmoid, &mut p);
                features.push(f);
                logits.push(z);
                sigmoid.push(p);
            }
            let last = model.dec_image.last().unwrap();
            columns = (0..last.inputs)
                .map(|j| {
                    SplitVec::new(
                        last.weights
                            .chunks_exact(last.inputs)
                            .map(|row| row[j].to_f64())
                            .collect(),
                    )
                })
                .collect();
        }
        let total = model.total(traj, &enc);
        Self {
            config,
            traj,
            base,
            model,
            obs,
            pre,
            enc,
            features,
            logits,
            sigmoid,
            columns,
            logit_hi: clamp_logit(),
            total,
            ranges: Ranges::of(model_f64),
        }
    }

    fn scale(&self, sum: DD) -> DD {
        sum / DD::new(self.traj.len() as f64)
    }

    /// `ℓ(z + dz) - ℓ(z)` for pixel `o` of frame `t`.
    fn pixel_delta(&self, t: usize, o: usize, dz: DD) -> DD {
        let zero = DD::new(0.0);
        if dz == zero {
            return zero;
        }
        let z = self.logits[t][o];
        let margin = self.logit_hi - DD::new(1.0);
        if dz.abs() <= DD::new(1e-4) && z.abs() < margin && (z + dz).abs() < margin {
            // softplus(z + dz) - softplus(z) = ln(1 + σ(z) expm1(dz))
            return (self.sigmoid[t][o] * dz.expm1()).ln_1p() - self.obs[t][o] * dz;
        }
        pixel_loss(z + dz, self.obs[t][o], self.logit_hi) - pixel_loss(z, self.obs[t][o], self.logit_hi)
    }

    /// Change of the summed image loss when the posterior means become `posts`.
    fn image_delta(&self, posts: &[Posterior<DD>]) -> DD {
        let mut delta = DD::new(0.0);
        for (t, post) in posts.iter().enumerate() {
            let f = self.model.image_features(&post.mean);
            let mut dz = DdVec::zeros(self.config.obs_dim);
            for (j, (&new, &old)) in f.iter().zip(&self.features[t]).enumerate() {
                if new != old {
                    dz.axpy(new - old, &self.columns[j]);
                }
            }
            for o in 0..self.config.obs_dim {
                delta += self.pixel_delta(t, o, dz.get(o));
            }
        }
        delta
    }

    fn trunk_loss(&self, unit: usize, input: Option<usize>, delta: DD) -> DD {
        let mut enc = self.enc.clone();
        let mut changed = false;
        for (t, pre) in self.pre.iter().enumerate() {
            let Some(pre) = pre else { continue };
            let x = input.map_or(DD::new(1.0), |j| self.obs[t][j]);
            if x == DD::new(0.0) {
                continue;
            }
            let mut p = pre.clone();
            p[unit] += delta * x;
            let e = self.model.encode_from_pre(&p);
            if Some(&e) != self.enc[t].as_ref() {
                enc[t] = Some(e);
                changed = true;
            }
        }
        if !changed {
            return self.scale(self.total);
        }
        match self.config.head {
            LossHead::GaussianState => self.scale(self.model.total(self.traj, &enc)),
            LossHead::BernoulliImage => self.scale(self.total + self.image_delta(&self.model.filter(&enc))),
        }
    }

    fn pixel_output_loss(&self, pixel: usize, feature: Option<usize>, delta: DD) -> DD {
        let mut change = DD::new(0.0);
        for t in 0..self.traj.len() {
            let x = feature.map_or(DD::new(1.0), |j| self.features[t][j]);
            change += self.pixel_delta(t, pixel, delta * x);
        }
        self.scale(self.total + change)
    }

    /// Loss with parameter `i` shifted by `delta`; `probe` equals the base
    /// parameters on entry and on exit.
    fn loss(&self, i: usize, delta: DD, probe: &mut [DD]) -> DD {
        let r = &self.ranges;
        let inputs = self.config.obs_dim;
        if r.trunk_w.contains(&i) {
            let k = i - r.trunk_w.start;
            return self.trunk_loss(k / inputs, Some(k % inputs), delta);
        }
        if r.trunk_b.contains(&i) {
            return self.trunk_loss(i - r.trunk_b.start, None, delta);
        }
        if r.image_w.contains(&i) {
            let width = self.features[0].len();
            let k = i - r.image_w.start;
            return self.pixel_output_loss(k / width, Some(k % width), delta);
        }
        if r.image_b.contains(&i) {
            return self.pixel_output_loss(i - r.image_b.start, None, delta);
        }
        probe[i] = self.base[i] + delta;
        let loss = reference_loss(self.config, probe, self.traj);
        probe[i] = self.base[i];
        loss
    }
}

/// Compares `analytic` with central differences of [`reference_loss`]
/// evaluated in double-double precision.
pub fn reference_gradient_check(
    model: &RknModel,
    traj: &Trajectory,
    analytic: &[f64],
    h: f64,
) -> GradCheckReport {
    let base: Vec<DD> = model.to_flat().into_iter().map(DD::new).collect();
    assert_eq!(base.len(), analytic.len());
    let perturber = Perturber::new(model, &base, traj);
    let step = DD::new(h);
    let numeric: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map_init(
            || base.clone(),
            |probe, i| {
                let plus = perturber.loss(i, step, probe);
                let minus = perturber.loss(i, -step, probe);
                ((plus - minus) / DD::new(2.0 * h)).to_f64()
            },
        )
        .collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        numeric: Vec::with_capacity(base.len()),
    };
    for (i, (&a, num)) in analytic.iter().zip(numeric).enumerate() {
        record(&mut report, i, a, num);
    }
    report
}

/// Central difference of parameter `i` by full re-evaluation only.
#[cfg(test)]
fn naive_difference(model: &RknModel, traj: &Trajectory, i: usize, h: f64) -> f64 {
    let mut p: Vec<DD> = model.to_flat().into_iter().map(DD::new).collect();
    let base = p[i];
    p[i] = base + DD::new(h);
    let plus = reference_loss(&model.config, &p, traj);
    p[i] = base - DD::new(h);
    let minus = reference_loss(&model.config, &p, traj);
    ((plus - minus) / DD::new(2.0 * h)).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{loss_and_grad, loss_only};
    use crate::pendulum::{make_trajectory, ObservationKind, PendulumParams, TaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(obs_dim: usize, head: LossHead, m: usize, bandwidth: usize) -> ModelConfig {
        ModelConfig {
            obs_dim,
            state_dim: 2,
            m,
            bandwidth,
            num_basis: 3,
            coeff_hidden: 0,
            encoder_hidden: vec![7],
            decoder_hidden: vec![5],
            image_hidden: vec![6],
            head,
        }
    }

    #[test]
    fn f64_instance_matches_production_forward() {
        for (m, b) in [(1, 0), (3, 1), (6, 5)] {
            let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
            let model = RknModel::new(config(2, LossHead::GaussianState, m, b), &mut rng).unwrap();
            let traj = make_trajectory(TaskKind::Impute50, ObservationKind::LowDim, 12, 5, &PendulumParams::default());
            let prod = loss_only(&model, &traj).unwrap();
            let reference = reference_loss(&model.config, &model.to_flat(), &traj);
            assert!((prod - reference).abs() <= 1e-12 * prod.abs().max(1.0), "m={m}: {prod} vs {reference}");
        }
    }

    #[test]
    fn double_double_instance_agrees_with_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = RknModel::new(config(24 * 24, LossHead::BernoulliImage, 2, 0), &mut rng).unwrap();
        let traj = make_trajectory(TaskKind::Impute50, ObservationKind::Image, 3, 1, &PendulumParams::default());
        let flat = model.to_flat();
        let dd: Vec<DoubleDouble> = flat.iter().map(|&x| DoubleDouble::new(x)).collect();
        let a = reference_loss(&model.config, &flat, &traj);
        let b = reference_loss(&model.config, &dd, &traj).to_f64();
        assert!((a - b).abs() < 1e-11 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn tiny_model_gradients_gaussian() {
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = RknModel::new(config(2, LossHead::GaussianState, 2, 0), &mut rng).unwrap();
            let full = make_trajectory(TaskKind::Impute50, ObservationKind::LowDim, 40, seed + 20, &PendulumParams::default());
            let traj = gate_window(&full, 5);
            let (_, grad) = loss_and_grad(&model, &traj, 5).unwrap();
            let report = reference_gradient_check(&model, &traj, &grad.to_flat(), 1e-6);
            assert!(report.max_rel_err < 1e-5, "seed {seed}: {report:?}");
        }
    }

    #[test]
    fn tiny_model_gradients_bernoulli() {
        for seed in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = RknModel::new(config(24 * 24, LossHead::BernoulliImage, 2, 0), &mut rng).unwrap();
            let full = make_trajectory(TaskKind::Impute50, ObservationKind::Image, 40, seed, &PendulumParams::default());
            let traj = gate_window(&full, 4);
            let (_, grad) = loss_and_grad(&model, &traj, 4).unwrap();
            let report = reference_gradient_check(&model, &traj, &grad.to_flat(), 1e-6);
            assert!(report.max_rel_err < 1e-5, "seed {seed}: max {} at {}", report.max_rel_err, report.worst_index);
        }
    }

    #[test]
    fn leading_absent_frames_put_decoder_on_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = RknModel::new(config(2, LossHead::GaussianState, 2, 0), &mut rng).unwrap();
        let mut traj = make_trajectory(TaskKind::FilterNoisy, ObservationKind::LowDim, 5, 20, &PendulumParams::default());
        traj.mask[0] = false;
        let (_, grad) = loss_and_grad(&model, &traj, 5).unwrap();
        let report = reference_gradient_check(&model, &traj, &grad.to_flat(), 1e-6);
        assert!(report.max_rel_err > 0.1);
        let window = gate_window(&traj, 4);
        assert!(window.mask[0]);
        assert_eq!(window.observation(0), traj.observation(1));
    }

    #[test]
    fn incremental_differences_match_full_reevaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = RknModel::new(config(24 * 24, LossHead::BernoulliImage, 2, 0), &mut rng).unwrap();
        let full = make_trajectory(TaskKind::FilterNoisy, ObservationKind::Image, 3, 4, &PendulumParams::default());
        let (_, grad) = loss_and_grad(&model, &full, 3).unwrap();
        let report = reference_gradient_check(&model, &full, &grad.to_flat(), 1e-6);
        let r = Ranges::of(&model);
        let picks = [r.trunk_w.start + 300, r.trunk_w.end - 1, r.trunk_b.start + 2, r.image_w.start + 17, r.image_b.end - 1];
        for i in picks {
            let naive = naive_difference(&model, &full, i, 1e-6);
            let inc = report.numeric[i];
            assert!((naive - inc).abs() <= 1e-14 * naive.abs().max(1e-8), "{i}: {naive} vs {inc}");
        }
    }

    #[test]
    fn truncated_gradients_differ_from_reference() {
        // cutting the recurrent path must be visible to the oracle
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = RknModel::new(config(2, LossHead::GaussianState, 2, 0), &mut rng).unwrap();
        let traj = make_trajectory(TaskKind::FilterNoisy, ObservationKind::LowDim, 6, 2, &PendulumParams::default());
        let (_, grad) = loss_and_grad(&model, &traj, 2).unwrap();
        let report = reference_gradient_check(&model, &traj, &grad.to_flat(), 1e-6);
        assert!(report.max_rel_err > 1e-3);
    }
}
