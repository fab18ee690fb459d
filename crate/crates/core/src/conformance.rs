//! Seeded property suites comparing the factorized cell with the dense
//! Kalman filter and checking its invariants and derivatives.
//!
//! Each property reports its worst absolute deviation so a failing run says
//! by how much, not only that it failed.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::belief::{BeliefGrad, BeliefState, LatentObservation};
use crate::cell::{
    normalize_latent, normalize_latent_backward, predict, predict_with, predict_with_backward, step, update,
    update_backward,
};
use crate::nn::{
    bernoulli_nll, finite_diff_check, gaussian_nll, Activation, DenseLayer, GradCheckReport,
};
use crate::oracle::{dense_from_rows, dense_predict, dense_update, embed, extract, min_eigenvalue};
use crate::params::Parameterized;
use crate::pendulum::{derive_seed, noise_factor_walk, FACTOR_STEP};
use crate::transition::{assemble_transition, assemble_transition_backward, BlockTransition, TransitionModel};

/// Signature of the observation update under test.
pub type UpdateFn = fn(&BeliefState, &LatentObservation) -> BeliefState;

/// Latent sizes swept by the exactness properties.
pub const SWEEP_M: [usize; 6] = [1, 2, 4, 8, 16, 32];
pub const SWEEP_K: [usize; 3] = [1, 4, 15];
pub const EXACT_TOL: f64 = 1e-10;
pub const PSD_SLACK: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-6;
pub const CHAIN_LEN: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    /// Worst deviation from the property's reference, in its own units.
    pub max_abs_err: f64,
    pub tolerance: f64,
}

impl PropertyResult {
    fn within(name: &'static str, cases: usize, max_abs_err: f64, tolerance: f64) -> Self {
        Self {
            name,
            passed: max_abs_err <= tolerance,
            cases,
            max_abs_err,
            tolerance,
        }
    }
}

/// Trial counts; [`Budget::full`] is the acceptance-sized run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub exact_trials: usize,
    pub chains: usize,
    pub grad_seeds: usize,
    pub factor_sequences: usize,
}

impl Budget {
    pub fn full() -> Self {
        Self {
            exact_trials: 200,
            chains: 10_000,
            grad_seeds: 10,
            factor_sequences: 10_000,
        }
    }

    pub fn quick() -> Self {
        Self {
            exact_trials: 20,
            chains: 200,
            grad_seeds: 3,
            factor_sequences: 500,
        }
    }
}

/// Random valid belief: variances in `[0.1, 3)`, correlation below 0.95.
pub fn random_belief<R: Rng + ?Sized>(m: usize, rng: &mut R) -> BeliefState {
    let var_upper: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
    let var_lower: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..3.0)).collect();
    let var_side = (0..m)
        .map(|i| rng.random_range(-0.95..0.95) * (var_upper[i] * var_lower[i]).sqrt())
        .collect();
    BeliefState {
        mean: (0..2 * m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        var_upper,
        var_lower,
        var_side,
    }
}

/// Observation with `w` in `[-2, 2)` and log-uniform variances in `[1e-3, 1e3)`.
pub fn random_observation<R: Rng + ?Sized>(m: usize, rng: &mut R) -> LatentObservation {
    let w = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
    let r = (0..m).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
    LatentObservation::new(w, r).expect("finite by construction")
}

/// Transition with `K` random banded bases, a random coefficient network and
/// random transition noise. Basis entries are the default initialization
/// plus uniform perturbations of size `jitter`.
pub fn random_transition_model<R: Rng + ?Sized>(m: usize, b: usize, k: usize, jitter: f64, rng: &mut R) -> TransitionModel {
    let mut model = TransitionModel::new(m, b, k, 0, rng).expect("valid sizes");
    for basis in &mut model.basis {
        for block in basis.blocks_mut() {
            block.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-jitter..jitter));
        }
    }
    model
        .trans_noise_raw
        .iter_mut()
        .for_each(|r| *r = rng.random_range(-4.0..0.5));
    model
}

fn random_block_transition<R: Rng + ?Sized>(m: usize, b: usize, rng: &mut R) -> BlockTransition {
    let mut a = BlockTransition::zeros(m, b);
    for block in a.blocks_mut() {
        block.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    a
}

fn bandwidths(m: usize) -> Vec<usize> {
    let mut v = vec![0, 1, 3, m - 1];
    v.retain(|&b| b <= m - 1);
    v.sort_unstable();
    v.dedup();
    v
}

fn belief_max_diff(a: &BeliefState, b: &BeliefState) -> f64 {
    let pairs = [
        (&a.mean, &b.mean),
        (&a.var_upper, &b.var_upper),
        (&a.var_lower, &b.var_lower),
        (&a.var_side, &b.var_side),
    ];
    pairs
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// `update` against the dense Kalman update of the embedded prior, for every
/// `m` in [`SWEEP_M`].
pub fn update_exactness(seed: u64, trials: usize, update_fn: UpdateFn) -> PropertyResult {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &m in &SWEEP_M {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1, m as u64));
        for _ in 0..trials {
            let prior = random_belief(m, &mut rng);
            let obs = random_observation(m, &mut rng);
            let got = update_fn(&prior, &obs);
            let err = match dense_update(&embed(&prior), &obs.w, &obs.var_obs).and_then(|g| extract(&g)) {
                Ok(want) => belief_max_diff(&got, &want),
                Err(_) => f64::INFINITY,
            };
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
            cases += 1;
        }
    }
    PropertyResult::within("update_exactness", cases, worst, EXACT_TOL)
}

/// `predict` against dense `A Σ Aᵀ + diag(σ_trans)` over the `m`, `b`, `K` sweep.
pub fn prediction_exactness(seed: u64, trials: usize) -> PropertyResult {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &m in &SWEEP_M {
        for b in bandwidths(m) {
            for &k in &SWEEP_K {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2, (m * 1000 + b * 100 + k) as u64));
                for _ in 0..trials {
                    let model = random_transition_model(m, b, k, 0.5, &mut rng);
                    let post = random_belief(m, &mut rng);
                    let err = (|| {
                        let got = predict(&post, &model).ok()?;
                        let a = dense_from_rows(&assemble_transition(&model, &post.mean).ok()?.matrix.to_dense());
                        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(model.trans_noise()));
                        let want = extract(&dense_predict(&embed(&post), &a, &q).ok()?).ok()?;
                        Some(belief_max_diff(&got, &want))
                    })()
                    .unwrap_or(f64::INFINITY);
                    worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
                    cases += 1;
                }
            }
        }
    }
    PropertyResult::within("prediction_exactness", cases, worst, EXACT_TOL)
}

/// Outcome of the predict/update chain fuzzer.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainReport {
    pub chains: usize,
    pub steps: usize,
    /// Most negative `u * l - s^2` seen (0 when never negative).
    pub worst_block_det: f64,
    pub min_variance: f64,
    pub absent_mismatches: usize,
}

/// Random predict/update chains of length [`CHAIN_LEN`] with roughly a third
/// of the observations absent.
pub fn fuzz_chains(seed: u64, chains: usize) -> ChainReport {
    let mut report = ChainReport {
        chains,
        steps: 0,
        worst_block_det: 0.0,
        min_variance: f64::INFINITY,
        absent_mismatches: 0,
    };
    for c in 0..chains {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3, c as u64));
        let m = rng.random_range(1..=16);
        let b = rng.random_range(0..m);
        let k = rng.random_range(1..=4);
        let model = random_transition_model(m, b, k, 0.1, &mut rng);
        let mut belief = random_belief(m, &mut rng);
        for _ in 0..CHAIN_LEN {
            let obs = if rng.random_bool(1.0 / 3.0) {
                LatentObservation::absent(m)
            } else {
                random_observation(m, &mut rng)
            };
            let Ok((prior, post)) = step(&belief, &model, &obs) else {
                report.min_variance = f64::NEG_INFINITY;
                break;
            };
            if !obs.present && post != prior {
                report.absent_mismatches += 1;
            }
            for s in [&prior, &post] {
                for i in 0..m {
                    let (u, l, x) = (s.var_upper[i], s.var_lower[i], s.var_side[i]);
                    report.min_variance = report.min_variance.min(u).min(l);
                    let det = u * l - x * x;
                    if !(det >= report.worst_block_det) {
                        report.worst_block_det = if det.is_nan() { f64::NEG_INFINITY } else { det };
                    }
                }
            }
            report.steps += 1;
            belief = post;
        }
    }
    report
}

/// Gain bounds: `q_u` in `(0, 1)` and strictly decreasing in the observation noise.
pub fn gain_bounds(seed: u64, trials: usize) -> PropertyResult {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 4, 0));
    let mut violations = 0usize;
    for _ in 0..trials {
        let prior = random_belief(1, &mut rng);
        let mut last = 1.0;
        for e in -3..=3 {
            let r = 10f64.powi(e) * rng.random_range(1.0..2.0);
            let obs = LatentObservation::new(vec![1.0], vec![r]).unwrap();
            let post = update(&prior, &obs);
            let q = 1.0 - post.var_upper[0] / prior.var_upper[0];
            if !(q > 0.0 && q < 1.0 && q < last) {
                violations += 1;
            }
            last = q;
        }
    }
    PropertyResult::within("gain_bounds", trials, violations as f64, 0.0)
}

/// `extract(embed(b)) == b` bitwise, plus symmetry and PSD of dense updates.
pub fn oracle_consistency(seed: u64, trials: usize) -> Vec<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, 0));
    let mut mismatches = 0usize;
    let (mut asym, mut neg_eig) = (0.0f64, 0.0f64);
    for _ in 0..trials {
        let m = rng.random_range(1..=8);
        let b = random_belief(m, &mut rng);
        if extract(&embed(&b)).map(|x| x != b).unwrap_or(true) {
            mismatches += 1;
        }
        let obs = random_observation(m, &mut rng);
        if let Ok(g) = dense_update(&embed(&b), &obs.w, &obs.var_obs) {
            asym = asym.max((&g.cov - g.cov.transpose()).abs().max());
            neg_eig = neg_eig.max(-min_eigenvalue(&g.cov));
        } else {
            neg_eig = f64::INFINITY;
        }
    }
    vec![
        PropertyResult::within("embed_extract_roundtrip", trials, mismatches as f64, 0.0),
        PropertyResult::within("dense_update_symmetric", trials, asym, 1e-12),
        PropertyResult::within("dense_update_psd", trials, neg_eig, PSD_SLACK),
    ]
}

fn flatten(b: &BeliefState) -> Vec<f64> {
    [&b.mean, &b.var_upper, &b.var_lower, &b.var_side]
        .into_iter()
        .flatten()
        .copied()
        .collect()
}

fn unflatten(p: &[f64], m: usize) -> BeliefState {
    BeliefState {
        mean: p[..2 * m].to_vec(),
        var_upper: p[2 * m..3 * m].to_vec(),
        var_lower: p[3 * m..4 * m].to_vec(),
        var_side: p[4 * m..5 * m].to_vec(),
    }
}

fn grad_flat(g: &BeliefGrad) -> Vec<f64> {
    [&g.mean, &g.var_upper, &g.var_lower, &g.var_side]
        .into_iter()
        .flatten()
        .copied()
        .collect()
}

fn random_grad<R: Rng + ?Sized>(m: usize, rng: &mut R) -> BeliefGrad {
    let mut g = BeliefGrad::zeros(m);
    for v in [&mut g.mean, &mut g.var_upper, &mut g.var_lower, &mut g.var_side] {
        v.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    g
}

fn probe(b: &BeliefState, g: &BeliefGrad) -> f64 {
    flatten(b).iter().zip(grad_flat(g)).map(|(a, b)| a * b).sum()
}

/// Worst relative error over several finite-difference reports.
struct GradAcc {
    rel: f64,
    abs: f64,
    cases: usize,
}

impl GradAcc {
    fn new() -> Self {
        Self {
            rel: 0.0,
            abs: 0.0,
            cases: 0,
        }
    }

    fn add(&mut self, r: &GradCheckReport) {
        self.rel = self.rel.max(if r.max_rel_err.is_nan() { f64::INFINITY } else { r.max_rel_err });
        self.abs = self.abs.max(r.max_abs_err);
        self.cases += r.numeric.len();
    }

    fn finish(self, name: &'static str) -> PropertyResult {
        PropertyResult {
            name,
            passed: self.rel < GRAD_TOL,
            cases: self.cases,
            max_abs_err: self.abs,
            tolerance: GRAD_TOL,
        }
    }
}

const H: f64 = 1e-6;
/// The assembled transition sums many O(1) terms, so rounding at `H` swamps
/// the smaller coefficient-network derivatives; a wider step is still far
/// inside the region where the softmax is well approximated.
const H_SMOOTH: f64 = 1e-4;

/// Analytic backward passes of the cell operations against central differences.
pub fn cell_gradients(seed: u64, seeds: usize) -> Vec<PropertyResult> {
    let (mut pred, mut upd, mut norm, mut asm) = (GradAcc::new(), GradAcc::new(), GradAcc::new(), GradAcc::new());
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6, s));
        let m = 5;
        let b = 1 + (s as usize % 3);

        let post = random_belief(m, &mut rng);
        let a = random_block_transition(m, b, &mut rng);
        let noise: Vec<f64> = (0..2 * m).map(|_| rng.random_range(0.01..0.5)).collect();
        let g = random_grad(m, &mut rng);
        let (d_post, d_a, d_noise) = predict_with_backward(&post, &a, &g);
        pred.add(&finite_diff_check(
            |p| probe(&predict_with(&unflatten(p, m), &a, &noise), &g),
            &flatten(&post),
            &grad_flat(&d_post),
            H,
        ));
        let a_flat: Vec<f64> = a.blocks().iter().flat_map(|x| x.data().to_vec()).collect();
        let da_flat: Vec<f64> = d_a.blocks().iter().flat_map(|x| x.data().to_vec()).collect();
        pred.add(&finite_diff_check(
            |p| probe(&predict_with(&post, &with_entries(&a, p), &noise), &g),
            &a_flat,
            &da_flat,
            H,
        ));
        pred.add(&finite_diff_check(|p| probe(&predict_with(&post, &a, p), &g), &noise, &d_noise, H));

        let prior = random_belief(m, &mut rng);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let r: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..3.0)).collect();
        let obs = LatentObservation::new(w.clone(), r.clone()).unwrap();
        let (d_prior, d_w, d_r) = update_backward(&prior, &obs, &g);
        upd.add(&finite_diff_check(
            |p| probe(&update(&unflatten(p, m), &obs), &g),
            &flatten(&prior),
            &grad_flat(&d_prior),
            H,
        ));
        upd.add(&finite_diff_check(
            |p| probe(&update(&prior, &LatentObservation::new(p.to_vec(), r.clone()).unwrap()), &g),
            &w,
            &d_w,
            H,
        ));
        upd.add(&finite_diff_check(
            |p| probe(&update(&prior, &LatentObservation::new(w.clone(), p.to_vec()).unwrap()), &g),
            &r,
            &d_r,
            H,
        ));

        let x: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let gy: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        norm.add(&finite_diff_check(
            |p| normalize_latent(p).iter().zip(&gy).map(|(a, b)| a * b).sum(),
            &x,
            &normalize_latent_backward(&x, &gy),
            H,
        ));

        let model = random_transition_model(m, b, 3, 0.3, &mut rng);
        let mean: Vec<f64> = (0..2 * m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let d_matrix = random_block_transition(m, b, &mut rng);
        let assembled = assemble_transition(&model, &mean).unwrap();
        let mut grad = model.zeros_like();
        let d_mean = assemble_transition_backward(&model, &assembled, &d_matrix, &mut grad);
        let score = |mdl: &TransitionModel, z: &[f64]| assemble_transition(mdl, z).unwrap().matrix.inner(&d_matrix);
        asm.add(&finite_diff_check(|p| score(&model, p), &mean, &d_mean, H_SMOOTH));
        asm.add(&finite_diff_check(
            |p| {
                let mut m2 = model.clone();
                m2.set_flat(p);
                score(&m2, &mean)
            },
            &model.to_flat(),
            &grad.to_flat(),
            H_SMOOTH,
        ));
    }
    vec![
        pred.finish("gradient_predict"),
        upd.finish("gradient_update"),
        norm.finish("gradient_normalize"),
        asm.finish("gradient_assemble"),
    ]
}

fn with_entries(a: &BlockTransition, p: &[f64]) -> BlockTransition {
    let mut a2 = a.clone();
    let mut pos = 0;
    for block in a2.blocks_mut() {
        let n = block.data().len();
        block.data_mut().copy_from_slice(&p[pos..pos + n]);
        pos += n;
    }
    a2
}

/// Dense layers of every activation and both losses against central differences.
pub fn nn_gradients(seed: u64, seeds: usize) -> Vec<PropertyResult> {
    let (mut layers, mut losses) = (GradAcc::new(), GradAcc::new());
    let acts = [
        Activation::Linear,
        Activation::Relu,
        Activation::Sigmoid,
        Activation::EluPlusOne,
        Activation::Softmax,
    ];
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7, s));
        for &act in &acts {
            let layer = DenseLayer::glorot(4, 3, act, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dy: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (dp, dx) = layer.backward(&x, &dy).unwrap();
            let score = |l: &DenseLayer, x: &[f64]| l.forward(x).unwrap().iter().zip(&dy).map(|(a, b)| a * b).sum::<f64>();
            layers.add(&finite_diff_check(|p| score(&layer, p), &x, &dx, H));
            layers.add(&finite_diff_check(
                |p| {
                    let mut l2 = layer.clone();
                    l2.set_flat(p);
                    score(&l2, &x)
                },
                &layer.to_flat(),
                &dp.to_flat(),
                H,
            ));
        }
        let (t, d) = (4, 2);
        let targets: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let means: Vec<f64> = (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vars: Vec<f64> = (0..t * d).map(|_| rng.random_range(0.2..2.0)).collect();
        let g = gaussian_nll(&targets, &means, &vars, d).unwrap();
        losses.add(&finite_diff_check(|p| gaussian_nll(&targets, p, &vars, d).unwrap().loss, &means, &g.d_means, H));
        losses.add(&finite_diff_check(|p| gaussian_nll(&targets, &means, p, d).unwrap().loss, &vars, &g.d_vars, H));
        let o: Vec<f64> = (0..t * d).map(|_| rng.random_range(0.0..1.0)).collect();
        let probs: Vec<f64> = (0..t * d).map(|_| rng.random_range(0.05..0.95)).collect();
        let bl = bernoulli_nll(&o, &probs, d).unwrap();
        losses.add(&finite_diff_check(|p| bernoulli_nll(&o, p, d).unwrap().loss, &probs, &bl.d_probs, H));
    }
    vec![layers.finish("gradient_dense_layers"), losses.finish("gradient_losses")]
}

/// The belief type stores exactly `3m` covariance scalars.
pub fn storage_3m() -> PropertyResult {
    let worst = SWEEP_M
        .iter()
        .map(|&m| {
            let b = crate::belief::initial_belief(m).unwrap();
            (b.covariance_len() as f64 - 3.0 * m as f64).abs()
        })
        .fold(0.0, f64::max);
    PropertyResult::within("storage_3m", SWEEP_M.len(), worst, 0.0)
}

/// Monte-Carlo statistics of the noise-factor process over sequences of length 150.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorReport {
    pub sequences: usize,
    pub max_raw_step: f64,
    pub min_value: f64,
    pub max_value: f64,
    pub zero_fraction: f64,
    pub one_fraction: f64,
    pub monotone_violations: usize,
}

impl FactorReport {
    pub fn passed(&self) -> bool {
        self.max_raw_step <= FACTOR_STEP
            && self.min_value >= 0.0
            && self.max_value <= 1.0
            && self.zero_fraction > 0.0
            && self.one_fraction > 0.0
            && self.monotone_violations == 0
    }
}

pub fn noise_factor_stats(seed: u64, sequences: usize) -> FactorReport {
    let mut r = FactorReport {
        sequences,
        max_raw_step: 0.0,
        min_value: f64::INFINITY,
        max_value: f64::NEG_INFINITY,
        zero_fraction: 0.0,
        one_fraction: 0.0,
        monotone_violations: 0,
    };
    let (mut zeros, mut ones, mut total) = (0usize, 0usize, 0usize);
    for s in 0..sequences {
        let nf = noise_factor_walk(150, &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 8, s as u64)));
        for w in nf.raw.windows(2) {
            r.max_raw_step = r.max_raw_step.max((w[1] - w[0]).abs());
        }
        for &f in nf.raw.iter().chain(&nf.factors) {
            r.min_value = r.min_value.min(f);
            r.max_value = r.max_value.max(f);
        }
        zeros += nf.factors.iter().filter(|&&f| f == 0.0).count();
        ones += nf.factors.iter().filter(|&&f| f == 1.0).count();
        total += nf.factors.len();
        let mut pairs: Vec<(f64, f64)> = nf.raw.iter().copied().zip(nf.factors.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        r.monotone_violations += pairs.windows(2).filter(|w| w[1].1 < w[0].1).count();
    }
    r.zero_fraction = zeros as f64 / total as f64;
    r.one_fraction = ones as f64 / total as f64;
    r
}

/// Runs every property. `update_fn` is normally [`crate::cell::update`].
pub fn run_all(seed: u64, budget: Budget, update_fn: UpdateFn) -> Vec<PropertyResult> {
    let mut out = vec![
        update_exactness(seed, budget.exact_trials, update_fn),
        prediction_exactness(seed, budget.exact_trials),
    ];
    let chains = fuzz_chains(seed, budget.chains);
    out.push(PropertyResult::within(
        "psd_preservation",
        chains.steps,
        (-chains.worst_block_det).max(0.0),
        PSD_SLACK,
    ));
    out.push(PropertyResult {
        name: "positive_variances",
        passed: chains.min_variance > 0.0,
        cases: chains.steps,
        max_abs_err: (-chains.min_variance).max(0.0),
        tolerance: 0.0,
    });
    out.push(PropertyResult::within(
        "absent_step_identity",
        chains.steps,
        chains.absent_mismatches as f64,
        0.0,
    ));
    out.push(gain_bounds(seed, budget.exact_trials));
    out.extend(oracle_consistency(seed, budget.exact_trials));
    out.extend(cell_gradients(seed, budget.grad_seeds));
    out.extend(nn_gradients(seed, budget.grad_seeds));
    out.push(storage_3m());
    let f = noise_factor_stats(seed, budget.factor_sequences);
    out.push(PropertyResult {
        name: "noise_factor_process",
        passed: f.passed(),
        cases: f.sequences,
        max_abs_err: (f.max_raw_step - FACTOR_STEP).max(0.0) + (-f.min_value).max(0.0) + (f.max_value - 1.0).max(0.0),
        tolerance: 0.0,
    });
    out
}

/// Deliberately broken update with the lower gain's sign flipped; a fixture
/// for checking that the suite catches a wrong cell.
pub fn update_with_flipped_lower_gain(prior: &BeliefState, obs: &LatentObservation) -> BeliefState {
    let m = prior.m();
    let mut post = update(prior, obs);
    for i in 0..m {
        post.mean[m + i] = 2.0 * prior.mean[m + i] - post.mean[m + i];
        post.var_lower[i] = 2.0 * prior.var_lower[i] - post.var_lower[i];
    }
    post
}
