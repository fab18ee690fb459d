//! Training configuration, the seeded validation split, and the epoch loop
//! (shuffled batches, truncated BPTT, clipping, Adam).

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, sequence_stats, EvalReport, SequenceStats};
use crate::model::{backward_sequence, forward_sequence, loss_and_grad, sequence_loss, LossHead, ModelConfig, RknModel};
use crate::nn::{clip_gradients, AdamConfig, AdamState, GradCheckReport};
use crate::params::Parameterized;
use crate::pendulum::{derive_seed, Trajectory};
use crate::reference::{gate_window, reference_gradient_check};

const STREAM_SPLIT: u64 = 0x5b17;
const STREAM_SHUFFLE: u64 = 0x5f1e;
const STREAM_INIT: u64 = 0x1417;
const STREAM_GATE: u64 = 0x6a7e;

/// Frames in the gradient-gate window.
pub const GATE_STEPS: usize = 5;
pub const GATE_TOLERANCE: f64 = 1e-5;
/// Central-difference step. The reference loss is double-double, so roundoff
/// stays negligible at this size while the h^2 truncation term, which can
/// reach 1e-4 relative at 1e-6 when an initial variance sits near its floor,
/// drops below 1e-7.
pub const GATE_STEP_SIZE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(Precision::F64),
            "f32" => Some(Precision::F32),
            _ => None,
        }
    }
}

/// Every hyperparameter of a run. Serialized as flat `key=value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub m: usize,
    pub bandwidth: usize,
    pub num_basis: usize,
    pub coeff_hidden: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub image_hidden: Vec<usize>,
    pub head: LossHead,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Required sequence length; `None` accepts whatever the data has.
    pub seq_len: Option<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    /// BPTT truncation length; `None` means full sequences.
    pub truncation: Option<usize>,
    pub seed: u64,
    pub val_fraction: f64,
    pub precision: Precision,
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let arch = ModelConfig::pendulum(1, LossHead::GaussianState);
        Self {
            m: arch.m,
            bandwidth: arch.bandwidth,
            num_basis: arch.num_basis,
            coeff_hidden: arch.coeff_hidden,
            encoder_hidden: arch.encoder_hidden,
            decoder_hidden: arch.decoder_hidden,
            image_hidden: arch.image_hidden,
            head: arch.head,
            adam: AdamConfig::default(),
            clip_norm: 5.0,
            seq_len: None,
            batch_size: 32,
            epochs: 50,
            truncation: None,
            seed: 0,
            val_fraction: 0.1,
            precision: Precision::F64,
            train_data: None,
            test_data: None,
        }
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: '{value}' is not a list of sizes")))
        })
        .collect()
}

fn join_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value.trim() {
        "" | "auto" | "full" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

impl TrainConfig {
    /// Recognized keys, in the order [`TrainConfig::to_kv`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "m",
        "b",
        "K",
        "coeff_hidden",
        "encoder_hidden",
        "decoder_hidden",
        "image_hidden",
        "head",
        "lr",
        "beta1",
        "beta2",
        "eps",
        "clip",
        "seq_len",
        "batch_size",
        "epochs",
        "truncation",
        "seed",
        "val_fraction",
        "precision",
        "train_data",
        "test_data",
    ];

    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "m" => self.m = parse_num(key, value)?,
            "b" => self.bandwidth = parse_num(key, value)?,
            "K" => self.num_basis = parse_num(key, value)?,
            "coeff_hidden" => self.coeff_hidden = parse_num(key, value)?,
            "encoder_hidden" => self.encoder_hidden = parse_list(key, value)?,
            "decoder_hidden" => self.decoder_hidden = parse_list(key, value)?,
            "image_hidden" => self.image_hidden = parse_list(key, value)?,
            "head" => {
                self.head = LossHead::parse(value).ok_or_else(|| Error::Config(format!("unknown head '{value}'")))?
            }
            "lr" => self.adam.lr = parse_num(key, value)?,
            "beta1" => self.adam.beta1 = parse_num(key, value)?,
            "beta2" => self.adam.beta2 = parse_num(key, value)?,
            "eps" => self.adam.eps = parse_num(key, value)?,
            "clip" => self.clip_norm = parse_num(key, value)?,
            "seq_len" => self.seq_len = parse_optional(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "truncation" => self.truncation = parse_optional(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            "precision" => {
                self.precision =
                    Precision::parse(value).ok_or_else(|| Error::Config(format!("unknown precision '{value}'")))?
            }
            "train_data" => self.train_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "test_data" => self.test_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("auto".to_string(), |x| x.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let values = [
            self.m.to_string(),
            self.bandwidth.to_string(),
            self.num_basis.to_string(),
            self.coeff_hidden.to_string(),
            join_list(&self.encoder_hidden),
            join_list(&self.decoder_hidden),
            join_list(&self.image_hidden),
            self.head.name().to_string(),
            self.adam.lr.to_string(),
            self.adam.beta1.to_string(),
            self.adam.beta2.to_string(),
            self.adam.eps.to_string(),
            self.clip_norm.to_string(),
            opt(self.seq_len),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            opt(self.truncation),
            self.seed.to_string(),
            self.val_fraction.to_string(),
            self.precision.name().to_string(),
            path(&self.train_data),
            path(&self.test_data),
        ];
        let mut s = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.precision != Precision::F64 {
            return Err(Error::Config("only f64 precision is supported".into()));
        }
        let positive = [
            ("m", self.m),
            ("K", self.num_basis),
            ("batch_size", self.batch_size),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if self.seq_len == Some(0) || self.truncation == Some(0) {
            return Err(Error::Config("seq_len and truncation must be positive".into()));
        }
        if let (Some(t), Some(k)) = (self.seq_len, self.truncation) {
            if k > t {
                return Err(Error::Config(format!("truncation {k} exceeds sequence length {t}")));
            }
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config("lr must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return Err(Error::Config("Adam constants out of range".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, obs_dim: usize, state_dim: usize) -> ModelConfig {
        ModelConfig {
            obs_dim,
            state_dim,
            m: self.m,
            bandwidth: self.bandwidth,
            num_basis: self.num_basis,
            coeff_hidden: self.coeff_hidden,
            encoder_hidden: self.encoder_hidden.clone(),
            decoder_hidden: self.decoder_hidden.clone(),
            image_hidden: self.image_hidden.clone(),
            head: self.head,
        }
    }

    /// Freshly initialized model for data of the given widths.
    pub fn init_model(&self, obs_dim: usize, state_dim: usize) -> Result<RknModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_INIT, 0));
        RknModel::new(self.model_config(obs_dim, state_dim), &mut rng)
    }

    /// Same architecture with `m = 2, b = 0, K = 2`, initialized from its own seed stream.
    pub fn gate_model(&self, obs_dim: usize, state_dim: usize) -> Result<RknModel> {
        let mut cfg = self.model_config(obs_dim, state_dim);
        cfg.m = 2;
        cfg.bandwidth = 0;
        cfg.num_basis = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, STREAM_GATE, 0));
        RknModel::new(cfg, &mut rng)
    }
}

/// Training and validation indices: a seeded permutation with the first
/// `round(n * val_fraction)` entries held out (at least one when the fraction
/// is positive and `n > 1`, never all). Both lists are returned sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SPLIT, 0)));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n > 1 {
        n_val = n_val.max(1);
    }
    n_val = n_val.min(n.saturating_sub(1));
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Splits `dataset` the way [`train`] does.
pub fn split_dataset(dataset: &[Trajectory], val_fraction: f64, seed: u64) -> (Vec<Trajectory>, Vec<Trajectory>) {
    let (t, v) = split_indices(dataset.len(), val_fraction, seed);
    let pick = |ix: &[usize]| ix.iter().map(|&i| dataset[i].clone()).collect();
    (pick(&t), pick(&v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub rmse: f64,
    pub cal_mean: f64,
    pub cal_std: f64,
}

impl MetricsRow {
    pub fn from_report(epoch: usize, split: Split, r: &EvalReport) -> Self {
        Self {
            epoch,
            split,
            loss: r.loss(),
            rmse: r.rmse.mean,
            cal_mean: r.calibration.mean,
            cal_std: r.calibration.std,
        }
    }
}

pub const METRICS_HEADER: &str = "epoch,split,loss,rmse,cal_mean,cal_std";

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else {
        format!("{x:?}")
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.split.name(),
            fmt_f64(r.loss),
            fmt_f64(r.rmse),
            fmt_f64(r.cal_mean),
            fmt_f64(r.cal_std)
        );
    }
    s
}

/// Result of [`train`]. When training diverged, `model` is the last model
/// whose epoch finished with finite metrics and `divergence` says why.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: RknModel,
    pub metrics: Vec<MetricsRow>,
    pub epochs_completed: usize,
    pub divergence: Option<Error>,
}

fn sequence_with_grad(model: &RknModel, traj: &Trajectory, truncation: usize) -> Result<(SequenceStats, Vec<f64>)> {
    let trace = forward_sequence(model, traj)?;
    let loss = sequence_loss(model, traj, &trace)?;
    if !loss.loss.is_finite() {
        return Err(Error::NonFinite {
            what: "sequence loss".into(),
            time: None,
        });
    }
    let mut grad = model.zeros_like();
    backward_sequence(model, &trace, &loss, truncation, &mut grad)?;
    Ok((sequence_stats(model, traj, &trace, &loss), grad.to_flat()))
}

/// Trains `model` in place of a copy and returns it with the metrics log.
///
/// Rows for epoch 0 describe the initial model. For later epochs the train
/// row aggregates the statistics each sequence produced during the epoch's
/// forward passes; the validation row evaluates the model at the end of the
/// epoch. All randomness derives from `config.seed`.
pub fn train(model: &RknModel, config: &TrainConfig, dataset: &[Trajectory]) -> Result<TrainOutcome> {
    train_with_progress(model, config, dataset, |_| {})
}

/// [`train`], calling `progress` with each epoch's rows as soon as they exist.
pub fn train_with_progress(
    model: &RknModel,
    config: &TrainConfig,
    dataset: &[Trajectory],
    mut progress: impl FnMut(&[MetricsRow]),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    for traj in dataset {
        traj.validate()?;
        if let Some(t) = config.seq_len {
            if traj.len() != t {
                return Err(Error::ShapeMismatch {
                    context: "sequence length",
                    expected: t,
                    got: traj.len(),
                });
            }
        }
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, config.seed);
    let train_set: Vec<&Trajectory> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<Trajectory> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let train_owned: Vec<Trajectory> = train_set.iter().map(|t| (*t).clone()).collect();

    let mut model = model.clone();
    let mut metrics = Vec::new();
    let evaluate_rows = |model: &RknModel, epoch: usize, train_report: Option<EvalReport>| -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        let tr = match train_report {
            Some(r) => r,
            None => evaluate(model, &train_owned)?,
        };
        rows.push(MetricsRow::from_report(epoch, Split::Train, &tr));
        if !val_set.is_empty() {
            rows.push(MetricsRow::from_report(epoch, Split::Validation, &evaluate(model, &val_set)?));
        }
        Ok(rows)
    };
    metrics.extend(evaluate_rows(&model, 0, None)?);
    progress(&metrics);

    let mut adam = AdamState::new(config.adam, model.num_params());
    let mut params = model.to_flat();
    let mut last_good = model.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stats: Vec<Option<SequenceStats>> = vec![None; train_set.len()];

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_SHUFFLE, epoch as u64)));
        let mut failure = None;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(SequenceStats, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let traj = train_set[i];
                    let trunc = config.truncation.unwrap_or(traj.len());
                    sequence_with_grad(&model, traj, trunc)
                })
                .collect();
            let mut grad = vec![0.0; params.len()];
            for (&i, r) in batch.iter().zip(results) {
                match r {
                    Ok((s, g)) => {
                        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                        stats[i] = Some(s);
                    }
                    Err(e) if e.is_numeric() => {
                        failure = Some(e);
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if failure.is_some() {
                break;
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            clip_gradients(&mut grad, config.clip_norm);
            if let Err(e) = adam.step_flat(&mut params, &grad) {
                failure = Some(e);
                break;
            }
            model.set_flat(&params);
        }
        let rows = match failure {
            None => {
                let per_seq: Vec<SequenceStats> = stats.iter().map(|s| s.clone().expect("every sequence visited")).collect();
                evaluate_rows(&model, epoch, Some(aggregate(&per_seq)))
            }
            Some(e) => Err(e),
        };
        match rows {
            Ok(rows) if rows.iter().all(|r| r.loss.is_finite()) => {
                progress(&rows);
                metrics.extend(rows);
                last_good = model.clone();
            }
            Ok(rows) => {
                let bad = rows.iter().find(|r| !r.loss.is_finite()).unwrap();
                return Ok(diverged(last_good, metrics, epoch - 1, format!("{} loss at epoch {epoch}", bad.split.name())));
            }
            Err(e) if e.is_numeric() => {
                return Ok(TrainOutcome {
                    model: last_good,
                    metrics,
                    epochs_completed: epoch - 1,
                    divergence: Some(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        epochs_completed: config.epochs,
        divergence: None,
    })
}

fn diverged(model: RknModel, metrics: Vec<MetricsRow>, completed: usize, what: String) -> TrainOutcome {
    TrainOutcome {
        model,
        metrics,
        epochs_completed: completed,
        divergence: Some(Error::NonFinite { what, time: None }),
    }
}

/// Outcome of the pre-training gradient gate.
#[derive(Debug, Clone)]
pub struct GateReport {
    pub num_params: usize,
    pub window_start: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_param: String,
    pub passed: bool,
}

fn block_name_of(model: &RknModel, index: usize) -> String {
    let mut pos = 0;
    let mut found = String::new();
    model.visit_blocks("", &mut |name, b| {
        if found.is_empty() && index < pos + b.len() {
            found = format!("{name}[{}]", index - pos);
        }
        pos += b.len();
    });
    found
}

/// Finite-difference check of the full analytic gradient of the `m = 2,
/// b = 0, K = 2` variant of `config` on a short window of `traj`.
pub fn gradient_gate(config: &TrainConfig, traj: &Trajectory) -> Result<GateReport> {
    traj.validate()?;
    let model = config.gate_model(traj.obs_dim, traj.target_dim)?;
    let window = gate_window(traj, GATE_STEPS);
    let window_start = traj.mask.iter().position(|&p| p).unwrap_or(0);
    let (_, grad) = loss_and_grad(&model, &window, window.len())?;
    let report: GradCheckReport = reference_gradient_check(&model, &window, &grad.to_flat(), GATE_STEP_SIZE);
    Ok(GateReport {
        num_params: model.num_params(),
        window_start,
        max_rel_err: report.max_rel_err,
        max_abs_err: report.max_abs_err,
        worst_param: block_name_of(&model, report.worst_index),
        passed: report.max_rel_err < GATE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::{make_dataset, ObservationKind, TaskKind};

    fn small_config() -> TrainConfig {
        TrainConfig {
            m: 3,
            bandwidth: 1,
            num_basis: 2,
            batch_size: 4,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn lowdim(n: usize, t: usize) -> Vec<Trajectory> {
        make_dataset(TaskKind::FilterNoisy, ObservationKind::LowDim, n, t, 5, 0)
    }

    #[test]
    fn kv_round_trip() {
        let mut c = small_config();
        c.truncation = Some(7);
        c.train_data = Some("data/train.jsonl".into());
        c.adam.lr = 3e-4;
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(TrainConfig::from_kv(&TrainConfig::default().to_kv()).unwrap(), TrainConfig::default());
    }

    #[test]
    fn kv_rejects_garbage() {
        assert!(TrainConfig::from_kv("bogus=1").is_err());
        assert!(TrainConfig::from_kv("m").is_err());
        assert!(TrainConfig::from_kv("m=x").is_err());
        assert!(TrainConfig::from_kv("# comment\n\nm = 4\n").unwrap().m == 4);
    }

    #[test]
    fn validation_rules() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.precision = Precision::F32;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            seq_len: Some(10),
            truncation: Some(11),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(100, 0.1, 3);
        assert_eq!(v.len(), 10);
        assert_eq!(t.len(), 90);
        let mut all: Vec<usize> = t.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, 0.1, 3), (t, v.clone()));
        assert_ne!(split_indices(100, 0.1, 4).1, v);
        assert_eq!(split_indices(5, 0.1, 0).1.len(), 1);
        assert_eq!(split_indices(1, 0.1, 0).1.len(), 0);
    }

    #[test]
    fn one_epoch_lowers_training_loss() {
        let data = lowdim(40, 30);
        let mut c = small_config();
        c.epochs = 1;
        c.adam.lr = 1e-2;
        let model = c.init_model(2, 2).unwrap();
        let out = train(&model, &c, &data).unwrap();
        assert!(out.divergence.is_none());
        let (_, val) = split_indices(data.len(), c.val_fraction, c.seed);
        let train_set: Vec<Trajectory> = (0..data.len()).filter(|i| !val.contains(i)).map(|i| data[i].clone()).collect();
        let before = evaluate(&model, &train_set).unwrap().loss();
        let after = evaluate(&out.model, &train_set).unwrap().loss();
        assert!(after < before, "{after} vs {before}");
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let data = lowdim(12, 20);
        let c = small_config();
        let model = c.init_model(2, 2).unwrap();
        let a = train(&model, &c, &data).unwrap();
        let b = train(&model, &c, &data).unwrap();
        assert_eq!(metrics_csv(&a.metrics), metrics_csv(&b.metrics));
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_learning_rate_keeps_everything_flat() {
        let data = lowdim(12, 20);
        let mut c = small_config();
        c.adam.lr = 0.0;
        let model = c.init_model(2, 2).unwrap();
        let out = train(&model, &c, &data).unwrap();
        assert_eq!(out.model, model);
        let first: Vec<&MetricsRow> = out.metrics.iter().filter(|r| r.epoch == 0).collect();
        for r in &out.metrics {
            let base = first.iter().find(|f| f.split == r.split).unwrap();
            assert_eq!(r.loss.to_bits(), base.loss.to_bits());
            assert_eq!(r.rmse.to_bits(), base.rmse.to_bits());
        }
        assert_eq!(out.metrics.len(), 2 * (c.epochs + 1));
    }

    #[test]
    fn metrics_csv_shape() {
        let rows = vec![MetricsRow {
            epoch: 0,
            split: Split::Validation,
            loss: 1.5,
            rmse: 0.25,
            cal_mean: f64::NAN,
            cal_std: 1.0,
        }];
        let s = metrics_csv(&rows);
        assert_eq!(s, "epoch,split,loss,rmse,cal_mean,cal_std\n0,validation,1.5,0.25,nan,1.0\n");
    }

    #[test]
    fn huge_learning_rate_reports_divergence_and_keeps_a_finite_model() {
        let data = lowdim(12, 20);
        let mut c = small_config();
        c.adam.lr = 1e12;
        c.epochs = 4;
        let model = c.init_model(2, 2).unwrap();
        let out = train(&model, &c, &data).unwrap();
        assert!(out.divergence.as_ref().is_some_and(|e| e.is_numeric()), "{:?}", out.divergence);
        assert!(out.epochs_completed < c.epochs);
        assert!(out.model.to_flat().iter().all(|x| x.is_finite()));
        assert!(evaluate(&out.model, &data).is_ok());
        assert!(out.metrics.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn gate_passes_on_low_dim_data() {
        let data = lowdim(1, 20);
        let r = gradient_gate(&small_config(), &data[0]).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
