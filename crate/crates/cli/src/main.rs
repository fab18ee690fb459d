//! `rkn`: dataset generation, training, evaluation and conformance checks.
//!
//! Exit codes: 0 success, 1 I/O or malformed input file, 2 usage,
//! 3 gradient gate or conformance failure, 4 numeric failure.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rkn_core::checkpoint::{check_compatible, load_checkpoint, save_checkpoint, TrainingMeta};
use rkn_core::conformance::{self, Budget, UpdateFn};
use rkn_core::eval::{copy_last_visible_log_likelihood, evaluate};
use rkn_core::pendulum::{make_dataset, read_jsonl, write_jsonl, ObservationKind, TaskKind, Trajectory};
use rkn_core::train::{
    fmt_f64, gradient_gate, metrics_csv, split_dataset, train_with_progress, MetricsRow, Precision, Split, TrainConfig,
};
use rkn_core::Error;

use manifest::RunManifest;

const EXIT_IO: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_GATE: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "rkn", version, about = "Recurrent Kalman network on synthetic pendulum data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test datasets.
    Simulate(SimulateArgs),
    /// Run the gradient gate, then train and write a checkpoint and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the cell / oracle / gradient property suites.
    Check(CheckArgs),
}

#[derive(Args, Clone)]
struct Shared {
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Only f64 is supported.
    #[arg(long, default_value = "f64")]
    precision: String,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    shared: Shared,
    /// filter_noisy or impute_50.
    #[arg(long, default_value = "filter_noisy")]
    kind: String,
    /// image (24x24) or lowdim (noisy sin/cos).
    #[arg(long, default_value = "image")]
    obs: String,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 500)]
    test: usize,
    #[arg(long, default_value_t = 150)]
    length: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Dataset file, or a directory holding train.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// key=value configuration file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra overrides, repeatable: --set key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    truncation: Option<usize>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file, or a directory holding train.jsonl / test.jsonl.
    #[arg(long)]
    data: PathBuf,
    /// test, validation or train. validation and train re-create the
    /// training split from the seed stored in the checkpoint.
    #[arg(long, default_value = "test")]
    split: String,
    /// Accepted for symmetry with `train`; the split uses the checkpoint's values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    shared: Shared,
    /// Smaller trial counts.
    #[arg(long)]
    quick: bool,
    /// Test fixture: swap in a deliberately wrong cell update.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            msg: msg.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Parse { .. } => EXIT_IO,
            Error::Config(_) | Error::InvalidDimension(_) | Error::ShapeMismatch { .. } | Error::Checkpoint(_) => {
                EXIT_USAGE
            }
            Error::NonFinite { .. } | Error::Numeric { .. } | Error::Solve(_) => EXIT_NUMERIC,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn check_precision(s: &Shared) -> CliResult<()> {
    match Precision::parse(&s.precision) {
        Some(Precision::F64) => Ok(()),
        Some(Precision::F32) => Err(Failure::usage("--precision f32 is not supported; use f64")),
        None => Err(Failure::usage(format!("unknown precision '{}'", s.precision))),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: EXIT_IO,
        msg: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| Failure {
        code: EXIT_IO,
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

/// `path` itself, or `path/<file>` when `path` is a directory.
fn resolve_data(path: &Path, file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(file)
    } else {
        path.to_path_buf()
    }
}

fn load_data(path: &Path) -> CliResult<Vec<Trajectory>> {
    if !path.exists() {
        return Err(Failure {
            code: EXIT_IO,
            msg: format!("dataset not found: {}", path.display()),
        });
    }
    Ok(read_jsonl(path)?)
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    check_precision(&a.shared)?;
    let task = TaskKind::parse(&a.kind).ok_or_else(|| Failure::usage(format!("unknown --kind '{}'", a.kind)))?;
    let obs = ObservationKind::parse(&a.obs).ok_or_else(|| Failure::usage(format!("unknown --obs '{}'", a.obs)))?;
    if a.train == 0 || a.test == 0 || a.length == 0 {
        return Err(Failure::usage("--train, --test and --length must be positive"));
    }
    let seed = a.shared.seed.unwrap_or(0);
    let start = Instant::now();
    create_dir(&a.shared.out)?;
    let train_path = a.shared.out.join("train.jsonl");
    let test_path = a.shared.out.join("test.jsonl");
    write_jsonl(&train_path, &make_dataset(task, obs, a.train, a.length, seed, 0))?;
    write_jsonl(&test_path, &make_dataset(task, obs, a.test, a.length, seed, 1))?;

    let mut m = RunManifest::new("simulate");
    m.config(&[
        ("kind", task.name().into()),
        ("obs", obs.name().into()),
        ("train", a.train.to_string()),
        ("test", a.test.to_string()),
        ("length", a.length.to_string()),
    ]);
    m.seed("seed", seed);
    m.output(&train_path)?;
    m.output(&test_path)?;
    m.finish(start, &a.shared.out.join("manifest.json"))?;
    println!(
        "wrote {} train and {} test sequences ({}, {}) to {}",
        a.train,
        a.test,
        task.name(),
        obs.name(),
        a.shared.out.display()
    );
    Ok(())
}

fn train_config(a: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).map_err(|e| Failure {
            code: EXIT_IO,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        c.apply_kv(&text).map_err(|e| Failure::usage(e.to_string()))?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--set expects key=value, got '{kv}'")))?;
        c.set(k.trim(), v).map_err(|e| Failure::usage(e.to_string()))?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("seed", a.shared.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("truncation", a.truncation.map(|v| v.to_string())),
        ("head", a.head.clone()),
        ("m", a.m.map(|v| v.to_string())),
        ("b", a.b.map(|v| v.to_string())),
        ("K", a.k.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, &v).map_err(|e| Failure::usage(e.to_string()))?;
        }
    }
    c.set("precision", &a.shared.precision)
        .map_err(|e| Failure::usage(e.to_string()))?;
    if let Some(d) = &a.data {
        c.train_data = Some(resolve_data(d, "train.jsonl"));
    }
    c.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> CliResult {
    check_precision(&a.shared)?;
    let config = train_config(&a)?;
    let data_path = config
        .train_data
        .clone()
        .ok_or_else(|| Failure::usage("no training data: pass --data or set train_data"))?;
    let start = Instant::now();
    let data = load_data(&data_path)?;
    let first = &data[0];
    if data.iter().any(|t| t.obs_dim != first.obs_dim || t.target_dim != first.target_dim) {
        return Err(Failure {
            code: EXIT_IO,
            msg: "dataset mixes observation or target widths".into(),
        });
    }
    create_dir(&a.shared.out)?;

    let gate = gradient_gate(&config, first)?;
    let gate_line = format!(
        "gradient gate: {} params, window from frame {}, max rel err {:.3e} (max abs {:.3e}) at {}",
        gate.num_params, gate.window_start, gate.max_rel_err, gate.max_abs_err, gate.worst_param
    );
    println!("{gate_line}");
    write_file(&a.shared.out.join("gate.txt"), &format!("{gate_line}\n"))?;
    if !gate.passed {
        return Err(Failure {
            code: EXIT_GATE,
            msg: "gradient gate failed; training not started".into(),
        });
    }

    let model = config.init_model(first.obs_dim, first.target_dim)?;
    let outcome = train_with_progress(&model, &config, &data, |rows| {
        let line: Vec<String> = rows
            .iter()
            .map(|r| format!("{} loss {:.4} rmse {:.4}", r.split.name(), r.loss, r.rmse))
            .collect();
        eprintln!("epoch {}: {}", rows[0].epoch, line.join(", "));
    })?;
    let ckpt = a.shared.out.join("model.ckpt");
    let metrics_path = a.shared.out.join("metrics.csv");
    let config_path = a.shared.out.join("config.txt");
    save_checkpoint(
        &ckpt,
        &outcome.model,
        &TrainingMeta {
            seed: config.seed,
            val_fraction: config.val_fraction,
            epochs_completed: outcome.epochs_completed,
        },
    )?;
    write_file(&metrics_path, &metrics_csv(&outcome.metrics))?;
    write_file(&config_path, &config.to_kv())?;

    let mut m = RunManifest::new("train");
    m.config_kv(&config.to_kv());
    m.seed("seed", config.seed);
    m.input(&data_path)?;
    m.output(&ckpt)?;
    m.output(&rkn_core::checkpoint::manifest_path(&ckpt))?;
    m.output(&metrics_path)?;
    m.finish(start, &a.shared.out.join("manifest.json"))?;

    if let Some(last) = outcome.metrics.iter().rev().find(|r| r.split == Split::Validation) {
        println!(
            "epoch {}: validation loss {} rmse {}",
            last.epoch,
            fmt_f64(last.loss),
            fmt_f64(last.rmse)
        );
    }
    if let Some(e) = outcome.divergence {
        return Err(Failure {
            code: EXIT_NUMERIC,
            msg: format!(
                "training diverged after {} epochs ({e}); last good model written to {}",
                outcome.epochs_completed,
                ckpt.display()
            ),
        });
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    check_precision(&a.shared)?;
    let start = Instant::now();
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let (split, file) = match a.split.as_str() {
        "test" => (Split::Test, "test.jsonl"),
        "validation" => (Split::Validation, "train.jsonl"),
        "train" => (Split::Train, "train.jsonl"),
        other => return Err(Failure::usage(format!("unknown --split '{other}'"))),
    };
    let data_path = resolve_data(&a.data, file);
    let data = load_data(&data_path)?;
    for t in &data {
        check_compatible(&model, t.obs_dim, t.target_dim)?;
    }
    let data = match split {
        Split::Test => data,
        Split::Validation => split_dataset(&data, meta.val_fraction, meta.seed).1,
        Split::Train => split_dataset(&data, meta.val_fraction, meta.seed).0,
    };
    if data.is_empty() {
        return Err(Failure::usage(format!("the {} split is empty", split.name())));
    }
    let report = evaluate(&model, &data)?;
    create_dir(&a.shared.out)?;
    let row = MetricsRow::from_report(meta.epochs_completed, split, &report);
    let eval_path = a.shared.out.join(format!("eval_{}.csv", split.name()));
    let hist_path = a.shared.out.join(format!("calibration_{}.csv", split.name()));
    let summary_path = a.shared.out.join(format!("summary_{}.csv", split.name()));
    write_file(&eval_path, &metrics_csv(&[row]))?;
    write_file(&hist_path, &report.calibration.histogram_csv())?;

    let copy_last = copy_last_visible_log_likelihood(&data);
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), fmt_f64);
    let summary = [
        ("sequences", report.sequences.to_string()),
        ("ll_mean", fmt_f64(report.log_likelihood.mean)),
        ("ll_std", fmt_f64(report.log_likelihood.std)),
        ("rmse_mean", fmt_f64(report.rmse.mean)),
        ("rmse_std", fmt_f64(report.rmse.std)),
        ("cal_mean", fmt_f64(report.calibration.mean)),
        ("cal_std", fmt_f64(report.calibration.std)),
        ("cal_count", report.calibration.count.to_string()),
        ("cal_below", report.calibration.below.to_string()),
        ("cal_above", report.calibration.above.to_string()),
        ("missing_ll", opt(report.missing_log_likelihood)),
        ("copy_last_visible_ll", opt(copy_last)),
    ];
    let mut s = String::from("key,value\n");
    for (k, v) in &summary {
        s.push_str(&format!("{k},{v}\n"));
    }
    write_file(&summary_path, &s)?;

    let mut m = RunManifest::new("eval");
    m.config(&[("split", split.name().into()), ("checkpoint", a.checkpoint.display().to_string())]);
    m.seed("training_seed", meta.seed);
    m.input(&a.checkpoint)?;
    m.input(&data_path)?;
    m.output(&eval_path)?;
    m.output(&hist_path)?;
    m.output(&summary_path)?;
    m.finish(start, &a.shared.out.join(format!("manifest_eval_{}.json", split.name())))?;

    let mut line = format!(
        "{} ({} sequences): ll {:.4} +- {:.4} nats/step, rmse {:.4}, normalized error mean {:.3} std {:.3}",
        split.name(),
        report.sequences,
        report.log_likelihood.mean,
        report.log_likelihood.std,
        report.rmse.mean,
        report.calibration.mean,
        report.calibration.std
    );
    if let (Some(ll), Some(base)) = (report.missing_log_likelihood, copy_last) {
        line.push_str(&format!(", missing-frame ll {ll:.3} vs copy-last-visible {base:.3}"));
    }
    println!("{line}");
    Ok(())
}

fn cmd_check(a: CheckArgs) -> CliResult {
    check_precision(&a.shared)?;
    let update_fn: UpdateFn = match a.inject_fault.as_deref() {
        None => rkn_core::cell::update,
        Some("lower-gain-sign") => conformance::update_with_flipped_lower_gain,
        Some(other) => return Err(Failure::usage(format!("unknown fault '{other}'"))),
    };
    let budget = if a.quick { Budget::quick() } else { Budget::full() };
    let seed = a.shared.seed.unwrap_or(0);
    let start = Instant::now();
    let results = conformance::run_all(seed, budget, update_fn);
    let mut csv = String::from("property,status,cases,max_abs_err,tolerance\n");
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!(
            "{status} {:<26} cases={:<7} max_abs_err={:.3e} tol={:.1e}",
            r.name, r.cases, r.max_abs_err, r.tolerance
        );
        csv.push_str(&format!(
            "{},{status},{},{},{}\n",
            r.name,
            r.cases,
            fmt_f64(r.max_abs_err),
            fmt_f64(r.tolerance)
        ));
    }
    create_dir(&a.shared.out)?;
    let csv_path = a.shared.out.join("check.csv");
    write_file(&csv_path, &csv)?;
    let mut m = RunManifest::new("check");
    m.config(&[
        ("budget", if a.quick { "quick" } else { "full" }.into()),
        ("inject_fault", a.inject_fault.clone().unwrap_or_else(|| "none".into())),
    ]);
    m.seed("seed", seed);
    m.output(&csv_path)?;
    m.finish(start, &a.shared.out.join("manifest_check.json"))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure {
            code: EXIT_GATE,
            msg: format!("{failed} of {} properties failed", results.len()),
        });
    }
    println!("all {} properties passed", results.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Check(a) => cmd_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
