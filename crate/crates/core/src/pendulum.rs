//! Synthetic pendulum data: noisy dynamics, 24x24 renderings, time-correlated
//! observation noise and missing-frame masks.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};

pub const IMAGE_SIDE: usize = 24;
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;
/// Pendulum arm length in pixels.
pub const ARM_LENGTH: f64 = 9.0;
/// Half of the drawn line width in pixels.
pub const LINE_HALF_WIDTH: f64 = 1.0;
/// Standard deviation of the low-dimensional observation noise at factor 0.
pub const LOWDIM_NOISE_STD: f64 = 1.0;
/// Raw factor walk increments are drawn from `U(-FACTOR_STEP, FACTOR_STEP)`.
pub const FACTOR_STEP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumParams {
    pub dt: f64,
    pub g_over_l: f64,
    /// Standard deviation of the velocity noise added after each step.
    pub noise_std: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            g_over_l: 9.81,
            noise_std: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub omega: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Semi-implicit Euler from `initial`: velocity first (with noise), then angle.
/// Returns `steps` states, the first being `initial`.
pub fn simulate_from<R: Rng + ?Sized>(
    initial: PendulumState,
    steps: usize,
    params: &PendulumParams,
    rng: &mut R,
) -> Vec<PendulumState> {
    let noise = Normal::new(0.0, params.noise_std.max(0.0)).expect("finite noise std");
    let mut out = Vec::with_capacity(steps);
    let mut s = initial;
    for t in 0..steps {
        if t > 0 {
            let eta = if params.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            s.omega += -params.g_over_l * s.theta.sin() * params.dt + eta;
            s.theta = wrap_angle(s.theta + s.omega * params.dt);
        }
        out.push(s);
    }
    out
}

/// `theta_0 ~ U(-pi, pi)`, `omega_0 = 0`, then [`simulate_from`].
pub fn simulate_pendulum(seed: u64, steps: usize, params: &PendulumParams) -> Vec<PendulumState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_with_rng(steps, params, &mut rng)
}

fn simulate_with_rng<R: Rng + ?Sized>(steps: usize, params: &PendulumParams, rng: &mut R) -> Vec<PendulumState> {
    let theta = rng.random_range(-PI..PI);
    simulate_from(PendulumState { theta, omega: 0.0 }, steps, params, rng)
}

/// Anti-aliased line from the image center at angle `theta` (0 points down),
/// white on black, row-major `24 x 24` in `[0, 1]`.
pub fn render_pendulum(theta: f64) -> Vec<f64> {
    let theta = wrap_angle(theta);
    let c = IMAGE_SIDE as f64 / 2.0;
    let (dx, dy) = (ARM_LENGTH * theta.sin(), ARM_LENGTH * theta.cos());
    let len2 = dx * dx + dy * dy;
    let mut img = vec![0.0; IMAGE_PIXELS];
    for row in 0..IMAGE_SIDE {
        for col in 0..IMAGE_SIDE {
            let (px, py) = (col as f64 + 0.5 - c, row as f64 + 0.5 - c);
            let t = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
            let dist = ((px - t * dx).powi(2) + (py - t * dy).powi(2)).sqrt();
            img[row * IMAGE_SIDE + col] = (LINE_HALF_WIDTH + 0.5 - dist).clamp(0.0, 1.0);
        }
    }
    img
}

/// Raw clipped random walk, the per-sequence thresholds and the mapped factors.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFactors {
    pub raw: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub factors: Vec<f64>,
}

/// Below `lower` -> 0, above `upper` -> 1, linear in between.
pub fn threshold_map(f: f64, lower: f64, upper: f64) -> f64 {
    if f < lower {
        0.0
    } else if f > upper {
        1.0
    } else {
        ((f - lower) / (upper - lower)).clamp(0.0, 1.0)
    }
}

pub fn noise_factor_walk<R: Rng + ?Sized>(steps: usize, rng: &mut R) -> NoiseFactors {
    let mut raw = Vec::with_capacity(steps);
    let mut f: f64 = rng.random_range(0.0..1.0);
    for t in 0..steps {
        if t > 0 {
            let r: f64 = rng.random_range(-FACTOR_STEP..FACTOR_STEP);
            f = (f + r).clamp(0.0, 1.0);
        }
        raw.push(f);
    }
    let lower = rng.random_range(0.0..0.25);
    let upper = rng.random_range(0.75..1.0);
    let factors = raw.iter().map(|&f| threshold_map(f, lower, upper)).collect();
    NoiseFactors {
        raw,
        lower,
        upper,
        factors,
    }
}

/// Time-correlated noise factors in `[0, 1]` for one sequence.
pub fn noise_factor_sequence(seed: u64, steps: usize) -> Vec<f64> {
    noise_factor_walk(steps, &mut ChaCha8Rng::seed_from_u64(seed)).factors
}

/// `f * image + (1 - f) * U(0, 1) noise`, pixelwise.
pub fn corrupt<R: Rng + ?Sized>(image: &[f64], f: f64, rng: &mut R) -> Vec<f64> {
    image
        .iter()
        .map(|&px| {
            let noise: f64 = rng.random_range(0.0..1.0);
            f * px + (1.0 - f) * noise
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Every frame present, corrupted by the factor process.
    FilterNoisy,
    /// Clean frames, each dropped with probability 1/2.
    Impute50,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::FilterNoisy => "filter_noisy",
            TaskKind::Impute50 => "impute_50",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "filter_noisy" => Some(TaskKind::FilterNoisy),
            "impute_50" => Some(TaskKind::Impute50),
            _ => None,
        }
    }
}

/// What each observation row holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    Image,
    /// `(sin, cos)` plus Gaussian noise scaled by `1 - f`. A fast stand-in
    /// for images; not one of the image benchmarks.
    LowDim,
}

impl ObservationKind {
    pub fn name(self) -> &'static str {
        match self {
            ObservationKind::Image => "image",
            ObservationKind::LowDim => "lowdim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "image" => Some(ObservationKind::Image),
            "lowdim" => Some(ObservationKind::LowDim),
            _ => None,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            ObservationKind::Image => IMAGE_PIXELS,
            ObservationKind::LowDim => 2,
        }
    }
}

/// One sequence. Observations are kept at single precision; rows of absent
/// frames still hold the true frame so imputation can be scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub obs_dim: usize,
    pub target_dim: usize,
    /// Row-major `T x obs_dim`.
    pub observations: Vec<f32>,
    pub mask: Vec<bool>,
    /// Row-major `T x target_dim`, `(sin theta, cos theta)` per step.
    pub targets: Vec<f64>,
    /// Noise factors used for corruption, when generated in-process.
    pub noise_factors: Option<Vec<f64>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn observation(&self, t: usize) -> &[f32] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn target(&self, t: usize) -> &[f64] {
        &self.targets[t * self.target_dim..(t + 1) * self.target_dim]
    }

    /// Copy of the first `steps` time steps.
    pub fn truncated(&self, steps: usize) -> Trajectory {
        self.window(0, steps)
    }

    /// Frames `start..start + steps`, clipped to the trajectory.
    pub fn window(&self, start: usize, steps: usize) -> Trajectory {
        let start = start.min(self.len());
        let end = (start + steps).min(self.len());
        Trajectory {
            seed: self.seed,
            obs_dim: self.obs_dim,
            target_dim: self.target_dim,
            observations: self.observations[start * self.obs_dim..end * self.obs_dim].to_vec(),
            mask: self.mask[start..end].to_vec(),
            targets: self.targets[start * self.target_dim..end * self.target_dim].to_vec(),
            noise_factors: self.noise_factors.as_ref().map(|f| f[start..end].to_vec()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 || self.obs_dim == 0 || self.target_dim == 0 {
            return Err(Error::InvalidDimension("empty trajectory".into()));
        }
        if self.observations.len() != t * self.obs_dim {
            return Err(Error::ShapeMismatch {
                context: "trajectory observations",
                expected: t * self.obs_dim,
                got: self.observations.len(),
            });
        }
        if self.targets.len() != t * self.target_dim {
            return Err(Error::ShapeMismatch {
                context: "trajectory targets",
                expected: t * self.target_dim,
                got: self.targets.len(),
            });
        }
        Ok(())
    }
}

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trajectory `index` in stream `stream` (e.g. train vs. test).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ stream) ^ index)
}

/// Generates one trajectory; all randomness comes from `seed`.
pub fn make_trajectory(
    task: TaskKind,
    obs_kind: ObservationKind,
    steps: usize,
    seed: u64,
    params: &PendulumParams,
) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = simulate_with_rng(steps, params, &mut rng);
    let factors = match task {
        TaskKind::FilterNoisy => noise_factor_walk(steps, &mut rng).factors,
        TaskKind::Impute50 => vec![1.0; steps],
    };
    let obs_dim = obs_kind.dim();
    let mut observations = Vec::with_capacity(steps * obs_dim);
    let mut targets = Vec::with_capacity(steps * 2);
    let mut mask = Vec::with_capacity(steps);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for (s, &f) in states.iter().zip(&factors) {
        let (sin, cos) = s.theta.sin_cos();
        targets.extend_from_slice(&[sin, cos]);
        let row = match obs_kind {
            ObservationKind::Image => {
                let clean = render_pendulum(s.theta);
                match task {
                    TaskKind::FilterNoisy => corrupt(&clean, f, &mut rng),
                    TaskKind::Impute50 => clean,
                }
            }
            ObservationKind::LowDim => {
                let scale = LOWDIM_NOISE_STD * (1.0 - f);
                vec![
                    sin + scale * unit.sample(&mut rng),
                    cos + scale * unit.sample(&mut rng),
                ]
            }
        };
        observations.extend(row.into_iter().map(|v| v as f32));
        mask.push(match task {
            TaskKind::FilterNoisy => true,
            TaskKind::Impute50 => rng.random_bool(0.5),
        });
    }
    Trajectory {
        seed,
        obs_dim,
        target_dim: 2,
        observations,
        mask,
        targets,
        noise_factors: Some(factors),
    }
}

/// `count` trajectories with seeds derived from `(seed, stream, index)`.
pub fn make_dataset(
    task: TaskKind,
    obs_kind: ObservationKind,
    count: usize,
    steps: usize,
    seed: u64,
    stream: u64,
) -> Vec<Trajectory> {
    let params = PendulumParams::default();
    (0..count)
        .map(|i| make_trajectory(task, obs_kind, steps, derive_seed(seed, stream, i as u64), &params))
        .collect()
}

/// Formats `x` with 9 significant digits, positional where reasonable.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        // not representable in JSON; callers validate beforehand
        return "null".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let (sign, mantissa) = match mantissa.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", mantissa),
    };
    let digits: String = mantissa.chars().filter(|c| *c != '.').collect();
    if !(-7..9).contains(&exp) {
        let frac = digits[1..].trim_end_matches('0');
        return if frac.is_empty() {
            format!("{sign}{}e{exp}", &digits[..1])
        } else {
            format!("{sign}{}.{frac}e{exp}", &digits[..1])
        };
    }
    let (int_part, frac_part) = if exp >= 0 {
        let e = exp as usize + 1;
        (digits[..e].to_string(), digits[e..].to_string())
    } else {
        ("0".to_string(), "0".repeat((-exp - 1) as usize) + &digits)
    };
    let frac = frac_part.trim_end_matches('0');
    if frac.is_empty() {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{frac}")
    }
}

fn push_rows<T: Copy + Into<f64>>(out: &mut String, values: &[T], width: usize) {
    out.push('[');
    for (r, row) in values.chunks(width).enumerate() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format_sig9((*v).into()));
        }
        out.push(']');
    }
    out.push(']');
}

/// One JSON object (no trailing newline) in the dataset line format.
pub fn trajectory_to_json(traj: &Trajectory) -> String {
    let mut s = String::with_capacity(traj.observations.len() * 10 + 256);
    s.push_str(&format!(
        "{{\"seed\":{},\"T\":{},\"obs_dim\":{},\"target_dim\":{},\"obs\":",
        traj.seed,
        traj.len(),
        traj.obs_dim,
        traj.target_dim
    ));
    push_rows(&mut s, &traj.observations, traj.obs_dim);
    s.push_str(",\"mask\":[");
    for (i, m) in traj.mask.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(if *m { "true" } else { "false" });
    }
    s.push_str("],\"targets\":");
    push_rows(&mut s, &traj.targets, traj.target_dim);
    s.push('}');
    s
}

#[derive(Deserialize)]
struct TrajectoryRecord {
    seed: u64,
    #[serde(rename = "T")]
    steps: usize,
    obs_dim: usize,
    target_dim: usize,
    obs: Vec<Vec<f64>>,
    mask: Vec<bool>,
    targets: Vec<Vec<f64>>,
}

pub fn trajectory_from_json(line: &str) -> std::result::Result<Trajectory, String> {
    let rec: TrajectoryRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if rec.obs.len() != rec.steps || rec.mask.len() != rec.steps || rec.targets.len() != rec.steps {
        return Err(format!(
            "T = {} but obs/mask/targets have {}/{}/{} rows",
            rec.steps,
            rec.obs.len(),
            rec.mask.len(),
            rec.targets.len()
        ));
    }
    if rec.obs.iter().any(|r| r.len() != rec.obs_dim) {
        return Err(format!("observation row width differs from obs_dim {}", rec.obs_dim));
    }
    if rec.targets.iter().any(|r| r.len() != rec.target_dim) {
        return Err(format!("target row width differs from target_dim {}", rec.target_dim));
    }
    let traj = Trajectory {
        seed: rec.seed,
        obs_dim: rec.obs_dim,
        target_dim: rec.target_dim,
        observations: rec.obs.into_iter().flatten().map(|v| v as f32).collect(),
        mask: rec.mask,
        targets: rec.targets.into_iter().flatten().collect(),
        noise_factors: None,
    };
    traj.validate().map_err(|e| e.to_string())?;
    Ok(traj)
}

/// Writes one trajectory per line.
pub fn write_jsonl(path: &Path, trajectories: &[Trajectory]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for traj in trajectories {
        w.write_all(trajectory_to_json(traj).as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Trajectory>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let traj = trajectory_from_json(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", lineno + 1),
        })?;
        out.push(traj);
    }
    if out.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            msg: "dataset contains no trajectories".into(),
        });
    }
    Ok(out)
}
