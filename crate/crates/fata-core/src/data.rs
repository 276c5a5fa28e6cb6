//! Synthetic source data, parametric corruptions, and scenario streams.
//!
//! Two task families stand in for real image benchmarks at desk scale:
//! Gaussian class clusters in `[0, 1]^d` (`blobs`) and textured 8x8x3 tiles
//! built from class-specific gratings (`patterns`). Inputs live in `[0, 1]`
//! before corruption and are clamped back into it afterwards.
//!
//! Five corruption families at five severities mirror the usual
//! noise/blur/digital grouping; severity 0 is always the identity and the
//! per-family parameter tables are monotone in severity.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Purpose, SeedSplitter};

// ---------------------------------------------------------------------------
// tasks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Gaussian class clusters in `[0, 1]^dim`.
    Blobs { dim: usize },
    /// 8x8 RGB tiles; each class is a distinct oriented grating.
    Patterns,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub num_classes: usize,
    /// Class separation relative to the within-class noise; larger is easier.
    pub separation: f64,
    pub seed: u64,
}

pub const PATTERN_CHANNELS: usize = 3;
pub const PATTERN_SIDE: usize = 8;

impl SyntheticTask {
    pub fn sample_shape(&self) -> Vec<usize> {
        match self.kind {
            TaskKind::Blobs { dim } => vec![dim],
            TaskKind::Patterns => vec![PATTERN_CHANNELS, PATTERN_SIDE, PATTERN_SIDE],
        }
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }
}

/// A labeled dataset generated from a task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Pool {
    pub sample_shape: Vec<usize>,
    pub num_classes: usize,
    /// Row-major `[n, sample_len]`.
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Pool {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.sample_len();
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Stacks samples `indices` into a `[B, ...]` batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let w = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (data, shape)
    }
}

/// `n` labeled examples, class-balanced to within one sample, deterministic
/// in the task seed.
pub fn generate_pool(task: &SyntheticTask, n: usize) -> Result<Pool> {
    let c = task.num_classes;
    if c < 2 {
        return Err(Error::Contract("task needs at least 2 classes".into()));
    }
    if n < c {
        return Err(Error::Contract(format!(
            "pool of {n} samples cannot cover {c} classes"
        )));
    }
    if !(task.separation > 0.0) {
        return Err(Error::Contract("separation must be positive".into()));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    let splitter = SeedSplitter::new(task.seed);
    let mut rng = splitter.rng(Purpose::Data);
    let w = task.sample_len();
    let mut inputs = Vec::with_capacity(n * w);

    match task.kind {
        TaskKind::Blobs { dim } => {
            // centroids away from the walls so cluster noise rarely clips
            let centroids: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..dim).map(|_| rng.random_range(0.25..0.75)).collect())
                .collect();
            let mut d_min = f64::INFINITY;
            for i in 0..c {
                for j in i + 1..c {
                    let d: f64 = centroids[i]
                        .iter()
                        .zip(&centroids[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    d_min = d_min.min(d);
                }
            }
            let noise_std = d_min / task.separation;
            let dist = Normal::new(0.0, noise_std).expect("std >= 0");
            for &label in &labels {
                for d in 0..dim {
                    let v = centroids[label][d] + dist.sample(&mut rng);
                    inputs.push(v.clamp(0.0, 1.0));
                }
            }
        }
        TaskKind::Patterns => {
            let bases: Vec<Vec<f64>> = (0..c)
                .map(|class| pattern_base(task.seed, class))
                .collect();
            let jitter = 0.5 / task.separation;
            let dist = Normal::new(0.0, jitter).expect("std >= 0");
            for &label in &labels {
                for &b in &bases[label] {
                    inputs.push((b + dist.sample(&mut rng)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(Pool {
        sample_shape: task.sample_shape(),
        num_classes: c,
        inputs,
        labels,
    })
}

/// Splits a pool into (first `n` samples, rest). Generation interleaves
/// classes, so both parts stay balanced to within one sample.
pub fn split_pool(pool: &Pool, n: usize) -> (Pool, Pool) {
    let n = n.min(pool.len());
    let w = pool.sample_len();
    let head = Pool {
        sample_shape: pool.sample_shape.clone(),
        num_classes: pool.num_classes,
        inputs: pool.inputs[..n * w].to_vec(),
        labels: pool.labels[..n].to_vec(),
    };
    let tail = Pool {
        sample_shape: pool.sample_shape.clone(),
        num_classes: pool.num_classes,
        inputs: pool.inputs[n * w..].to_vec(),
        labels: pool.labels[n..].to_vec(),
    };
    (head, tail)
}

/// Class prototype tile: an oriented low-frequency grating with per-channel
/// phase offsets, deterministic in (task seed, class).
fn pattern_base(task_seed: u64, class: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(
        SeedSplitter::new(task_seed).seed_for(Purpose::Data, 0xBA5E),
        class as u64,
    ));
    let freq = rng.random_range(1.0..2.5);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (fx, fy) = (freq * theta.cos(), freq * theta.sin());
    let amp = 0.35;
    let phases: Vec<f64> = (0..PATTERN_CHANNELS)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut tile = Vec::with_capacity(PATTERN_CHANNELS * PATTERN_SIDE * PATTERN_SIDE);
    for ch in 0..PATTERN_CHANNELS {
        for y in 0..PATTERN_SIDE {
            for x in 0..PATTERN_SIDE {
                let arg = std::f64::consts::TAU * (fx * x as f64 + fy * y as f64)
                    / PATTERN_SIDE as f64
                    + phases[ch];
                tile.push((0.5 + amp * arg.sin()).clamp(0.0, 1.0));
            }
        }
    }
    tile
}

// ---------------------------------------------------------------------------
// corruptions

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    GaussNoise,
    ImpulseNoise,
    BlurBox,
    Contrast,
    Brightness,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::GaussNoise,
        Family::ImpulseNoise,
        Family::BlurBox,
        Family::Contrast,
        Family::Brightness,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Family::GaussNoise => "gauss_noise",
            Family::ImpulseNoise => "impulse_noise",
            Family::BlurBox => "blur_box",
            Family::Contrast => "contrast",
            Family::Brightness => "brightness",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption family `{s}`")))
    }
}

/// Per-severity parameters (index 0 = severity 1). Documented in the README.
pub const GAUSS_NOISE_STD: [f64; 5] = [0.05, 0.10, 0.16, 0.24, 0.35];
pub const IMPULSE_NOISE_PROB: [f64; 5] = [0.03, 0.07, 0.12, 0.18, 0.27];
pub const BLUR_BOX_SIZE: [usize; 5] = [3, 3, 5, 5, 7];
pub const CONTRAST_FACTOR: [f64; 5] = [0.72, 0.55, 0.40, 0.27, 0.16];
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.07, 0.13, 0.20, 0.28, 0.38];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub family: Family,
    /// 0 (identity) through 5.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn identity() -> Self {
        CorruptionSpec { family: Family::GaussNoise, severity: 0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > 5 {
            return Err(Error::Config(format!(
                "severity {} out of range 0..=5",
                self.severity
            )));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        CorruptionSpec { seed, ..*self }
    }
}

/// Applies one corruption to one sample. Deterministic in `(x, spec.seed)`;
/// output stays in `[0, 1]`.
pub fn corrupt(x: &[f64], shape: &[usize], spec: &CorruptionSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.severity == 0 {
        return Ok(x.to_vec());
    }
    let s = (spec.severity - 1) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = match spec.family {
        Family::GaussNoise => {
            let dist = Normal::new(0.0, GAUSS_NOISE_STD[s]).expect("std >= 0");
            x.iter().map(|v| v + dist.sample(&mut rng)).collect::<Vec<f64>>()
        }
        Family::ImpulseNoise => {
            let p = IMPULSE_NOISE_PROB[s];
            x.iter()
                .map(|&v| {
                    if rng.random::<f64>() < p {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
        Family::BlurBox => box_blur(x, shape, BLUR_BOX_SIZE[s]),
        Family::Contrast => {
            let c = CONTRAST_FACTOR[s];
            let m = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|&v| m + c * (v - m)).collect()
        }
        Family::Brightness => {
            let b = BRIGHTNESS_SHIFT[s];
            x.iter().map(|&v| v + b).collect()
        }
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// k x k box average per channel for `[C, H, W]` samples, k-window moving
/// average for flat vectors. Windows are truncated at the borders and
/// normalized by the actual count.
fn box_blur(x: &[f64], shape: &[usize], k: usize) -> Vec<f64> {
    let r = k / 2;
    match shape.len() {
        3 => {
            let (c, h, w) = (shape[0], shape[1], shape[2]);
            let mut out = vec![0.0; x.len()];
            for ci in 0..c {
                let plane = &x[ci * h * w..(ci + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let y0 = y.saturating_sub(r);
                        let y1 = (y + r + 1).min(h);
                        let x0 = xx.saturating_sub(r);
                        let x1 = (xx + r + 1).min(w);
                        let mut acc = 0.0;
                        for yy in y0..y1 {
                            for xb in x0..x1 {
                                acc += plane[yy * w + xb];
                            }
                        }
                        out[ci * h * w + y * w + xx] =
                            acc / ((y1 - y0) * (x1 - x0)) as f64;
                    }
                }
            }
            out
        }
        _ => {
            let n = x.len();
            let mut out = vec![0.0; n];
            for i in 0..n {
                let i0 = i.saturating_sub(r);
                let i1 = (i + r + 1).min(n);
                out[i] = x[i0..i1].iter().sum::<f64>() / (i1 - i0) as f64;
            }
            out
        }
    }
}

// ---------------------------------------------------------------------------
// streams

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Shuffled stream, configurable batch size.
    Normal,
    /// One sample per step.
    Batch1,
    /// Classes presented in contiguous blocks.
    LabelShift,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Normal => "normal",
            Scenario::Batch1 => "batch1",
            Scenario::LabelShift => "label_shift",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub scenario: Scenario,
    pub batch_size: usize,
    /// Cap on the number of batches; `None` takes one full pass.
    pub num_batches: Option<usize>,
    pub corruption: CorruptionSpec,
    pub seed: u64,
}

/// One step of the input stream.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, ...sample_shape]`.
    pub x: Vec<f64>,
    pub shape: Vec<usize>,
    pub labels: Vec<usize>,
    /// Pool indices, for traceability.
    pub indices: Vec<usize>,
}

/// Orders the pool per the scenario, corrupts each sample (keyed by its pool
/// index, so ordering and noise are independent), and batches.
pub fn make_stream(pool: &Pool, spec: &StreamSpec) -> Result<Vec<Batch>> {
    spec.corruption.validate()?;
    let batch_size = match spec.scenario {
        Scenario::Batch1 => 1,
        _ => spec.batch_size,
    };
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if pool.len() < batch_size {
        return Err(Error::Contract(format!(
            "pool of {} samples cannot fill a batch of {batch_size}",
            pool.len()
        )));
    }

    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut rng = SeedSplitter::new(spec.seed).rng(Purpose::Stream);
    order.shuffle(&mut rng);
    if spec.scenario == Scenario::LabelShift {
        order = (0..pool.len()).collect();
        order.sort_by_key(|&i| pool.labels[i]); // stable: original order within class
    }

    let full = order.len() / batch_size + usize::from(order.len() % batch_size != 0);
    let take = match spec.num_batches {
        None => full,
        Some(k) if k <= full => k,
        Some(k) => {
            return Err(Error::Config(format!(
                "num_batches {k} exceeds the {full} batches of one pass"
            )));
        }
    };

    let splitter = SeedSplitter::new(spec.corruption.seed);
    let mut batches = Vec::with_capacity(take);
    for chunk in order.chunks(batch_size).take(take) {
        let mut x = Vec::with_capacity(chunk.len() * pool.sample_len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let per_sample = spec
                .corruption
                .with_seed(splitter.seed_for(Purpose::Corrupt, i as u64));
            x.extend(corrupt(pool.sample(i), &pool.sample_shape, &per_sample)?);
            labels.push(pool.labels[i]);
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(&pool.sample_shape);
        batches.push(Batch { x, shape, labels, indices: chunk.to_vec() });
    }
    Ok(batches)
}
