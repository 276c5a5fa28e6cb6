//! Pretraining and the online adaptation loop.
//!
//! One adaptation episode walks a corrupted stream once. Each step runs the
//! two-branch forward, gates samples by entropy, builds the configured loss,
//! backpropagates, and applies SGD to the normalization affine parameters
//! only. Reported predictions always come from the forward pass of the same
//! step, i.e. before that step's update takes effect.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugState};
use crate::data::{Batch, Pool, StreamSpec};
use crate::error::{Error, Result};
use crate::losses::{self, LossBundle, Reduction};
use crate::model::FataModel;
use crate::nn::{self, Forward, Mode, ParamId, ParamStore};
use crate::rng::{Purpose, SeedSplitter};
use crate::selection::{SelectionConfig, SelectionOutcome};
use crate::tensor::TensorId;

/// Which objective drives the episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Evaluate the source model as-is.
    NoAdapt,
    /// Selection-weighted entropy minimization.
    EntMin,
    /// Entropy minimization plus the pseudo-label augmentation loss.
    #[serde(rename = "ent_min+fata", alias = "ent_min_fata")]
    EntMinFata,
    /// The pseudo-label augmentation loss alone.
    FataOnly,
    /// Entropy minimization plus entropy of the augmented branch.
    SimpleAug,
    /// Entropy minimization plus MSE between the branch outputs.
    Mse,
    /// Entropy minimization plus soft-target cross-entropy between branches.
    SimpleCe,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::NoAdapt,
        Method::EntMin,
        Method::EntMinFata,
        Method::FataOnly,
        Method::SimpleAug,
        Method::Mse,
        Method::SimpleCe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::NoAdapt => "no_adapt",
            Method::EntMin => "ent_min",
            Method::EntMinFata => "ent_min+fata",
            Method::FataOnly => "fata_only",
            Method::SimpleAug => "simple_aug",
            Method::Mse => "mse",
            Method::SimpleCe => "simple_ce",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ent_min_fata" => return Ok(Method::EntMinFata),
            _ => {}
        }
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub method: Method,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Overrides the checkpoint's augmentation hook position.
    pub aug_position: Option<usize>,
    pub sigma_n: f64,
    pub lambda_ema: f64,
    /// Entropy threshold; defaults to `0.5 ln C`.
    pub e0: Option<f64>,
    /// Weighting pivot; defaults to `0.4 ln C`.
    pub ew: Option<f64>,
    pub reduction: Reduction,
    /// Update the EMA from selected samples' statistics only.
    pub ema_on_selected_only: bool,
    /// Let the MSE ablation's gradient flow through both branches.
    pub mse_both_grad: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::EntMinFata,
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 64,
            aug_position: None,
            sigma_n: 1.0,
            lambda_ema: 0.95,
            e0: None,
            ew: None,
            reduction: Reduction::BatchMean,
            ema_on_selected_only: false,
            mse_both_grad: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_ema) {
            return Err(Error::Config(format!(
                "lambda_ema must be in [0, 1], got {}",
                self.lambda_ema
            )));
        }
        if !(self.sigma_n >= 0.0) {
            return Err(Error::Config(format!(
                "sigma_n must be >= 0, got {}",
                self.sigma_n
            )));
        }
        if let (Some(e0), Some(ew)) = (self.e0, self.ew) {
            SelectionConfig { e0, ew }.validate()?;
        }
        Ok(())
    }

    pub fn selection(&self, num_classes: usize) -> SelectionConfig {
        let default = SelectionConfig::for_classes(num_classes);
        SelectionConfig {
            e0: self.e0.unwrap_or(default.e0),
            ew: self.ew.unwrap_or(default.ew),
        }
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Plain SGD with optional momentum, keyed by parameter id.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Self {
        Sgd { lr, momentum, velocity: vec![None; num_params] }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) {
        for (id, g) in grads {
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
            let data = &mut store.entry_mut(*id).data;
            for i in 0..g.len() {
                v[i] = self.momentum * v[i] + g[i];
                data[i] -= self.lr * v[i];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// pretraining

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { epochs: 20, lr: 0.02, momentum: 0.9, batch_size: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub epochs: usize,
    pub final_loss: f64,
    pub clean_accuracy: f64,
}

/// Supervised cross-entropy training of all parameters on clean data.
/// Aborts with a diagnostic if the loss diverges.
pub fn pretrain(
    model: &FataModel,
    store: &mut ParamStore,
    train: &Pool,
    val: &Pool,
    cfg: &PretrainConfig,
) -> Result<PretrainSummary> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be >= 1".into()));
    }
    let mut rng = SeedSplitter::new(cfg.seed).rng(Purpose::Pretrain);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, store.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, shape) = train.gather(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();

            let mut fwd = Forward::new(store, Mode::Pretrain);
            let xid = fwd.input(x, &shape)?;
            let p = model.full_forward(&mut fwd, xid)?;
            let picked = fwd.tape.gather_rows(p, &labels)?;
            let lp = fwd.tape.log_clamped(picked);
            let nll = fwd.tape.neg(lp);
            let loss = fwd.tape.mean_all(nll)?;
            let loss_v = fwd.tape.scalar_value(loss);
            if !loss_v.is_finite() {
                return Err(Error::Numerical(format!(
                    "pretraining diverged at epoch {epoch}: loss = {loss_v}"
                )));
            }
            final_loss = loss_v;
            fwd.tape.backward(loss)?;
            let grads = fwd.parameter_grads();
            let stats = std::mem::take(&mut fwd.bn_batch_stats);
            drop(fwd);
            opt.step(store, &grads);
            nn::update_running_stats(store, &stats);
        }
    }

    let clean_accuracy = evaluate_pool(model, store, val)?;
    Ok(PretrainSummary { epochs: cfg.epochs, final_loss, clean_accuracy })
}

/// Eval-mode accuracy on a clean pool.
pub fn evaluate_pool(model: &FataModel, store: &ParamStore, pool: &Pool) -> Result<f64> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..pool.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, shape) = pool.gather(chunk);
        let mut fwd = Forward::new(store, Mode::Eval);
        let xid = fwd.input(x, &shape)?;
        let p = model.full_forward(&mut fwd, xid)?;
        let pred = fwd.tape.argmax_axis(p, 1);
        correct += pred
            .iter()
            .zip(chunk.iter())
            .filter(|(yh, &i)| **yh == pool.labels[i])
            .count();
    }
    Ok(correct as f64 / pool.len().max(1) as f64)
}

/// Eval-mode accuracy on prepared (possibly corrupted) batches.
pub fn evaluate_batches(model: &FataModel, store: &ParamStore, batches: &[Batch]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for b in batches {
        let mut fwd = Forward::new(store, Mode::Eval);
        let xid = fwd.input(b.x.clone(), &b.shape)?;
        let p = model.full_forward(&mut fwd, xid)?;
        let pred = fwd.tape.argmax_axis(p, 1);
        correct += pred.iter().zip(b.labels.iter()).filter(|(a, b)| a == b).count();
        total += b.labels.len();
    }
    Ok(correct as f64 / total.max(1) as f64)
}

// ---------------------------------------------------------------------------
// adaptation

/// Everything recorded about one step. One JSONL line per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_tta: f64,
    pub l_fata: f64,
    pub total: f64,
    pub batch_size: usize,
    pub batch_accuracy: f64,
    pub num_selected: usize,
    pub mean_entropy: f64,
    pub labels: Vec<usize>,
    pub predictions: Vec<usize>,
    pub selected: Vec<bool>,
    /// Batch norm saw a single-sample batch in adapt mode.
    pub degenerate_bn: bool,
    /// Loss was non-finite; the update was skipped.
    pub skipped_nonfinite: bool,
}

pub const REPORT_SCHEMA: &str = "fata.report.v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub schema: String,
    pub method: Method,
    pub seed: u64,
    pub config: AdaptConfig,
    pub stream: StreamSpec,
    pub num_classes: usize,
    pub steps: Vec<StepRecord>,
    pub total_samples: usize,
    pub total_correct: usize,
    /// Cumulative online accuracy, pre-update predictions.
    pub accuracy: f64,
    pub total_selected: usize,
    pub selected_fraction: f64,
    pub per_class_selected: Vec<u64>,
    pub mean_prediction_entropy: f64,
    /// Steps at which one class exceeded 90% of the predictions in the
    /// trailing 50-step window.
    pub collapse_steps: Vec<usize>,
}

/// Windowed mode-share tracker for collapse detection.
struct CollapseMonitor {
    window: VecDeque<Vec<usize>>,
    counts: Vec<u64>,
    total: u64,
    flagged: Vec<usize>,
}

const COLLAPSE_WINDOW: usize = 50;
const COLLAPSE_SHARE: f64 = 0.9;

impl CollapseMonitor {
    fn new(num_classes: usize) -> Self {
        CollapseMonitor {
            window: VecDeque::new(),
            counts: vec![0; num_classes],
            total: 0,
            flagged: Vec::new(),
        }
    }

    fn push(&mut self, step: usize, predictions: &[usize]) {
        self.window.push_back(predictions.to_vec());
        for &p in predictions {
            self.counts[p] += 1;
        }
        self.total += predictions.len() as u64;
        if self.window.len() > COLLAPSE_WINDOW {
            let old = self.window.pop_front().expect("window non-empty");
            for &p in &old {
                self.counts[p] -= 1;
            }
            self.total -= old.len() as u64;
        }
        if self.window.len() == COLLAPSE_WINDOW && self.total > 0 {
            let max = *self.counts.iter().max().expect("non-empty counts");
            if max as f64 / self.total as f64 > COLLAPSE_SHARE {
                self.flagged.push(step);
            }
        }
    }
}

/// One adaptation step. Parameter updates touch only what the forward bound
/// with gradient enabled, i.e. normalization affine parameters.
#[allow(clippy::too_many_arguments)]
pub fn adapt_step(
    model: &FataModel,
    store: &mut ParamStore,
    aug: &mut AugState,
    opt: &mut Sgd,
    sel_cfg: &SelectionConfig,
    cfg: &AdaptConfig,
    batch: &Batch,
    step: usize,
) -> Result<StepRecord> {
    let num_classes = model.num_classes();

    if cfg.method == Method::NoAdapt {
        // direct evaluation; no losses, no update
        let mut fwd = Forward::new(store, Mode::Eval);
        let xid = fwd.input(batch.x.clone(), &batch.shape)?;
        let p = model.full_forward(&mut fwd, xid)?;
        let sel = SelectionOutcome::evaluate(fwd.tape.data(p), num_classes, sel_cfg);
        let predictions = fwd.tape.argmax_axis(p, 1);
        return Ok(finish_record(
            step,
            LossBundle::new(0.0, 0.0),
            batch,
            predictions,
            sel,
            false,
            false,
        ));
    }

    let i = model.aug_position;
    let mut fwd = Forward::new(store, Mode::Adapt);
    let xid = fwd.input(batch.x.clone(), &batch.shape)?;

    // shared trunk, original head, selection
    let z = model.forward_to(&mut fwd, xid, i)?;
    let p_orig = model.forward_from(&mut fwd, z, i)?;
    let sel = SelectionOutcome::evaluate(fwd.tape.data(p_orig), num_classes, sel_cfg);
    let y_hat = fwd.tape.argmax_axis(p_orig, 1);

    // channel statistics into the EMA, then the augmented head
    let mu_t = augment::channel_mean(&mut fwd.tape, z)?;
    let mu = fwd.tape.data(mu_t).to_vec();
    let (b, c) = (fwd.tape.shape(z)[0], fwd.tape.shape(z)[1]);
    let ds = if cfg.ema_on_selected_only {
        let rows: Vec<f64> = (0..b)
            .filter(|&r| sel.mask[r])
            .flat_map(|r| mu[r * c..(r + 1) * c].to_vec())
            .collect();
        let kept = rows.len() / c;
        if kept == 0 {
            None
        } else {
            Some(augment::delta_sigma(&rows, kept, c))
        }
    } else {
        Some(augment::delta_sigma(&mu, b, c))
    };
    if let Some(ds) = ds {
        aug.observe(&ds);
    }
    let z_aug = augment::fata_augment(&mut fwd.tape, z, aug)?;
    let p_aug = model.forward_from(&mut fwd, z_aug, i)?;

    // losses
    let tape = &mut fwd.tape;
    let l_tta: Option<TensorId> = match cfg.method {
        Method::FataOnly => None,
        _ => Some(losses::entropy_min_loss(tape, p_orig, &sel, cfg.reduction)?),
    };
    let l_aug: Option<TensorId> = match cfg.method {
        Method::EntMin => None,
        Method::EntMinFata | Method::FataOnly => {
            Some(losses::fata_loss(tape, p_aug, &y_hat, &sel, cfg.reduction)?)
        }
        Method::SimpleAug => Some(losses::simple_aug_loss(tape, p_aug, &sel, cfg.reduction)?),
        Method::Mse => Some(losses::mse_aug_loss(
            tape,
            p_aug,
            p_orig,
            &sel,
            cfg.reduction,
            cfg.mse_both_grad,
        )?),
        Method::SimpleCe => {
            Some(losses::simple_ce_loss(tape, p_aug, p_orig, &sel, cfg.reduction)?)
        }
        Method::NoAdapt => unreachable!("handled above"),
    };
    let total = match (l_tta, l_aug) {
        (Some(a), Some(b)) => losses::total_loss(tape, a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("at least one loss term per method"),
    };

    let bundle = LossBundle::new(
        l_tta.map_or(0.0, |t| tape.scalar_value(t)),
        l_aug.map_or(0.0, |t| tape.scalar_value(t)),
    );
    let predictions = y_hat;

    // non-finite loss: record and keep going without touching parameters
    if !bundle.total.is_finite() {
        let degenerate = fwd.bn_degenerate;
        return Ok(finish_record(step, bundle, batch, predictions, sel, degenerate, true));
    }

    fwd.tape.backward(total)?;
    let grads = fwd.parameter_grads();
    let degenerate = fwd.bn_degenerate;
    drop(fwd);
    opt.step(store, &grads);

    Ok(finish_record(step, bundle, batch, predictions, sel, degenerate, false))
}

fn finish_record(
    step: usize,
    bundle: LossBundle,
    batch: &Batch,
    predictions: Vec<usize>,
    sel: SelectionOutcome,
    degenerate_bn: bool,
    skipped_nonfinite: bool,
) -> StepRecord {
    let correct = predictions
        .iter()
        .zip(batch.labels.iter())
        .filter(|(a, b)| a == b)
        .count();
    let n = batch.labels.len();
    StepRecord {
        step,
        l_tta: bundle.l_tta,
        l_fata: bundle.l_fata,
        total: bundle.total,
        batch_size: n,
        batch_accuracy: correct as f64 / n.max(1) as f64,
        num_selected: sel.num_selected(),
        mean_entropy: sel.entropy.iter().sum::<f64>() / n.max(1) as f64,
        labels: batch.labels.clone(),
        predictions,
        selected: sel.mask,
        degenerate_bn,
        skipped_nonfinite,
    }
}

/// Runs one full episode over a stream. The caller owns the (mutable) model
/// parameters; pass a fresh copy per episode.
pub fn run_scenario(
    model: &FataModel,
    store: &mut ParamStore,
    pool: &Pool,
    stream: &StreamSpec,
    cfg: &AdaptConfig,
) -> Result<AdaptReport> {
    cfg.validate()?;
    let batches = crate::data::make_stream(pool, stream)?;
    let sel_cfg = cfg.selection(model.num_classes());
    let mut aug = AugState::new(model.aug_channels(), cfg.lambda_ema, cfg.sigma_n, cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, store.len());
    let mut monitor = CollapseMonitor::new(model.num_classes());

    let mut steps = Vec::with_capacity(batches.len());
    let mut per_class_selected = vec![0u64; model.num_classes()];
    let (mut total_samples, mut total_correct, mut total_selected) = (0usize, 0usize, 0usize);
    let mut entropy_sum = 0.0;

    for (si, batch) in batches.iter().enumerate() {
        let rec = adapt_step(model, store, &mut aug, &mut opt, &sel_cfg, cfg, batch, si)?;
        total_samples += rec.batch_size;
        total_correct += rec
            .predictions
            .iter()
            .zip(rec.labels.iter())
            .filter(|(a, b)| a == b)
            .count();
        total_selected += rec.num_selected;
        entropy_sum += rec.mean_entropy * rec.batch_size as f64;
        for (lbl, sel) in rec.labels.iter().zip(rec.selected.iter()) {
            if *sel {
                per_class_selected[*lbl] += 1;
            }
        }
        monitor.push(si, &rec.predictions);
        steps.push(rec);
    }

    Ok(AdaptReport {
        schema: REPORT_SCHEMA.to_string(),
        method: cfg.method,
        seed: cfg.seed,
        config: cfg.clone(),
        stream: stream.clone(),
        num_classes: model.num_classes(),
        steps,
        total_samples,
        total_correct,
        accuracy: total_correct as f64 / total_samples.max(1) as f64,
        total_selected,
        selected_fraction: total_selected as f64 / total_samples.max(1) as f64,
        per_class_selected,
        mean_prediction_entropy: entropy_sum / total_samples.max(1) as f64,
        collapse_steps: monitor.flagged,
    })
}

// ---------------------------------------------------------------------------
// selection histogram

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub label: String,
    pub lo: u64,
    /// Inclusive upper bound; open-ended when absent.
    pub hi: Option<u64>,
    pub num_classes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionHistogram {
    pub per_class: Vec<u64>,
    pub buckets: Vec<HistogramBucket>,
}

const BUCKET_EDGES: [(u64, Option<u64>); 6] = [
    (0, Some(0)),
    (1, Some(5)),
    (6, Some(10)),
    (11, Some(20)),
    (21, Some(50)),
    (51, None),
];

/// Buckets classes by how often their samples were selected. The buckets
/// partition the classes: counts sum to the number of classes.
pub fn selection_histogram(report: &AdaptReport) -> SelectionHistogram {
    let per_class = report.per_class_selected.clone();
    let buckets = BUCKET_EDGES
        .iter()
        .map(|&(lo, hi)| {
            let n = per_class
                .iter()
                .filter(|&&c| c >= lo && hi.is_none_or(|h| c <= h))
                .count() as u64;
            let label = match hi {
                Some(h) if h == lo => format!("{lo}"),
                Some(h) => format!("{lo}-{h}"),
                None => format!("{lo}+"),
            };
            HistogramBucket { label, lo, hi, num_classes: n }
        })
        .collect();
    SelectionHistogram { per_class, buckets }
}
