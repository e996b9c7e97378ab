//! Training and evaluation.
//!
//! The objective is MAE plus the capsule L2 penalty, minimized with RMSprop
//! after global-norm clipping. Batches are visited in a seeded shuffled
//! order; per-example gradients may be computed in parallel but are always
//! summed in example order, so a fixed seed reproduces every log line and
//! checkpoint bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::TrainConfig;
use super::data::{dataset_dims, load_jsonl, Sample};
use super::metrics::{self, MetricsReport};
use super::optim::{clip_global_norm, global_norm, RmsProp, RmsPropConfig};
use crate::error::{Error, Result};
use crate::model::{GraphCage, Strategy};

pub const LOG_FILE: &str = "train.log";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, Serialize)]
struct LogHeader {
    optimizer: &'static str,
    #[serde(flatten)]
    rmsprop: RmsPropConfig,
    clip: f64,
    batch_size: usize,
    epochs: usize,
    lambda: f64,
    seed: u64,
    strategy: Strategy,
    train_examples: usize,
    val_examples: usize,
    parameters: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean absolute error over the epoch's training examples, measured
    /// before each batch's update.
    pub train_mae: f64,
    /// Mean capsule penalty over the epoch's batches.
    pub train_penalty: f64,
    /// `train_mae + train_penalty`.
    pub train_total: f64,
    pub val_mae: f64,
    pub max_grad_norm: f64,
    pub clipped_batches: usize,
}

/// Per-batch statistics passed to the observer of [`train`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub epoch: usize,
    pub batch: usize,
    pub mae: f64,
    pub penalty: f64,
    /// Global gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Receives progress during [`train`]; both hooks default to no-ops.
pub trait Observer {
    fn batch(&mut self, _stats: &BatchStats) {}
    /// Called with the header and then each epoch line as soon as it exists.
    fn log_line(&mut self, _line: &str) {}
}

impl Observer for () {}

pub struct TrainOutcome {
    /// Model with the lowest validation MAE seen after any epoch.
    pub best: GraphCage,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
    /// Header followed by one JSON line per epoch.
    pub log: Vec<String>,
}

pub(crate) type Grads = Vec<Option<Vec<f64>>>;

pub(crate) fn add_grads(acc: &mut Grads, g: Grads) {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => {
                for (x, y) in a.iter_mut().zip(g) {
                    *x += y;
                }
            }
            (None, Some(g)) => *a = Some(g),
            (_, None) => {}
        }
    }
}

/// Predictions for every sample, in order.
pub fn predict_all(model: &GraphCage, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.bundle))
        .collect()
}

pub fn evaluate(model: &GraphCage, samples: &[Sample]) -> Result<MetricsReport> {
    let preds = predict_all(model, samples)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.label).collect();
    metrics::compute(&preds, &labels)
}

/// Rejects datasets whose dimensions or lengths the model cannot take.
pub fn check_dataset(model: &GraphCage, samples: &[Sample], name: &str) -> Result<()> {
    let dims = dataset_dims(samples).map_err(|e| Error::Dataset(format!("{name}: {e}")))?;
    if dims != model.config().dims() {
        return Err(Error::Dataset(format!(
            "{name} has feature dimensions {dims:?} (text, audio, vision), config expects {:?}",
            model.config().dims()
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        model
            .check_bundle(&s.bundle)
            .map_err(|e| Error::Dataset(format!("{name} example {i}: {e}")))?;
    }
    Ok(())
}

fn non_finite(model: &GraphCage, epoch: usize, batch: usize) -> Error {
    let param = model
        .params()
        .first_non_finite()
        .map(|p| p.to_string())
        .unwrap_or_else(|| "none (all parameters finite)".into());
    Error::NonFinite { epoch, batch, param }
}

/// Trains from a fresh model initialized with `cfg.seed`.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    observer: &mut dyn Observer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = GraphCage::new(cfg.model(), cfg.seed)?;
    check_dataset(&model, train_set, "training set")?;
    check_dataset(&model, val_set, "validation set")?;

    let rms = RmsPropConfig {
        lr: cfg.lr,
        decay: cfg.rms_decay,
        eps: cfg.rms_eps,
    };
    let mut opt = RmsProp::new(rms, model.params());
    let header = LogHeader {
        optimizer: "rmsprop",
        rmsprop: rms,
        clip: cfg.clip,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lambda: cfg.lambda,
        seed: cfg.seed,
        strategy: cfg.strategy,
        train_examples: train_set.len(),
        val_examples: val_set.len(),
        parameters: model.params().numel(),
    };
    let mut log = vec![serde_json::to_string(&header)?];
    observer.log_line(&log[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, GraphCage)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut abs_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut max_norm: f64 = 0.0;
        let mut clipped = 0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let weight = 1.0 / idx.len() as f64;
            let per_example: Vec<(f64, f64, Grads)> = idx
                .par_iter()
                .map(|&i| {
                    let s = &train_set[i];
                    model.example_gradients(&s.bundle, s.label, weight)
                })
                .collect::<Result<_>>()?;
            let (penalty, pen_grads) = model.penalty_gradients(cfg.lambda)?;
            let mut grads: Grads = vec![None; model.params().len()];
            let mut batch_abs = 0.0;
            for (_, err, g) in per_example {
                batch_abs += err;
                add_grads(&mut grads, g);
            }
            add_grads(&mut grads, pen_grads);
            let mae = batch_abs * weight;
            if !(mae + penalty).is_finite() {
                return Err(non_finite(&model, epoch, b + 1));
            }
            let norm = clip_global_norm(&mut grads, cfg.clip);
            if !norm.is_finite() {
                return Err(non_finite(&model, epoch, b + 1));
            }
            let clipped_norm = global_norm(&grads);
            opt.step(model.params_mut(), &grads)?;
            observer.batch(&BatchStats {
                epoch,
                batch: b + 1,
                mae,
                penalty,
                grad_norm: norm,
                clipped_norm,
            });
            abs_sum += batch_abs;
            penalty_sum += penalty;
            max_norm = max_norm.max(norm);
            clipped += usize::from(norm > cfg.clip);
        }
        let val_mae = evaluate(&model, val_set)?.mae;
        if !val_mae.is_finite() {
            return Err(non_finite(&model, epoch, batches.len()));
        }
        let train_mae = abs_sum / train_set.len() as f64;
        let train_penalty = penalty_sum / batches.len() as f64;
        let entry = EpochLog {
            epoch,
            train_mae,
            train_penalty,
            train_total: train_mae + train_penalty,
            val_mae,
            max_grad_norm: max_norm,
            clipped_batches: clipped,
        };
        log.push(serde_json::to_string(&entry)?);
        observer.log_line(log.last().expect("just pushed"));
        epochs.push(entry);
        if best.as_ref().is_none_or(|(v, _, _)| val_mae < *v) {
            best = Some((val_mae, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        epochs,
        log,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub strategy: Strategy,
    pub seed: u64,
    pub best_epoch: usize,
    pub val: MetricsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricsReport>,
}

/// Paths written by [`run`].
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            log: dir.join(LOG_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            metrics: dir.join(METRICS_FILE),
        }
    }
}

/// Appends log lines to a file as they arrive.
struct LogFile {
    path: PathBuf,
    file: fs::File,
    error: Option<std::io::Error>,
}

impl LogFile {
    fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            file: fs::File::create(path).map_err(|e| Error::io(path, e))?,
            error: None,
        })
    }

    fn finish(self) -> Result<()> {
        match self.error {
            Some(e) => Err(Error::io(&self.path, e)),
            None => Ok(()),
        }
    }
}

impl Observer for LogFile {
    fn log_line(&mut self, line: &str) {
        if self.error.is_none() {
            if let Err(e) = writeln!(self.file, "{line}").and_then(|_| self.file.flush()) {
                self.error = Some(e);
            }
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads the configured datasets, trains, and writes the log, the best
/// checkpoint and its metrics (validation, plus test when configured) to
/// `out_dir`.
pub fn run(cfg: &TrainConfig, out_dir: &Path) -> Result<(RunReport, GraphCage)> {
    let train_set = load_jsonl(&cfg.train_data)?;
    let val_set = load_jsonl(&cfg.val_data)?;
    let test_set = cfg.test_data.as_deref().map(load_jsonl).transpose()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = RunFiles::in_dir(out_dir);
    let mut sink = LogFile::create(&files.log)?;
    let outcome = train(cfg, &train_set, &val_set, &mut sink)?;
    sink.finish()?;
    let val = evaluate(&outcome.best, &val_set)?;
    let test = match &test_set {
        Some(t) => {
            check_dataset(&outcome.best, t, "test set")?;
            Some(evaluate(&outcome.best, t)?)
        }
        None => None,
    };
    let report = RunReport {
        strategy: cfg.strategy,
        seed: cfg.seed,
        best_epoch: outcome.best_epoch,
        val,
        test,
    };

    outcome.best.checkpoint().save(&files.checkpoint)?;
    let mut metrics = serde_json::to_string_pretty(&report)?;
    metrics.push('\n');
    write(&files.metrics, metrics.as_bytes())?;
    Ok((report, outcome.best))
}
