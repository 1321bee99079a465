//! Pretraining loop: schedules, optimization, checkpointing, loss logging.
//!
//! Determinism is structural rather than stateful: the example order of epoch
//! k comes from the stream (seed, "order", [k]) and the two views of example
//! i in epoch k from (seed, "aug", [k, i]); nothing carries RNG state across
//! steps. A run resumed from an epoch-boundary checkpoint therefore replays
//! exactly the batches an uninterrupted run would have seen.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::augpipe::{self, AugmentationPolicy, OMEGA_LAYOUT_VERSION};
use crate::checkpoint::{self, RunMeta};
use crate::condproj::ConditioningSpec;
use crate::datahub::Dataset;
use crate::error::{Error, Result};
use crate::model::SslModel;
use crate::nn::{BackboneSpec, Tensor4};
use crate::optim::Sgd;
use crate::rng;
use crate::sslcore::MethodConfig;

/// Optimization-side settings; method and conditioning live in their own
/// specs so the same trainer serves every objective.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 256,
            base_lr: 0.3,
            warmup_epochs: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive and finite"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config("warmup_epochs must be shorter than epochs"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer momentum must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Where a run currently stands; returned to callers and summarized in logs.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Global optimizer steps taken.
    pub step: u64,
    /// Completed epochs; always equals `loss_history.len()`.
    pub epoch: usize,
    /// Rate used by the most recent step.
    pub lr: f64,
    /// Per-epoch mean losses.
    pub loss_history: Vec<f64>,
    pub rng_state: ChaCha8Rng,
}

/// Linear warmup to `base` over `warmup_steps`, then cosine decay to 0 at
/// `total_steps`.
pub fn cosine_lr(base: f64, step: u64, total_steps: u64, warmup_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("total_steps must be positive"));
    }
    if warmup_steps >= total_steps {
        return Err(Error::config("warmup must end before total_steps"));
    }
    if step > total_steps {
        return Err(Error::config(format!("step {step} beyond total_steps {total_steps}")));
    }
    if step < warmup_steps {
        return Ok(base * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Everything pretraining needs besides the data.
#[derive(Debug, Clone)]
pub struct PretrainSpec {
    pub method: MethodConfig,
    pub conditioning: ConditioningSpec,
    pub backbone: BackboneSpec,
    pub augment: AugmentationPolicy,
    pub train: TrainConfig,
}

impl PretrainSpec {
    fn validate(&self, dataset: &Dataset) -> Result<()> {
        self.method.validate(self.train.batch_size)?;
        self.conditioning.validate(self.backbone.widths[3])?;
        self.augment.validate()?;
        self.train.validate()?;
        if dataset.len() < self.train.batch_size {
            return Err(Error::config(format!(
                "dataset has {} examples, fewer than one batch of {}",
                dataset.len(),
                self.train.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub state: TrainState,
}

/// One ready-to-train batch produced by the loader worker.
struct Batch {
    x1: Tensor4<f32>,
    x2: Tensor4<f32>,
    om1: Array2<f32>,
    om2: Array2<f32>,
}

fn build_batch(dataset: &Dataset, indices: &[usize], policy: &AugmentationPolicy, seed: u64, epoch: usize) -> Result<Batch> {
    let n = indices.len();
    let mut v1 = Vec::with_capacity(n);
    let mut v2 = Vec::with_capacity(n);
    let mut om1 = Array2::zeros((n, augpipe::OMEGA_DIM));
    let mut om2 = Array2::zeros((n, augpipe::OMEGA_DIM));
    for (row, &idx) in indices.iter().enumerate() {
        let mut r = rng::stream(seed, "aug", &[epoch as u64, idx as u64]);
        let ((img1, rec1), (img2, rec2)) = augpipe::make_view_pair(&dataset.images[idx], policy, &mut r)?;
        let o1 = augpipe::encode_omega(&rec1, policy).as_f32();
        let o2 = augpipe::encode_omega(&rec2, policy).as_f32();
        for d in 0..augpipe::OMEGA_DIM {
            om1[[row, d]] = o1[d];
            om2[[row, d]] = o2[d];
        }
        v1.push(img1);
        v2.push(img2);
    }
    Ok(Batch { x1: Tensor4::from_images(&v1), x2: Tensor4::from_images(&v2), om1, om2 })
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "order", &[epoch as u64]);
    rng::permutation(&mut r, n)
}

/// Appends one row to the per-epoch loss log, creating it with a header when
/// absent. `epoch` is the 1-based completed-epoch number.
fn log_epoch(path: &Path, epoch: usize, mean_loss: f64, lr: f64, wall_seconds: f64) -> Result<()> {
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "epoch,mean_loss,lr,wall_seconds")?;
    }
    writeln!(f, "{epoch},{mean_loss},{lr},{wall_seconds}")?;
    Ok(())
}

/// Drops stale rows (epoch beyond the checkpoint being resumed) so the log
/// never mixes trajectories.
fn truncate_log(path: &Path, keep_epochs: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            kept.push_str(line);
            kept.push('\n');
            continue;
        }
        let epoch: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(format!("malformed loss log row: {line}")))?;
        if epoch <= keep_epochs {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept)?;
    Ok(())
}

fn meta_for(spec: &PretrainSpec, epoch: usize, step: u64, loss_history: Vec<f64>) -> RunMeta {
    RunMeta {
        method: spec.method.clone(),
        conditioning: spec.conditioning.clone(),
        backbone: spec.backbone.clone(),
        augment: spec.augment.clone(),
        omega_layout_version: OMEGA_LAYOUT_VERSION,
        seed: spec.train.seed,
        epoch,
        step,
        loss_history,
        rng_state: rng::stream(spec.train.seed, "base", &[]),
    }
}

fn same_json<T: serde::Serialize>(a: &T, b: &T) -> bool {
    serde_json::to_value(a).ok() == serde_json::to_value(b).ok()
}

/// Runs (or resumes) pretraining. Checkpoints land in `out_dir` as
/// `ckpt-ep<N>.ckpt`, the loss log as `loss_log.csv`.
pub fn pretrain(
    spec: &PretrainSpec,
    dataset: &Dataset,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<PretrainOutcome> {
    spec.validate(dataset)?;
    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("loss_log.csv");

    let seed = spec.train.seed;
    let steps_per_epoch = (dataset.len() / spec.train.batch_size) as u64;
    let total_steps = steps_per_epoch * spec.train.epochs as u64;
    let warmup_steps = steps_per_epoch * spec.train.warmup_epochs as u64;

    let (mut model, mut optimizer, start_epoch, mut step, mut loss_history);
    match resume_from {
        None => {
            let mut init = rng::stream(seed, "init", &[]);
            model = SslModel::new(&spec.method, &spec.backbone, &spec.conditioning, &mut init)?;
            optimizer = Sgd::new(spec.train.momentum, spec.train.weight_decay);
            start_epoch = 0;
            step = 0;
            loss_history = Vec::new();
            if log_path.exists() {
                std::fs::remove_file(&log_path)?;
            }
        }
        Some(path) => {
            let (m, o, meta) = checkpoint::load_checkpoint(path)?;
            if !(same_json(&meta.method, &spec.method)
                && same_json(&meta.conditioning, &spec.conditioning)
                && same_json(&meta.backbone, &spec.backbone)
                && same_json(&meta.augment, &spec.augment)
                && meta.seed == seed)
            {
                return Err(Error::config(
                    "checkpoint was produced under a different configuration",
                ));
            }
            if meta.epoch >= spec.train.epochs {
                return Err(Error::config(format!(
                    "checkpoint already holds {} epochs; nothing to resume for a {}-epoch run",
                    meta.epoch, spec.train.epochs
                )));
            }
            if meta.step != meta.epoch as u64 * steps_per_epoch {
                return Err(Error::checkpoint(
                    "checkpoint step count disagrees with this dataset/batch geometry",
                ));
            }
            model = m;
            optimizer = o;
            start_epoch = meta.epoch;
            step = meta.step;
            loss_history = meta.loss_history;
            truncate_log(&log_path, start_epoch)?;
        }
    }

    let mut last_lr = 0.0;
    let mut checkpoint_path = out_dir.join(format!("ckpt-ep{start_epoch}.ckpt"));
    for epoch in start_epoch..spec.train.epochs {
        let started = Instant::now();
        let order = epoch_order(seed, epoch, dataset.len());
        let mut epoch_loss = 0.0f64;

        // One loader worker rasterizes view pairs ahead of the optimizer;
        // the bounded channel keeps at most a few batches in flight.
        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(3);
            let order = &order;
            let policy = &spec.augment;
            scope.spawn(move || {
                for b in 0..steps_per_epoch as usize {
                    let lo = b * spec.train.batch_size;
                    let indices = &order[lo..lo + spec.train.batch_size];
                    let batch = build_batch(dataset, indices, policy, seed, epoch);
                    if tx.send(batch).is_err() {
                        return;
                    }
                }
            });
            for _ in 0..steps_per_epoch {
                let batch = rx.recv().expect("loader worker hung up early")?;
                let lr = cosine_lr(spec.train.base_lr, step, total_steps, warmup_steps)?;
                let loss = model.train_step(&batch.x1, &batch.x2, &batch.om1, &batch.om2)? as f64;
                if !loss.is_finite() {
                    let snapshot = out_dir.join("diagnostic-nonfinite.ckpt");
                    let meta = meta_for(spec, epoch, step, loss_history.clone());
                    checkpoint::save_checkpoint(&snapshot, &model, &optimizer, &meta)?;
                    return Err(Error::NonFiniteLoss { step, snapshot });
                }
                optimizer.step(&mut model, lr);
                model.post_step()?;
                epoch_loss += loss;
                last_lr = lr;
                step += 1;
            }
            Ok(())
        })?;

        let mean_loss = epoch_loss / steps_per_epoch as f64;
        loss_history.push(mean_loss);
        log_epoch(&log_path, epoch + 1, mean_loss, last_lr, started.elapsed().as_secs_f64())?;

        let due = spec.train.checkpoint_every != 0 && (epoch + 1) % spec.train.checkpoint_every == 0;
        let last = epoch + 1 == spec.train.epochs;
        if due || last {
            checkpoint_path = out_dir.join(format!("ckpt-ep{}.ckpt", epoch + 1));
            let meta = meta_for(spec, epoch + 1, step, loss_history.clone());
            checkpoint::save_checkpoint(&checkpoint_path, &model, &optimizer, &meta)?;
        }
    }

    Ok(PretrainOutcome {
        checkpoint_path,
        log_path,
        state: TrainState {
            step,
            epoch: spec.train.epochs,
            lr: last_lr,
            loss_history,
            rng_state: rng::stream(seed, "base", &[]),
        },
    })
}
