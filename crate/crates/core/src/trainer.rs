//! Deterministic minibatch SGD with full step logging, policy-controlled
//! checkpointing, and counterfactual replay with one instance excluded.
//!
//! The update is `θ ← θ − (η_t/|S_t|) Σ_{i∈S_t} g(z_i; θ)`, with the
//! per-example gradients summed in the batch's listed order. Factual
//! training and counterfactual replay share the same step function, so a
//! replay with no exclusion is bit-identical to training.

use std::io::Write;
use std::path::Path;

use crate::cache::{CacheHeader, CheckpointPolicy, FloatWidth, InfluenceCache};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::{derive_seed, seed_tags};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Training-loss ceiling; anything above is treated as divergence.
const DIVERGENCE_LIMIT: f64 = 1e6;

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub policy: CheckpointPolicy,
    /// Storage width for cached checkpoints; training math is always f64.
    pub width: FloatWidth,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            epochs: 20,
            batch_size: 32,
            seed: 0,
            policy: CheckpointPolicy::LastEpoch,
            width: FloatWidth::F32,
        }
    }
}

impl TrainConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.batch_size > n {
            return Err(Error::invalid(format!(
                "batch size {} exceeds dataset size {n}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

/// One logged SGD step: global index, the instance ids of its minibatch (in
/// visit order), and the learning rate used.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdStepRecord {
    pub step: u64,
    pub indices: Vec<usize>,
    pub lr: f64,
}

/// The full step plan of a run: per-epoch shuffles without replacement, so
/// each epoch's batches partition the training ids exactly once.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    records: Vec<SgdStepRecord>,
    pub steps_per_epoch: usize,
    pub n: usize,
    pub epochs: usize,
}

impl Schedule {
    pub fn records(&self) -> &[SgdStepRecord] {
        &self.records
    }

    /// Records of the final epoch only.
    pub fn last_epoch(&self) -> &[SgdStepRecord] {
        &self.records[(self.epochs - 1) * self.steps_per_epoch..]
    }
}

/// `T = ceil(N / batch)`: SGD steps per epoch under epoch-partition batching.
pub fn steps_per_epoch(n: usize, batch: usize) -> Result<usize> {
    if n == 0 || batch == 0 {
        return Err(Error::invalid("steps_per_epoch needs positive N and batch size"));
    }
    Ok(n.div_ceil(batch))
}

/// Builds the step plan for `ids` under `cfg`: independent shuffle per
/// epoch (seeded from `cfg.seed`), constant learning rate, final batch of
/// each epoch possibly partial.
pub fn make_schedule(ids: &[usize], cfg: &TrainConfig) -> Result<Schedule> {
    cfg.validate(ids.len())?;
    let n = ids.len();
    let t = steps_per_epoch(n, cfg.batch_size)?;
    let mut records = Vec::with_capacity(t * cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = ids.to_vec();
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, seed_tags::SHUFFLE_BASE + epoch as u64));
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            records.push(SgdStepRecord {
                step,
                indices: chunk.to_vec(),
                lr: cfg.lr,
            });
            step += 1;
        }
    }
    Ok(Schedule {
        records,
        steps_per_epoch: t,
        n,
        epochs: cfg.epochs,
    })
}

/// Applies one SGD step in place. Returns the mean loss over the examples
/// actually used, or `None` when the exclusion empties the batch (the
/// update is then a no-op). The divisor is always the recorded `|S_t|`.
fn sgd_step(
    spec: &ModelSpec,
    ds: &Dataset,
    theta: &mut ParamVector,
    record: &SgdStepRecord,
    exclude: Option<usize>,
) -> Result<Option<f64>> {
    let used: Vec<usize> = record
        .indices
        .iter()
        .copied()
        .filter(|&id| Some(id) != exclude)
        .collect();
    if used.is_empty() {
        return Ok(None);
    }
    let batch = ds.gather(&used)?;
    let (loss_sum, grad_sum) = model::batch_loss_grad_sum(spec, theta, &batch)?;
    let mean_loss = loss_sum / used.len() as f64;
    if !mean_loss.is_finite() || mean_loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            step: record.step,
            loss: mean_loss,
        });
    }
    theta.axpy(-record.lr / record.indices.len() as f64, &grad_sum);
    Ok(Some(mean_loss))
}

/// Replays a slice of step records from `start`, optionally dropping one
/// instance from every batch that contains it. Deterministic; shared by
/// training, counterfactual replay, and the leave-one-out oracle.
pub fn replay(
    spec: &ModelSpec,
    ds: &Dataset,
    records: &[SgdStepRecord],
    start: &ParamVector,
    exclude: Option<usize>,
) -> Result<ParamVector> {
    if let Some(id) = exclude {
        if ds.by_id(id).is_none() {
            return Err(Error::UnknownId(id));
        }
    }
    let mut theta = start.clone();
    for record in records {
        sgd_step(spec, ds, &mut theta, record, exclude)?;
    }
    Ok(theta)
}

/// Where a counterfactual replay begins.
#[derive(Debug, Clone, Copy)]
pub enum ReplayStart<'a> {
    /// Replay the whole schedule from the seeded initialization.
    FromInit,
    /// Replay only the last epoch, starting from the given (stored)
    /// epoch-entry parameters.
    FromLastEpochStart(&'a ParamVector),
}

/// Counterfactual SGD: identical replay of `schedule` with `exclude`
/// dropped from any batch containing it; the update divisor stays the
/// original batch size.
pub fn counterfactual_train(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    schedule: &Schedule,
    exclude: Option<usize>,
    start: ReplayStart<'_>,
) -> Result<ParamVector> {
    match start {
        ReplayStart::FromInit => {
            let init = spec.init_params(derive_seed(cfg.seed, seed_tags::INIT));
            replay(spec, ds, schedule.records(), &init, exclude)
        }
        ReplayStart::FromLastEpochStart(theta) => {
            replay(spec, ds, schedule.last_epoch(), theta, exclude)
        }
    }
}

/// Per-epoch evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

/// Per-epoch training metrics, evaluated on the full datasets after each
/// epoch completes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for row in &self.epochs {
            let val = row.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{:.12},{:.6},{}\n",
                row.epoch, row.train_loss, row.train_acc, val
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Result of a logged training run.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Final parameters at full f64 precision.
    pub final_params: ParamVector,
    pub log: TrainLog,
    /// The training log ready for persistence; checkpoints are already
    /// rounded to the configured storage width.
    pub cache: InfluenceCache,
}

/// Trains from the seeded initialization. See [`train_from`].
pub fn train(spec: &ModelSpec, ds: &Dataset, cfg: &TrainConfig, val: Option<&Dataset>) -> Result<TrainOutput> {
    let init = spec.init_params(derive_seed(cfg.seed, seed_tags::INIT));
    train_from(spec, ds, cfg, init, val)
}

/// Runs minibatch SGD from `init`, logging every step and collecting
/// parameter checkpoints per `cfg.policy`. Aborts with a diagnostic if the
/// loss diverges.
pub fn train_from(
    spec: &ModelSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    init: ParamVector,
    val: Option<&Dataset>,
) -> Result<TrainOutput> {
    if init.len() != spec.param_count() {
        return Err(Error::dim(format!(
            "init vector of length {}, spec needs {}",
            init.len(),
            spec.param_count()
        )));
    }
    let ids: Vec<usize> = ds.ids().collect();
    let schedule = make_schedule(&ids, cfg)?;
    let t = schedule.steps_per_epoch;
    let last_epoch_start = ((cfg.epochs - 1) * t) as u64;

    let mut theta = init;
    let mut step_checkpoints: Vec<ParamVector> = Vec::new();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        for record in &schedule.records()[epoch * t..(epoch + 1) * t] {
            let keep = match cfg.policy {
                CheckpointPolicy::All => true,
                CheckpointPolicy::LastEpoch => record.step >= last_epoch_start,
                CheckpointPolicy::FinalOnly => false,
            };
            if keep {
                step_checkpoints.push(theta.clone());
            }
            sgd_step(spec, ds, &mut theta, record, None)?;
        }
        log.epochs.push(EpochStats {
            epoch,
            train_loss: model::dataset_loss(spec, &theta, ds)?,
            train_acc: model::predict_accuracy(spec, &theta, ds)?,
            val_acc: val.map(|v| model::predict_accuracy(spec, &theta, v)).transpose()?,
        });
    }

    let header = CacheHeader {
        p: spec.param_count() as u64,
        n: ds.len() as u64,
        d: ds.dim() as u32,
        c: ds.classes() as u32,
        epochs: cfg.epochs as u32,
        steps_per_epoch: t as u32,
        batch_size: cfg.batch_size as u32,
        total_steps: schedule.records().len() as u64,
        width: cfg.width,
        policy: cfg.policy,
    };
    let first_step = match cfg.policy {
        CheckpointPolicy::All | CheckpointPolicy::FinalOnly => 0,
        CheckpointPolicy::LastEpoch => last_epoch_start,
    };
    let cache = InfluenceCache::new(header, schedule.records().to_vec(), step_checkpoints, first_step, &theta)?;
    Ok(TrainOutput {
        final_params: theta,
        log,
        cache,
    })
}
