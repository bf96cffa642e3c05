//! End-to-end data cleansing: score the training set, remove the top-n
//! most-negative instances, retrain from scratch, evaluate — swept over
//! strategies, batch sizes, removal counts, and seeds.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cache::{CacheView, CheckpointPolicy};
use crate::dataset::{Dataset, NoiseReport};
use crate::error::{Error, Result};
use crate::influence::{lie_backward, query_from_validation, rank_instances, ParamSource};
use crate::model::{self, ModelSpec};
use crate::parallel;
use crate::trainer::{train, TrainConfig};
use crate::{derive_seed, seed_tags};

/// Bounds the sweep's worker pool when set to a positive integer.
pub const THREADS_ENV: &str = "INFLUENCE_CLEANSE_THREADS";

/// How instances are picked for removal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Influence scores from per-step checkpoints (last-epoch cache).
    InfluenceStored,
    /// Influence scores from the final parameters alone.
    InfluenceFinalOnly,
    /// Uniformly random removal.
    Random,
    /// Keep everything; the no-removal baseline.
    NoRemoval,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::InfluenceStored,
        Strategy::InfluenceFinalOnly,
        Strategy::Random,
        Strategy::NoRemoval,
    ];
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::InfluenceStored => "influence_stored",
            Strategy::InfluenceFinalOnly => "influence_final_only",
            Strategy::Random => "random",
            Strategy::NoRemoval => "none",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "influence_stored" => Ok(Strategy::InfluenceStored),
            "influence_final_only" => Ok(Strategy::InfluenceFinalOnly),
            "random" => Ok(Strategy::Random),
            "none" => Ok(Strategy::NoRemoval),
            other => Err(Error::invalid(format!(
                "unknown strategy {other:?} (expected influence_stored|influence_final_only|random|none)"
            ))),
        }
    }
}

/// Sweep configuration: the factorial is
/// strategies × batch_sizes × removal_counts × seeds.
#[derive(Debug, Clone)]
pub struct CleanseConfig {
    /// Ascending removal counts; must stay below the training set size.
    pub removal_counts: Vec<usize>,
    pub n_seeds: usize,
    pub strategies: Vec<Strategy>,
    pub batch_sizes: Vec<usize>,
    pub base: TrainConfig,
}

impl CleanseConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::invalid("n_seeds must be at least 1"));
        }
        if self.strategies.is_empty() || self.batch_sizes.is_empty() || self.removal_counts.is_empty() {
            return Err(Error::invalid("strategies, batch_sizes, and removal_counts must be non-empty"));
        }
        if let Some(&bad) = self.removal_counts.iter().find(|&&c| c >= n) {
            return Err(Error::invalid(format!("removal count {bad} not below training size {n}")));
        }
        Ok(())
    }
}

/// Default removal grid: 0 plus 1%, 2%, 5%, 10%, 20% of N.
pub fn default_removal_counts(n: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = [0.0, 0.01, 0.02, 0.05, 0.10, 0.20]
        .iter()
        .map(|f| (f * n as f64).round() as usize)
        .collect();
    counts.sort_unstable();
    counts.dedup();
    counts
}

/// Datasets for one sweep; the noise report (when the training labels were
/// deliberately corrupted) lets the sweep report removed-set recall.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: &'a Dataset,
    pub noise: Option<&'a NoiseReport>,
}

/// Full removal ranking for a trial (most harmful first). `NoRemoval` ranks
/// nothing; `Random` ranks a seeded shuffle; the influence strategies train
/// with the matching cache policy and rank by score.
fn removal_ranking(
    spec: &ModelSpec,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
    strategy: Strategy,
    trial_seed: u64,
) -> Result<Vec<usize>> {
    match strategy {
        Strategy::NoRemoval => Ok(Vec::new()),
        Strategy::Random => {
            let mut ids: Vec<usize> = train_ds.ids().collect();
            ids.sort_unstable();
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(trial_seed, seed_tags::RANDOM_REMOVAL));
            ids.shuffle(&mut rng);
            Ok(ids)
        }
        Strategy::InfluenceStored | Strategy::InfluenceFinalOnly => {
            let (policy, mode) = match strategy {
                Strategy::InfluenceStored => (CheckpointPolicy::LastEpoch, ParamSource::StoredParams),
                _ => (CheckpointPolicy::FinalOnly, ParamSource::FinalParamsOnly),
            };
            let run_cfg = TrainConfig {
                seed: trial_seed,
                policy,
                ..cfg.clone()
            };
            let out = train(spec, train_ds, &run_cfg, None)?;
            // Score from the cache's (storage-width) final parameters so the
            // in-memory path agrees bit-for-bit with a file round trip.
            let theta = out.cache.final_params()?;
            let query = query_from_validation(spec, &theta, val_ds)?;
            let scores = lie_backward(spec, train_ds, &out.cache, &query, mode)?;
            Ok(rank_instances(&scores).into_iter().map(|(id, _)| id).collect())
        }
    }
}

fn retrain_accuracy(
    spec: &ModelSpec,
    cleansed: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
    trial_seed: u64,
) -> Result<f64> {
    let retrain_cfg = TrainConfig {
        seed: derive_seed(trial_seed, seed_tags::RETRAIN),
        policy: CheckpointPolicy::FinalOnly,
        ..cfg.clone()
    };
    let out = train(spec, cleansed, &retrain_cfg, None)?;
    model::predict_accuracy(spec, &out.final_params, test_ds)
}

/// One cleansing trial: train with logging, score, drop the `n` most
/// negative instances, retrain from a fresh derived seed, return test
/// accuracy. With `n = 0` (or `NoRemoval`) this is the plain-training
/// baseline, identical across strategies for the same `trial_seed`.
pub fn cleanse_once(
    spec: &ModelSpec,
    data: &SweepData<'_>,
    cfg: &TrainConfig,
    strategy: Strategy,
    n: usize,
    trial_seed: u64,
) -> Result<f64> {
    if n >= data.train.len() {
        return Err(Error::invalid(format!(
            "cannot remove {n} of {} instances",
            data.train.len()
        )));
    }
    let ranking = removal_ranking(spec, data.train, data.val, cfg, strategy, trial_seed)?;
    let removed: HashSet<usize> = ranking.into_iter().take(n).collect();
    let cleansed = if removed.is_empty() {
        data.train.clone()
    } else {
        data.train.remove_ids(&removed)?
    };
    retrain_accuracy(spec, &cleansed, data.test, cfg, trial_seed)
}

/// Accuracy results for one `(strategy, batch, n)` cell across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveCell {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub n: usize,
    /// `(trial_seed, accuracy)` per seed, in seed order.
    pub raw: Vec<(u64, f64)>,
    pub mean: f64,
    pub std: f64,
}

/// The sweep's aggregated output.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CleanseCurve {
    pub cells: Vec<CurveCell>,
}

/// Removed-set recall of the known-corrupted ids, evaluated at
/// `n = |flipped|` per trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallCell {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub trial_seed: u64,
    pub n: usize,
    pub recall: f64,
}

/// A trial that failed; successful cells are still emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub strategy: Strategy,
    pub batch_size: usize,
    pub trial_seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub curve: CleanseCurve,
    pub recall: Vec<RecallCell>,
    pub failures: Vec<CellFailure>,
}

pub const RAW_CSV_HEADER: &str = "strategy,batch,n,seed,accuracy";
pub const AGGREGATE_CSV_HEADER: &str = "strategy,batch,n,mean,std";
pub const RECALL_CSV_HEADER: &str = "strategy,batch,seed,n,recall";

impl CleanseCurve {
    pub fn to_raw_csv(&self) -> String {
        let mut out = String::from(RAW_CSV_HEADER);
        out.push('\n');
        for cell in &self.cells {
            for (seed, acc) in &cell.raw {
                out.push_str(&format!(
                    "{},{},{},{seed},{acc:.12}\n",
                    cell.strategy, cell.batch_size, cell.n
                ));
            }
        }
        out
    }

    pub fn to_aggregate_csv(&self) -> String {
        let mut out = String::from(AGGREGATE_CSV_HEADER);
        out.push('\n');
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{:.12},{:.12}\n",
                cell.strategy, cell.batch_size, cell.n, cell.mean, cell.std
            ));
        }
        out
    }

    pub fn cell(&self, strategy: Strategy, batch_size: usize, n: usize) -> Option<&CurveCell> {
        self.cells
            .iter()
            .find(|c| c.strategy == strategy && c.batch_size == batch_size && c.n == n)
    }
}

pub fn recall_csv(cells: &[RecallCell]) -> String {
    let mut out = String::from(RECALL_CSV_HEADER);
    out.push('\n');
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            c.strategy, c.batch_size, c.trial_seed, c.n, c.recall
        ));
    }
    out
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The reporting convention for aggregated accuracies.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.6} ± {std:.6}")
}

struct TrialResult {
    strategy: Strategy,
    batch_size: usize,
    trial_seed: u64,
    /// `(n, accuracy)` per removal count.
    accuracies: Vec<(usize, f64)>,
    recall: Option<RecallCell>,
}

/// Full factorial sweep. Trials (one per strategy × batch × seed) are
/// independent jobs on a worker pool bounded by `INFLUENCE_CLEANSE_THREADS`;
/// within a trial the ranking is computed once and reused for every `n`, so
/// removal sets are nested prefixes. Trial seeds are `base.seed + seed index`,
/// deliberately independent of strategy and batch so the `n = 0` baseline
/// coincides across strategies.
pub fn cleanse_sweep(spec: &ModelSpec, cfg: &CleanseConfig, data: &SweepData<'_>) -> Result<SweepOutcome> {
    cfg.validate(data.train.len())?;
    let mut jobs = Vec::new();
    for &strategy in &cfg.strategies {
        for &batch_size in &cfg.batch_sizes {
            for seed_index in 0..cfg.n_seeds {
                jobs.push((strategy, batch_size, cfg.base.seed + seed_index as u64));
            }
        }
    }

    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    let results: Vec<Result<TrialResult>> = parallel::with_thread_limit(threads, || {
        parallel::map_ordered(&jobs, |&(strategy, batch_size, trial_seed)| {
            run_trial(spec, cfg, data, strategy, batch_size, trial_seed)
        })
    });

    let mut curve = CleanseCurve::default();
    let mut recall = Vec::new();
    let mut failures = Vec::new();
    for (job, result) in jobs.iter().zip(results) {
        match result {
            Ok(trial) => {
                for (n, acc) in &trial.accuracies {
                    match curve.cells.iter_mut().find(|c| {
                        c.strategy == trial.strategy && c.batch_size == trial.batch_size && c.n == *n
                    }) {
                        Some(cell) => cell.raw.push((trial.trial_seed, *acc)),
                        None => curve.cells.push(CurveCell {
                            strategy: trial.strategy,
                            batch_size: trial.batch_size,
                            n: *n,
                            raw: vec![(trial.trial_seed, *acc)],
                            mean: 0.0,
                            std: 0.0,
                        }),
                    }
                }
                if let Some(r) = trial.recall {
                    recall.push(r);
                }
            }
            Err(e) => failures.push(CellFailure {
                strategy: job.0,
                batch_size: job.1,
                trial_seed: job.2,
                error: e.to_string(),
            }),
        }
    }
    for cell in &mut curve.cells {
        let accs: Vec<f64> = cell.raw.iter().map(|&(_, a)| a).collect();
        let (mean, std) = mean_std(&accs);
        cell.mean = mean;
        cell.std = std;
    }
    curve.cells.sort_by(|a, b| {
        a.strategy
            .to_string()
            .cmp(&b.strategy.to_string())
            .then(a.batch_size.cmp(&b.batch_size))
            .then(a.n.cmp(&b.n))
    });
    Ok(SweepOutcome {
        curve,
        recall,
        failures,
    })
}

fn run_trial(
    spec: &ModelSpec,
    cfg: &CleanseConfig,
    data: &SweepData<'_>,
    strategy: Strategy,
    batch_size: usize,
    trial_seed: u64,
) -> Result<TrialResult> {
    let trial_cfg = TrainConfig {
        batch_size,
        ..cfg.base.clone()
    };
    let ranking = removal_ranking(spec, data.train, data.val, &trial_cfg, strategy, trial_seed)?;

    let recall = data.noise.and_then(|report| {
        let n_noise = report.flipped_ids.len();
        if n_noise == 0 || n_noise > ranking.len() {
            return None;
        }
        let hit = ranking[..n_noise]
            .iter()
            .filter(|id| report.flipped_ids.contains(id))
            .count();
        Some(RecallCell {
            strategy,
            batch_size,
            trial_seed,
            n: n_noise,
            recall: hit as f64 / n_noise as f64,
        })
    });

    let mut accuracies = Vec::with_capacity(cfg.removal_counts.len());
    for &n in &cfg.removal_counts {
        let removed: HashSet<usize> = ranking.iter().take(n).copied().collect();
        let cleansed = if removed.is_empty() {
            data.train.clone()
        } else {
            data.train.remove_ids(&removed)?
        };
        let acc = retrain_accuracy(spec, &cleansed, data.test, &trial_cfg, trial_seed)?;
        accuracies.push((n, acc));
    }
    Ok(TrialResult {
        strategy,
        batch_size,
        trial_seed,
        accuracies,
        recall,
    })
}
