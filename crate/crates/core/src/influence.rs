//! Linear influence estimation by backward retracing of the training log.
//!
//! For a query direction `u` (here: the mean validation-loss gradient at the
//! final parameters), the score of instance `j` approximates
//! `⟨u, θ_without_j − θ⟩`, a first-order estimate of how the validation loss
//! would change had `j` been absent. Negative score ⇒ removing `j` is
//! estimated to reduce validation loss, i.e. `j` is harmful.
//!
//! The retrace walks the last epoch's steps from the final one backward,
//! carrying `u`. At each step `t` it first credits every batch member
//! `j ∈ S_t` with `(η_t/|S_t|)·⟨u, g(z_j; θ_src)⟩`, then pulls `u` through
//! the step's propagator: `u ← u − (η_t/|S_t|)·H(S_t; θ_src)·u` (the
//! minibatch Hessian is symmetric, so the transposed propagator is itself).
//! The credit uses `u` *before* the propagation at the same step: term `t`
//! of the unrolled sum carries the propagator product over the steps
//! strictly after `t`.
//!
//! `θ_src` is the stored per-step checkpoint in `StoredParams` mode, and the
//! final parameters everywhere — gradients and Hessians alike — in
//! `FinalParamsOnly` mode, which is what makes the single-checkpoint cache
//! sufficient.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::cache::{CacheView, CheckpointPolicy};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, ParamVector};
use crate::parallel;

/// Where the retrace reads model parameters from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSource {
    /// Per-step checkpoints `θ^(t)`; needs an `All` or `LastEpoch` cache.
    StoredParams,
    /// The final parameters for every step; any cache suffices.
    FinalParamsOnly,
}

impl std::str::FromStr for ParamSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stored" => Ok(ParamSource::StoredParams),
            "final_only" => Ok(ParamSource::FinalParamsOnly),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected stored|final_only)"
            ))),
        }
    }
}

impl std::fmt::Display for ParamSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParamSource::StoredParams => "stored",
            ParamSource::FinalParamsOnly => "final_only",
        };
        f.write_str(s)
    }
}

/// How far back the retrace reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceWindow {
    /// The last epoch only (the standard trace for both modes).
    LastEpoch,
    /// Every step of every epoch; needs an `All` cache. Intended for oracle
    /// studies, not routine scoring.
    AllEpochs,
}

/// Direction in parameter space against which influence is measured.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector {
    pub u: ParamVector,
    /// Human-readable description of how `u` was built.
    pub origin: String,
}

/// Mean validation-loss gradient at `θ_final`, in fixed instance order.
pub fn query_from_validation(spec: &ModelSpec, theta_final: &ParamVector, val: &Dataset) -> Result<QueryVector> {
    let refs: Vec<&crate::dataset::Instance> = val.instances().iter().collect();
    let u = model::batch_grad(spec, theta_final, &refs)?;
    Ok(QueryVector {
        u,
        origin: format!("validation-mean-gradient(n={})", val.len()),
    })
}

/// Per-instance influence estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceScores {
    /// Instance id → accumulated score; one entry per id that appeared in a
    /// traced step.
    pub scores: BTreeMap<usize, f64>,
    pub mode: ParamSource,
    pub steps_traced: usize,
}

impl InfluenceScores {
    pub const CSV_HEADER: &'static str = "id,score,rank,mode";

    /// Rows in rank order (most negative first).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for (rank, (id, score)) in rank_instances(self).into_iter().enumerate() {
            out.push_str(&format!("{id},{score:.12e},{rank},{}\n", self.mode));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Backward linear influence estimation over the last epoch. See the module
/// docs for the recursion; `lie_backward_windowed` exposes the full-history
/// variant for `All` caches.
pub fn lie_backward<V: CacheView>(
    spec: &ModelSpec,
    ds: &Dataset,
    cache: &V,
    query: &QueryVector,
    mode: ParamSource,
) -> Result<InfluenceScores> {
    lie_backward_windowed(spec, ds, cache, query, mode, TraceWindow::LastEpoch)
}

pub fn lie_backward_windowed<V: CacheView>(
    spec: &ModelSpec,
    ds: &Dataset,
    cache: &V,
    query: &QueryVector,
    mode: ParamSource,
    window: TraceWindow,
) -> Result<InfluenceScores> {
    let header = cache.header();
    if spec.param_count() as u64 != header.p {
        return Err(Error::dim(format!(
            "model has {} parameters, cache header says {}",
            spec.param_count(),
            header.p
        )));
    }
    if query.u.len() as u64 != header.p {
        return Err(Error::dim(format!(
            "query vector of length {}, cache p = {}",
            query.u.len(),
            header.p
        )));
    }
    if ds.len() as u64 != header.n || ds.dim() as u32 != header.d {
        return Err(Error::dim(format!(
            "dataset (N={}, d={}) does not match cache header (N={}, d={})",
            ds.len(),
            ds.dim(),
            header.n,
            header.d
        )));
    }
    match mode {
        ParamSource::StoredParams => {
            if header.policy == CheckpointPolicy::FinalOnly {
                return Err(Error::PolicyMismatch(
                    "stored mode needs an all or last_epoch cache".into(),
                ));
            }
        }
        ParamSource::FinalParamsOnly => {}
    }
    if window == TraceWindow::AllEpochs && header.policy != CheckpointPolicy::All {
        return Err(Error::PolicyMismatch(
            "all-epochs trace needs an all-policy cache".into(),
        ));
    }

    let records = match window {
        TraceWindow::LastEpoch => {
            let start = header.last_epoch_start();
            &cache.records()[start as usize..]
        }
        TraceWindow::AllEpochs => cache.records(),
    };

    let final_params = cache.final_params()?;
    let mut u = query.u.clone();
    let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, record) in records.iter().enumerate().rev() {
        let theta_src = match mode {
            ParamSource::StoredParams => cache.step_params(record.step)?,
            ParamSource::FinalParamsOnly => final_params.clone(),
        };
        let batch = ds.gather(&record.indices)?;
        let scale = record.lr / record.indices.len() as f64;

        // (a) credit each batch member against the current u.
        let dots = parallel::try_map_ordered(&batch, |z| {
            model::grad(spec, &theta_src, z).map(|g| g.dot(&u))
        })?;
        for (z, dot) in batch.iter().zip(&dots) {
            *scores.entry(z.id).or_insert(0.0) += scale * dot;
        }

        // (b) pull u back through this step's propagator. Skipped at the
        // window's first step, where the updated u would never be read.
        if i > 0 {
            let hv = model::hvp(spec, &theta_src, &batch, &u)?;
            u.axpy(-scale, &hv);
            if !u.is_finite() {
                return Err(Error::NonFinitePropagation { step: record.step });
            }
        }
    }

    Ok(InfluenceScores {
        scores,
        mode,
        steps_traced: records.len(),
    })
}

/// Orders instances most-negative-score first (the removal order for data
/// cleansing); ties break toward the smaller id.
pub fn rank_instances(scores: &InfluenceScores) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = scores.scores.iter().map(|(&id, &s)| (id, s)).collect();
    out.sort_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("influence scores are finite")
            .then(a.0.cmp(&b.0))
    });
    out
}
