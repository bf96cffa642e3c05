//! Ground-truth leave-one-out machinery: exact counterfactual replays and
//! rank-agreement metrics for validating the influence estimates on small
//! problems. Feasible only at desk scale — every instance costs a full
//! replay of the chosen window.

use std::io::Write;
use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::{InfluenceScores, QueryVector};
use crate::model::{self, ModelSpec, ParamVector};
use crate::parallel;
use crate::trainer::{replay, SgdStepRecord};

/// Exact leave-one-out outcome for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    pub id: usize,
    /// `⟨u, θ_without_j − θ⟩`, no approximation.
    pub true_influence: f64,
    pub param_diff_norm: f64,
    /// `val_loss(θ_without_j) − val_loss(θ)`.
    pub val_loss_delta: f64,
}

/// Replays the window once without `j` and compares against the factual
/// endpoint. `factual_final` and `base_val_loss` are shared across calls;
/// compute them once (or use [`loo_all`]).
#[allow(clippy::too_many_arguments)]
pub fn loo_true_influence(
    spec: &ModelSpec,
    ds: &Dataset,
    records: &[SgdStepRecord],
    start: &ParamVector,
    factual_final: &ParamVector,
    base_val_loss: f64,
    query: &QueryVector,
    val: &Dataset,
    j: usize,
) -> Result<LooResult> {
    let counter = replay(spec, ds, records, start, Some(j))?;
    let mut diff = counter.clone();
    diff.axpy(-1.0, factual_final);
    let val_loss = model::dataset_loss(spec, &counter, val)?;
    Ok(LooResult {
        id: j,
        true_influence: query.u.dot(&diff),
        param_diff_norm: diff.norm(),
        val_loss_delta: val_loss - base_val_loss,
    })
}

/// Exhaustive leave-one-out over every id in `ds` (ascending), replaying the
/// given window from `start`. Replays for different ids are independent and
/// run in parallel; results come back in id order.
pub fn loo_all(
    spec: &ModelSpec,
    ds: &Dataset,
    records: &[SgdStepRecord],
    start: &ParamVector,
    query: &QueryVector,
    val: &Dataset,
) -> Result<Vec<LooResult>> {
    let factual = replay(spec, ds, records, start, None)?;
    let base_val_loss = model::dataset_loss(spec, &factual, val)?;
    let mut ids: Vec<usize> = ds.ids().collect();
    ids.sort_unstable();
    parallel::try_map_ordered(&ids, |&j| {
        loo_true_influence(spec, ds, records, start, &factual, base_val_loss, query, val, j)
    })
}

/// Agreement between estimated and true influence.
#[derive(Debug, Clone, PartialEq)]
pub struct Agreement {
    pub kendall_tau: f64,
    pub pearson: f64,
    /// Fraction of instances whose estimate has the same sign as the truth.
    pub sign_match: f64,
}

/// Tie-adjusted Kendall rank correlation (τ-b). O(n²) pair counting, which
/// is plenty at oracle scale.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as f64;
    let denom = ((n0 - ties_x as f64) * (n0 - ties_y as f64)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (concordant - discordant) as f64 / denom
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Compares estimated scores against leave-one-out ground truth. The id sets
/// must match exactly.
pub fn rank_agreement(est: &InfluenceScores, truth: &[LooResult]) -> Result<Agreement> {
    if est.scores.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} estimates vs {} oracle results",
            est.scores.len(),
            truth.len()
        )));
    }
    let mut xs = Vec::with_capacity(truth.len());
    let mut ys = Vec::with_capacity(truth.len());
    let mut signs = 0usize;
    for r in truth {
        let e = est
            .scores
            .get(&r.id)
            .ok_or_else(|| Error::invalid(format!("no estimate for id {}", r.id)))?;
        xs.push(*e);
        ys.push(r.true_influence);
        if e.signum() == r.true_influence.signum() {
            signs += 1;
        }
    }
    Ok(Agreement {
        kendall_tau: kendall_tau_b(&xs, &ys),
        pearson: pearson(&xs, &ys),
        sign_match: signs as f64 / truth.len() as f64,
    })
}

/// Side-by-side oracle CSV: truth plus both estimation modes.
pub const ORACLE_CSV_HEADER: &str = "id,true_influence,est_stored,est_final_only,val_loss_delta";

pub fn write_oracle_csv(
    path: impl AsRef<Path>,
    truth: &[LooResult],
    stored: &InfluenceScores,
    final_only: &InfluenceScores,
) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(ORACLE_CSV_HEADER);
    out.push('\n');
    for r in truth {
        let s = stored.scores.get(&r.id).copied().unwrap_or(f64::NAN);
        let f = final_only.scores.get(&r.id).copied().unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e}\n",
            r.id, r.true_influence, s, f, r.val_loss_delta
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheView;
    use crate::dataset::gen_blobs;
    use crate::influence::ParamSource;
    use crate::trainer::{make_schedule, TrainConfig};
    use crate::{derive_seed, seed_tags};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::collections::BTreeMap;

    fn scores_from(vals: &[(usize, f64)]) -> InfluenceScores {
        InfluenceScores {
            scores: vals.iter().copied().collect::<BTreeMap<usize, f64>>(),
            mode: ParamSource::StoredParams,
            steps_traced: 1,
        }
    }

    fn truth_from(vals: &[(usize, f64)]) -> Vec<LooResult> {
        vals.iter()
            .map(|&(id, t)| LooResult {
                id,
                true_influence: t,
                param_diff_norm: t.abs(),
                val_loss_delta: t,
            })
            .collect()
    }

    #[test]
    fn perfect_agreement_and_inversion() {
        let vals = [(0usize, -2.0), (1, 0.5), (2, 3.0), (3, -0.1)];
        let est = scores_from(&vals);
        let truth = truth_from(&vals);
        let a = rank_agreement(&est, &truth).unwrap();
        assert_eq!(a.kendall_tau, 1.0);
        assert!((a.pearson - 1.0).abs() < 1e-12);
        assert_eq!(a.sign_match, 1.0);

        let flipped: Vec<(usize, f64)> = vals.iter().map(|&(id, v)| (id, -v)).collect();
        let a = rank_agreement(&scores_from(&flipped), &truth).unwrap();
        assert_eq!(a.kendall_tau, -1.0);
        assert!((a.pearson + 1.0).abs() < 1e-12);
        assert_eq!(a.sign_match, 0.0);
    }

    #[test]
    fn random_permutations_have_small_tau() {
        // Monte Carlo under the null: for n = 100, |τ| ≤ 0.2 is ≈ 3σ, so at
        // least 95 of 100 seeded trials must land inside.
        let base: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let mut inside = 0;
        for _ in 0..100 {
            let mut perm = base.clone();
            perm.shuffle(&mut rng);
            if kendall_tau_b(&base, &perm).abs() <= 0.2 {
                inside += 1;
            }
        }
        assert!(inside >= 95, "only {inside}/100 within 0.2");
    }

    #[test]
    fn tau_b_handles_ties() {
        let x = [1.0, 1.0, 2.0, 3.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        let tau = kendall_tau_b(&x, &y);
        assert!(tau > 0.8 && tau < 1.0, "{tau}");
        assert_eq!(kendall_tau_b(&[1.0, 1.0], &[2.0, 3.0]), 0.0);
    }

    #[test]
    fn mismatched_id_sets_are_rejected() {
        let est = scores_from(&[(0, 1.0), (1, 2.0)]);
        let truth = truth_from(&[(0, 1.0), (2, 2.0)]);
        assert!(rank_agreement(&est, &truth).is_err());
        let truth = truth_from(&[(0, 1.0)]);
        assert!(rank_agreement(&est, &truth).is_err());
    }

    #[test]
    fn zero_lr_gives_zero_influence() {
        let ds = gen_blobs(8, 2, 3, 5.0, 2).unwrap();
        let spec = ModelSpec::logistic_regression(3, 2);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 1,
            batch_size: 4,
            seed: 6,
            ..TrainConfig::default()
        };
        let ids: Vec<usize> = ds.ids().collect();
        let schedule = make_schedule(&ids, &cfg).unwrap();
        let start = spec.init_params(derive_seed(cfg.seed, seed_tags::INIT));
        let query = QueryVector {
            u: spec.init_params(1),
            origin: "arbitrary".into(),
        };
        let results = loo_all(&spec, &ds, schedule.records(), &start, &query, &ds).unwrap();
        assert_eq!(results.len(), ds.len());
        for r in &results {
            assert_eq!(r.true_influence, 0.0);
            assert_eq!(r.param_diff_norm, 0.0);
            assert_eq!(r.val_loss_delta, 0.0);
        }
    }

    #[test]
    fn interpolated_instance_has_negligible_influence() {
        // Far-separated blobs trained to saturation: per-example gradients
        // vanish, so leaving one out changes nothing measurable.
        let ds = gen_blobs(8, 2, 2, 40.0, 4).unwrap();
        let spec = ModelSpec::logistic_regression(2, 2);
        let cfg = TrainConfig {
            lr: 0.5,
            epochs: 60,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let out = crate::trainer::train(&spec, &ds, &cfg, None).unwrap();
        let ids: Vec<usize> = ds.ids().collect();
        let schedule = make_schedule(&ids, &cfg).unwrap();
        let query = crate::influence::query_from_validation(&spec, &out.final_params, &ds).unwrap();
        // Last-epoch window from the factual trajectory's own epoch entry.
        let start = out.cache.step_params(out.cache.header().last_epoch_start()).unwrap();
        let r = loo_true_influence(
            &spec,
            &ds,
            schedule.last_epoch(),
            &start,
            &crate::trainer::replay(&spec, &ds, schedule.last_epoch(), &start, None).unwrap(),
            0.0,
            &query,
            &ds,
            0,
        )
        .unwrap();
        assert!(r.true_influence.abs() <= 1e-10, "{}", r.true_influence);
    }

    #[test]
    fn exhaustive_loo_is_finite_and_reproducible() {
        let ds = gen_blobs(16, 2, 3, 4.0, 3).unwrap();
        let spec = ModelSpec::logistic_regression(3, 2);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        let ids: Vec<usize> = ds.ids().collect();
        let schedule = make_schedule(&ids, &cfg).unwrap();
        let start = spec.init_params(derive_seed(cfg.seed, seed_tags::INIT));
        let query = QueryVector {
            u: spec.init_params(2),
            origin: "arbitrary".into(),
        };
        let a = loo_all(&spec, &ds, schedule.records(), &start, &query, &ds).unwrap();
        let b = loo_all(&spec, &ds, schedule.records(), &start, &query, &ds).unwrap();
        assert_eq!(a.len(), 32);
        for (ra, rb) in a.iter().zip(&b) {
            assert!(ra.true_influence.is_finite());
            assert!(ra.param_diff_norm >= 0.0);
            assert_eq!(ra.true_influence.to_bits(), rb.true_influence.to_bits());
            assert_eq!(ra.val_loss_delta.to_bits(), rb.val_loss_delta.to_bits());
        }
    }
}
