//! Compatibility of purposes as correlated metric improvements, disparity of
//! minimisation losses across groups, and the effect of one user's data on
//! everyone else.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::Deserialize;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, improvement, Aggregation, EvalOptions, EvalReport, Improvement, MetricKind};
use crate::minimisation::{apply, MinimisationPlan, Strategy};
use crate::models::{fit, ModelConfig};
use crate::rng::HarnessRng;

/// Minimum number of paired improvement samples for [`compatibility`].
pub const MIN_SAMPLES: usize = 8;

/// A purpose expressed as a model evaluated by a metric on a split.
#[derive(Debug, Clone)]
pub struct Task<'a> {
    pub label: String,
    pub split: &'a Split,
    pub model: ModelConfig,
    pub metric: MetricKind,
}

impl Task<'_> {
    fn report(&self, train: &Dataset, seed: u64, opts: &EvalOptions) -> Result<EvalReport> {
        if train.is_empty() {
            return Err(Error::data(format!("perturbation emptied the training set of {}", self.label)));
        }
        let (model, _) = fit(&self.model, train, seed)?;
        evaluate(&model, self.split, self.metric, Aggregation::GlobalMean, opts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationMode {
    /// Baseline is the full training set; each sample drops a user slice.
    Remove,
    /// Baseline withholds a reserve of users; each sample adds back a slice
    /// of the reserve.
    Add,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSchedule {
    pub mode: PerturbationMode,
    /// Fraction of the user population (or of the reserve, for `Add`) in
    /// each slice.
    pub slice_fraction: f64,
    /// Slices drawn per seed.
    pub slices: usize,
    /// Fraction of users withheld from the `Add` baseline.
    #[serde(default = "default_reserve")]
    pub reserve_fraction: f64,
}

fn default_reserve() -> f64 {
    0.5
}

impl PerturbationSchedule {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.slice_fraction) {
            return Err(Error::config("slice_fraction must lie in (0, 1)"));
        }
        if self.mode == PerturbationMode::Add && !unit(self.reserve_fraction) {
            return Err(Error::config("reserve_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompatibilityThresholds {
    pub r_min: f64,
    pub p_max: f64,
    pub permutations: usize,
}

impl Default for CompatibilityThresholds {
    fn default() -> Self {
        Self {
            r_min: 0.5,
            p_max: 0.05,
            permutations: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Compatible,
    Incompatible,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Compatible => "compatible",
            Verdict::Incompatible => "incompatible",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityReport {
    pub purpose_a: String,
    pub purpose_b: String,
    pub pairs: Vec<(f64, f64)>,
    pub pearson_r: f64,
    pub permutation_p: f64,
    pub verdict: Verdict,
    pub thresholds: CompatibilityThresholds,
    pub seeds: Vec<u64>,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One-sided permutation p-value for positive association:
/// `(1 + #{r_perm >= r_obs}) / (permutations + 1)`.
pub fn permutation_p_value(xs: &[f64], ys: &[f64], r_obs: f64, permutations: usize, seed: u64) -> f64 {
    let mut rng = HarnessRng::derived(seed, "permutation");
    let mut shuffled = ys.to_vec();
    let mut at_least = 0usize;
    for _ in 0..permutations {
        rng.shuffle(&mut shuffled);
        if pearson(xs, &shuffled).is_some_and(|r| r >= r_obs - 1e-12) {
            at_least += 1;
        }
    }
    (1 + at_least) as f64 / (permutations + 1) as f64
}

/// Verdict from paired improvements.
///
/// Compatible iff `r >= r_min` and `p <= p_max`. A correlation above
/// `r_min` that is not significant, or zero variance on either side, is
/// inconclusive; anything below `r_min` is incompatible.
pub fn compatibility_from_pairs(
    purpose_a: &str,
    purpose_b: &str,
    pairs: Vec<(f64, f64)>,
    thresholds: CompatibilityThresholds,
    seeds: Vec<u64>,
) -> Result<CompatibilityReport> {
    if pairs.len() < 3 {
        return Err(Error::data("at least 3 paired samples are needed"));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let perm_seed = seeds.first().copied().unwrap_or(0);
    let (pearson_r, permutation_p, verdict) = match pearson(&xs, &ys) {
        None => (0.0, 1.0, Verdict::Inconclusive),
        Some(r) => {
            let p = permutation_p_value(&xs, &ys, r, thresholds.permutations, perm_seed);
            let verdict = if r >= thresholds.r_min && p <= thresholds.p_max {
                Verdict::Compatible
            } else if r >= thresholds.r_min {
                Verdict::Inconclusive
            } else {
                Verdict::Incompatible
            };
            (r, p, verdict)
        }
    };
    Ok(CompatibilityReport {
        purpose_a: purpose_a.to_owned(),
        purpose_b: purpose_b.to_owned(),
        pairs,
        pearson_r,
        permutation_p,
        verdict,
        thresholds,
        seeds,
    })
}

fn sample_users(pool: &[&str], fraction: f64, rng: &mut HarnessRng) -> BTreeSet<String> {
    let take = ((fraction * pool.len() as f64).round() as usize).clamp(1, pool.len());
    let mut v = pool.to_vec();
    for j in 0..take {
        let k = j + rng.below((v.len() - j) as u64) as usize;
        v.swap(j, k);
    }
    v[..take].iter().map(|s| (*s).to_owned()).collect()
}

/// Correlate the improvements two tasks see under identical data changes.
///
/// Slices are drawn over the union of both tasks' training users, so tasks
/// on different datasets sharing user ids see the same users removed or
/// added. Improvements are measured against the per-seed baseline.
pub fn compatibility(
    task_a: &Task<'_>,
    task_b: &Task<'_>,
    schedule: &PerturbationSchedule,
    seeds: &[u64],
    thresholds: CompatibilityThresholds,
    opts: &EvalOptions,
) -> Result<CompatibilityReport> {
    schedule.validate()?;
    let n_samples = seeds.len() * schedule.slices;
    if n_samples < MIN_SAMPLES {
        return Err(Error::data(format!(
            "compatibility needs at least {MIN_SAMPLES} samples, schedule yields {n_samples}"
        )));
    }
    let users: Vec<&str> = {
        let set: BTreeSet<&str> = task_a
            .split
            .train
            .users()
            .into_iter()
            .chain(task_b.split.train.users())
            .collect();
        set.into_iter().collect()
    };

    let per_seed: Vec<Vec<(f64, f64)>> = seeds
        .par_iter()
        .map(|&seed| -> Result<Vec<(f64, f64)>> {
            let reserve: BTreeSet<String> = match schedule.mode {
                PerturbationMode::Remove => BTreeSet::new(),
                PerturbationMode::Add => {
                    sample_users(&users, schedule.reserve_fraction, &mut HarnessRng::derived(seed, "reserve"))
                }
            };
            let base_a = task_a.report(&task_a.split.train.without_users(&reserve), seed, opts)?;
            let base_b = task_b.report(&task_b.split.train.without_users(&reserve), seed, opts)?;
            let reserve_pool: Vec<&str> = reserve.iter().map(String::as_str).collect();

            (0..schedule.slices)
                .into_par_iter()
                .map(|j| {
                    let mut rng = HarnessRng::derived(seed, &format!("slice/{j}"));
                    let excluded = match schedule.mode {
                        PerturbationMode::Remove => sample_users(&users, schedule.slice_fraction, &mut rng),
                        PerturbationMode::Add => {
                            let added = sample_users(&reserve_pool, schedule.slice_fraction, &mut rng);
                            reserve.difference(&added).cloned().collect()
                        }
                    };
                    let da = global_delta(&base_a, &task_a.report(&task_a.split.train.without_users(&excluded), seed, opts)?)?;
                    let db = global_delta(&base_b, &task_b.report(&task_b.split.train.without_users(&excluded), seed, opts)?)?;
                    Ok((da, db))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    compatibility_from_pairs(
        &task_a.label,
        &task_b.label,
        per_seed.into_iter().flatten().collect(),
        thresholds,
        seeds.to_vec(),
    )
}

fn global_delta(before: &EvalReport, after: &EvalReport) -> Result<f64> {
    match improvement(before, after)? {
        Improvement::Global(d) => Ok(d),
        Improvement::Scoped { .. } => unreachable!("global reports"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisparityReport {
    pub strategy: String,
    pub metric: MetricKind,
    /// Mean orientation-normalised improvement (full -> minimised) per group;
    /// negative values are losses.
    pub per_group: BTreeMap<String, f64>,
    /// Per-seed improvements, in seed order.
    pub per_seed: BTreeMap<String, Vec<f64>>,
    /// Max minus min of `per_group`.
    pub disparity: f64,
    /// Test users per group.
    pub group_sizes: BTreeMap<String, usize>,
    pub seeds: Vec<u64>,
}

/// Per-group change in service quality when training data is minimised.
pub fn disparity_under_minimisation(
    split: &Split,
    model: &ModelConfig,
    metric: MetricKind,
    strategy: Strategy,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<DisparityReport> {
    if !split.test.has_groups() && !split.train.has_groups() {
        return Err(Error::data("disparity analysis needs a dataset with groups"));
    }
    if seeds.is_empty() {
        return Err(Error::data("disparity analysis needs at least one seed"));
    }
    let groups: BTreeSet<&str> = split
        .train
        .group_map()
        .values()
        .chain(split.test.group_map().values())
        .map(String::as_str)
        .collect();
    let mut group_sizes: BTreeMap<String, usize> = groups.iter().map(|g| ((*g).to_owned(), 0)).collect();
    for g in split.test.group_map().values() {
        *group_sizes.get_mut(g.as_str()).unwrap() += 1;
    }
    if let Some((g, _)) = group_sizes.iter().find(|(_, n)| **n == 0) {
        return Err(Error::data(format!("group {g} has no test users")));
    }

    let per_seed_deltas: Vec<BTreeMap<String, f64>> = seeds
        .par_iter()
        .map(|&seed| {
            let (full, _) = fit(model, &split.train, seed)?;
            let before = evaluate(&full, split, metric, Aggregation::PerGroup, opts)?;
            let reduced = apply(&MinimisationPlan::new(strategy, seed), &split.train)?;
            if reduced.is_empty() {
                return Err(Error::data(format!("{strategy} removed every training interaction")));
            }
            let (small, _) = fit(model, &reduced, seed)?;
            let after = evaluate(&small, split, metric, Aggregation::PerGroup, opts)?;
            match improvement(&before, &after)? {
                Improvement::Scoped { deltas, .. } => Ok(deltas),
                Improvement::Global(_) => unreachable!("per-group reports"),
            }
        })
        .collect::<Result<_>>()?;

    let mut per_seed: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for deltas in &per_seed_deltas {
        for (g, d) in deltas {
            per_seed.entry(g.clone()).or_default().push(*d);
        }
    }
    let per_group: BTreeMap<String, f64> = per_seed
        .iter()
        .map(|(g, v)| (g.clone(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let max = per_group.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_group.values().copied().fold(f64::INFINITY, f64::min);

    Ok(DisparityReport {
        strategy: strategy.to_string(),
        metric,
        per_group,
        per_seed,
        disparity: (max - min).max(0.0),
        group_sizes,
        seeds: seeds.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossUserImpact {
    pub removed: BTreeSet<String>,
    pub metric: MetricKind,
    /// Per remaining test user, orientation-normalised improvement after
    /// the removal.
    pub deltas: BTreeMap<String, f64>,
    pub mean_abs: f64,
    pub max_abs: f64,
}

/// Retrain without the removed users' data and measure how every other
/// test user's service changes.
pub fn cross_user_impact(
    split: &Split,
    model: &ModelConfig,
    metric: MetricKind,
    removed: &BTreeSet<String>,
    seed: u64,
    opts: &EvalOptions,
) -> Result<CrossUserImpact> {
    let known: BTreeSet<&str> = split.train.users().into_iter().chain(split.test.users()).collect();
    if let Some(u) = removed.iter().find(|u| !known.contains(u.as_str())) {
        return Err(Error::data(format!("user {u} is not part of the split")));
    }
    let reduced = split.train.without_users(removed);
    if reduced.is_empty() {
        return Err(Error::data("removing these users empties the training set"));
    }
    let (full, _) = fit(model, &split.train, seed)?;
    let (after_model, _) = fit(model, &reduced, seed)?;
    let before = evaluate(&full, split, metric, Aggregation::PerUser, opts)?;
    let after = evaluate(&after_model, split, metric, Aggregation::PerUser, opts)?;
    let Improvement::Scoped { mut deltas, .. } = improvement(&before, &after)? else {
        unreachable!("per-user reports")
    };
    deltas.retain(|u, _| !removed.contains(u));
    let n = deltas.len().max(1) as f64;
    let mean_abs = deltas.values().map(|d| d.abs()).sum::<f64>() / n;
    let max_abs = deltas.values().map(|d| d.abs()).fold(0.0, f64::max);
    Ok(CrossUserImpact {
        removed: removed.clone(),
        metric,
        deltas,
        mean_abs,
        max_abs,
    })
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";")
}

/// Summary row preceded by a `#` comment recording thresholds and seeds.
pub fn write_compatibility_csv<W: Write>(report: &CompatibilityReport, mut writer: W) -> Result<()> {
    let t = &report.thresholds;
    writeln!(
        writer,
        "# r_min={},p_max={},permutations={},seeds={}",
        t.r_min,
        t.p_max,
        t.permutations,
        join_seeds(&report.seeds)
    )?;
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["purpose_a", "purpose_b", "pearson_r", "permutation_p", "verdict", "n_samples"])?;
    wtr.write_record([
        report.purpose_a.clone(),
        report.purpose_b.clone(),
        report.pearson_r.to_string(),
        report.permutation_p.to_string(),
        report.verdict.to_string(),
        report.pairs.len().to_string(),
    ])?;
    wtr.flush()?;
    Ok(())
}

/// `sample,delta_a,delta_b`
pub fn write_compatibility_samples_csv<W: Write>(report: &CompatibilityReport, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["sample", "delta_a", "delta_b"])?;
    for (i, (a, b)) in report.pairs.iter().enumerate() {
        wtr.write_record([i.to_string(), a.to_string(), b.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `group,test_users,improvement`, preceded by a comment with the strategy,
/// metric, seeds and overall disparity.
pub fn write_disparity_csv<W: Write>(report: &DisparityReport, mut writer: W) -> Result<()> {
    writeln!(
        writer,
        "# strategy={},metric={},seeds={},disparity={}",
        report.strategy,
        report.metric,
        join_seeds(&report.seeds),
        report.disparity
    )?;
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["group", "test_users", "improvement"])?;
    for (g, v) in &report.per_group {
        wtr.write_record([g.clone(), report.group_sizes[g].to_string(), v.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `user,delta`, preceded by a comment with the removal set and summary.
pub fn write_cross_user_csv<W: Write>(impact: &CrossUserImpact, seed: u64, mut writer: W) -> Result<()> {
    writeln!(
        writer,
        "# removed={},metric={},seed={seed},mean_abs={},max_abs={}",
        impact.removed.iter().cloned().collect::<Vec<_>>().join(";"),
        impact.metric,
        impact.mean_abs,
        impact.max_abs
    )?;
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user", "delta"])?;
    for (u, d) in &impact.deltas {
        wtr.write_record([u.clone(), d.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
