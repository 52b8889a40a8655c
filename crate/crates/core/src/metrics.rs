//! Accuracy and ranking metrics with global, per-user and per-group views.
//!
//! Ranking metrics score each test user over a candidate list made of the
//! user's test items plus seeded negatives: items from the split's catalogue
//! the user never interacted with. Relevance is binary (test items) and DCG
//! uses a `log2(rank + 1)` discount. Candidate lists depend only on the
//! split and the evaluation seed, never on the model, so reports of models
//! trained on differently minimised data stay comparable.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::Deserialize;

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::models::Recommender;
use crate::rng::HarnessRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(try_from = "String")]
pub enum MetricKind {
    Rmse,
    Mae,
    Ndcg(usize),
    HitRate(usize),
}

impl MetricKind {
    /// True for error metrics, where lower values are better.
    pub fn lower_is_better(self) -> bool {
        matches!(self, MetricKind::Rmse | MetricKind::Mae)
    }

    fn is_ranking(self) -> bool {
        !self.lower_is_better()
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricKind::Rmse => write!(f, "rmse"),
            MetricKind::Mae => write!(f, "mae"),
            MetricKind::Ndcg(k) => write!(f, "ndcg@{k}"),
            MetricKind::HitRate(k) => write!(f, "hit_rate@{k}"),
        }
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "rmse" => return Ok(MetricKind::Rmse),
            "mae" => return Ok(MetricKind::Mae),
            _ => {}
        }
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::config(format!("unknown metric {s:?}")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::config(format!("invalid cutoff in metric {s:?}")))?;
        if k == 0 {
            return Err(Error::config(format!("metric cutoff must be >= 1 in {s:?}")));
        }
        match name {
            "ndcg" => Ok(MetricKind::Ndcg(k)),
            "hit_rate" => Ok(MetricKind::HitRate(k)),
            _ => Err(Error::config(format!("unknown metric {s:?}"))),
        }
    }
}

impl TryFrom<String> for MetricKind {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        value.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    GlobalMean,
    PerUser,
    PerGroup,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::GlobalMean => "global_mean",
            Aggregation::PerUser => "per_user",
            Aggregation::PerGroup => "per_group",
        })
    }
}

/// Label used for test users that carry no group in a grouped dataset.
pub const UNGROUPED: &str = "(none)";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Sampled negatives per user for ranking metrics.
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            negatives: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReportValue {
    Global(f64),
    Scoped(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric: MetricKind,
    pub aggregation: Aggregation,
    pub value: ReportValue,
    /// Test units evaluated: rating triples for error metrics, users for
    /// ranking metrics.
    pub n_evaluated: usize,
    pub n_skipped_cold: usize,
}

impl EvalReport {
    /// The global value, or the uniform mean over scopes.
    pub fn summary(&self) -> f64 {
        match &self.value {
            ReportValue::Global(v) => *v,
            ReportValue::Scoped(map) => map.values().sum::<f64>() / map.len() as f64,
        }
    }

    pub fn scoped(&self) -> Option<&BTreeMap<String, f64>> {
        match &self.value {
            ReportValue::Scoped(m) => Some(m),
            ReportValue::Global(_) => None,
        }
    }
}

/// Header of the report CSV layout.
pub const REPORT_CSV_HEADER: [&str; 6] = ["metric", "aggregation", "scope", "value", "n_evaluated", "n_skipped"];

/// One row per scope: `metric,aggregation,scope,value,n_evaluated,n_skipped`.
/// Global reports use the scope `all`.
pub fn report_rows(report: &EvalReport) -> Vec<[String; 6]> {
    let row = |scope: &str, value: f64| {
        [
            report.metric.to_string(),
            report.aggregation.to_string(),
            scope.to_owned(),
            value.to_string(),
            report.n_evaluated.to_string(),
            report.n_skipped_cold.to_string(),
        ]
    };
    match &report.value {
        ReportValue::Global(v) => vec![row("all", *v)],
        ReportValue::Scoped(map) => map.iter().map(|(s, v)| row(s, *v)).collect(),
    }
}

pub fn write_reports_csv<W: Write>(reports: &[EvalReport], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(REPORT_CSV_HEADER)?;
    for report in reports {
        for row in report_rows(report) {
            wtr.write_record(&row)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn rmse(errors: &[f64]) -> f64 {
    (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
}

pub fn mae(errors: &[f64]) -> f64 {
    errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64
}

/// NDCG@k with binary relevance.
pub fn ndcg_at_k(ranked: &[String], relevant: &HashSet<&str>, k: usize) -> f64 {
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| relevant.contains(item.as_str()))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..relevant.len().min(k)).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    if ideal > 0.0 {
        dcg / ideal
    } else {
        0.0
    }
}

pub fn hit_rate_at_k(ranked: &[String], relevant: &HashSet<&str>, k: usize) -> f64 {
    let hit = ranked.iter().take(k).any(|item| relevant.contains(item.as_str()));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Candidate list for a ranking evaluation: the user's test items followed
/// by up to `negatives` seeded items the user never interacted with.
pub fn candidates_for<'a>(
    catalogue: &[&'a str],
    seen: &HashSet<&str>,
    user: &str,
    test_items: &[&'a str],
    opts: &EvalOptions,
) -> Vec<&'a str> {
    let mut pool: Vec<&str> = catalogue.iter().copied().filter(|i| !seen.contains(i)).collect();
    let take = opts.negatives.min(pool.len());
    let mut rng = HarnessRng::derived(opts.seed, &format!("negatives/{user}"));
    for j in 0..take {
        let k = j + rng.below((pool.len() - j) as u64) as usize;
        pool.swap(j, k);
    }
    let mut out = test_items.to_vec();
    out.extend_from_slice(&pool[..take]);
    out
}

/// Evaluate a fitted model on the split's test set.
///
/// Test users without training data are scored through the model's
/// fallback, so `n_skipped_cold` is always zero here.
pub fn evaluate<M: Recommender + ?Sized>(
    model: &M,
    split: &Split,
    metric: MetricKind,
    aggregation: Aggregation,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let test = &split.test;
    if test.is_empty() {
        return Err(Error::data("test set is empty"));
    }
    if aggregation == Aggregation::PerGroup && !test.has_groups() {
        return Err(Error::data("per_group aggregation requested on a dataset without groups"));
    }
    let scope_of = |user: &str| -> String {
        match aggregation {
            Aggregation::PerGroup => test.group_of(user).unwrap_or(UNGROUPED).to_owned(),
            _ => user.to_owned(),
        }
    };

    let by_user = test.by_user();
    let (value, n_evaluated) = if metric.is_ranking() {
        let catalogue: Vec<&str> = {
            let set: BTreeSet<&str> = split
                .train
                .interactions()
                .iter()
                .chain(test.interactions())
                .map(|it| it.item.as_str())
                .collect();
            set.into_iter().collect()
        };
        let mut seen: BTreeMap<&str, HashSet<&str>> = BTreeMap::new();
        for it in split.train.interactions().iter().chain(test.interactions()) {
            seen.entry(it.user.as_str()).or_default().insert(it.item.as_str());
        }
        let mut per_user: BTreeMap<String, f64> = BTreeMap::new();
        for (user, profile) in &by_user {
            let test_items: Vec<&str> = profile.iter().map(|it| it.item.as_str()).collect();
            let cands = candidates_for(&catalogue, &seen[user], user, &test_items, opts);
            let relevant: HashSet<&str> = test_items.iter().copied().collect();
            let value = match metric {
                MetricKind::Ndcg(k) => ndcg_at_k(&model.rank(user, &cands, k), &relevant, k),
                MetricKind::HitRate(k) => hit_rate_at_k(&model.rank(user, &cands, k), &relevant, k),
                _ => unreachable!(),
            };
            per_user.insert((*user).to_owned(), value);
        }
        let n = per_user.len();
        let value = match aggregation {
            Aggregation::GlobalMean => ReportValue::Global(per_user.values().sum::<f64>() / n as f64),
            Aggregation::PerUser => ReportValue::Scoped(per_user),
            Aggregation::PerGroup => {
                let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
                for (user, v) in &per_user {
                    let e = acc.entry(scope_of(user)).or_default();
                    e.0 += v;
                    e.1 += 1;
                }
                ReportValue::Scoped(acc.into_iter().map(|(g, (s, c))| (g, s / c as f64)).collect())
            }
        };
        (value, n)
    } else {
        let pointwise = |errors: &[f64]| match metric {
            MetricKind::Rmse => rmse(errors),
            _ => mae(errors),
        };
        let mut scoped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::with_capacity(test.len());
        for it in test.interactions() {
            let err = model.predict(&it.user, &it.item) - it.rating;
            all.push(err);
            if aggregation != Aggregation::GlobalMean {
                scoped.entry(scope_of(&it.user)).or_default().push(err);
            }
        }
        let value = match aggregation {
            Aggregation::GlobalMean => ReportValue::Global(pointwise(&all)),
            _ => ReportValue::Scoped(scoped.into_iter().map(|(s, e)| (s, pointwise(&e))).collect()),
        };
        (value, all.len())
    };

    Ok(EvalReport {
        metric,
        aggregation,
        value,
        n_evaluated,
        n_skipped_cold: 0,
    })
}

/// Orientation-normalised change between two reports; positive means the
/// service improved.
#[derive(Debug, Clone, PartialEq)]
pub enum Improvement {
    Global(f64),
    Scoped {
        deltas: BTreeMap<String, f64>,
        /// Scopes present in only one of the two reports.
        skipped: BTreeSet<String>,
    },
}

fn oriented(metric: MetricKind, before: f64, after: f64) -> f64 {
    if metric.lower_is_better() {
        before - after
    } else {
        after - before
    }
}

pub fn improvement(before: &EvalReport, after: &EvalReport) -> Result<Improvement> {
    if before.metric != after.metric || before.aggregation != after.aggregation {
        return Err(Error::data(format!(
            "cannot compare {} / {} with {} / {}",
            before.metric, before.aggregation, after.metric, after.aggregation
        )));
    }
    let metric = before.metric;
    match (&before.value, &after.value) {
        (ReportValue::Global(b), ReportValue::Global(a)) => Ok(Improvement::Global(oriented(metric, *b, *a))),
        (ReportValue::Scoped(b), ReportValue::Scoped(a)) => {
            let mut deltas = BTreeMap::new();
            let mut skipped = BTreeSet::new();
            for (scope, bv) in b {
                match a.get(scope) {
                    Some(av) => {
                        deltas.insert(scope.clone(), oriented(metric, *bv, *av));
                    }
                    None => {
                        skipped.insert(scope.clone());
                    }
                }
            }
            skipped.extend(a.keys().filter(|s| !b.contains_key(*s)).cloned());
            Ok(Improvement::Scoped { deltas, skipped })
        }
        _ => Err(Error::data("report value shapes differ")),
    }
}

/// True when some metrics report an improvement and others a loss.
///
/// Metric suites may disagree; this only flags it.
pub fn sign_disagreement(improvements: &[(MetricKind, f64)]) -> bool {
    improvements.iter().any(|(_, d)| *d > 0.0) && improvements.iter().any(|(_, d)| *d < 0.0)
}
