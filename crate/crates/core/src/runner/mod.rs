//! Config-driven experiment grids.
//!
//! [`run`] executes every (model, plan point, seed) fit in a rayon pool,
//! evaluates each configured metric on it, and writes:
//!
//! ```text
//! <output_dir>/
//!   cells.csv              model,plan,budget,seed,metric,aggregation,value,status
//!   reports.csv            per-scope rows of every successful evaluation
//!   curves/summary.csv     one row per learning curve with fit and stop decision
//!   curves/m<i>_p<j>_<metric>_<aggregation>.csv       budget,seed,metric_value
//!   curves/m<i>_p<j>_<metric>_<aggregation>.fit.csv   a,b,c,residual
//!   analysis/*.csv         when the [analysis] subsections are present
//!   manifest.txt           key=value provenance, then the config verbatim
//! ```
//!
//! Results are collected in grid order regardless of completion order, and
//! floats are written in shortest round-trip form, so a rerun of the same
//! config bytes reproduces the directory byte for byte.

mod config;

pub use config::{
    AnalysisSection, CompatibilitySection, CrossUserSection, DatasetSection, DisparitySection, EvaluationSection,
    ExperimentConfig, MetricSection, PlanPoint, PlanSection, SplitSection, StoppingSection, TaskSection,
    UnlearningSection, OUTPUT_DIR_ENV,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::analysis::{
    compatibility, cross_user_impact, disparity_under_minimisation, write_compatibility_csv,
    write_compatibility_samples_csv, write_cross_user_csv, write_disparity_csv, CompatibilityReport, Task,
};
use crate::dataset::{split, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, report_rows, EvalOptions, EvalReport, MetricKind, REPORT_CSV_HEADER};
use crate::minimisation::{
    apply_chain, build_learning_curve, decide_stop, write_curve_csv, write_fit_csv, CurvePoint, LearningCurve,
    MinimisationPlan, StopDecision, StoppingRule,
};
use crate::models::{fit, ModelConfig};
use crate::unlearning::{
    append_ledger_csv, cost_report, probe_grid, verify_exactness, withdraw, CostLedger, CostReport, CostDelta,
    Exactness, ModelState, WithdrawalRequest,
};

pub const HARNESS_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CELLS_CSV_HEADER: [&str; 8] = ["model", "plan", "budget", "seed", "metric", "aggregation", "value", "status"];

/// One row of `cells.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub model: String,
    pub plan: String,
    pub budget: String,
    pub seed: u64,
    pub metric: MetricKind,
    pub aggregation: crate::metrics::Aggregation,
    /// `None` when the cell failed.
    pub value: Option<f64>,
    /// `ok`, or a short failure description.
    pub status: String,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.value.is_some()
    }

    fn record(&self) -> [String; 8] {
        [
            self.model.clone(),
            self.plan.clone(),
            self.budget.clone(),
            self.seed.to_string(),
            self.metric.to_string(),
            self.aggregation.to_string(),
            self.value.map(|v| v.to_string()).unwrap_or_default(),
            self.status.clone(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub cells: Vec<CellResult>,
    pub curves: usize,
}

impl RunSummary {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_ok()).count()
    }
}

fn eval_options(config: &ExperimentConfig) -> EvalOptions {
    EvalOptions {
        negatives: config.evaluation.negatives,
        seed: config.evaluation.seed,
    }
}

pub fn load_split(config: &ExperimentConfig) -> Result<Split> {
    load_split_of(config, &config.dataset)
}

fn load_split_of(config: &ExperimentConfig, dataset: &DatasetSection) -> Result<Split> {
    let data = dataset.load(&config.base_dir)?;
    split(&data, config.split.scheme()?, config.split.seed)
}

struct FitJob<'a> {
    model_index: usize,
    model: &'a ModelConfig,
    plan_index: usize,
    plan: &'a PlanSection,
    point: PlanPoint,
    seed: u64,
}

fn failure_status(e: &Error) -> String {
    match e {
        Error::Diverged { epoch } => format!("diverged@epoch{epoch}"),
        other => format!("failed: {}", other.to_string().replace([',', '\n', '"'], " ")),
    }
}

fn run_job(job: &FitJob<'_>, split: &Split, config: &ExperimentConfig) -> (Vec<CellResult>, Vec<EvalReport>) {
    let cell = |metric: &MetricSection, value: Option<f64>, status: String| CellResult {
        model: job.model.label(),
        plan: job.plan.label(),
        budget: job.point.budget.clone(),
        seed: job.seed,
        metric: metric.kind,
        aggregation: metric.aggregation,
        value,
        status,
    };
    let fitted = (|| {
        let mut plans: Vec<MinimisationPlan> = job
            .plan
            .chain()?
            .into_iter()
            .map(|s| MinimisationPlan::new(s, job.seed))
            .collect();
        plans.push(MinimisationPlan::new(job.point.strategy, job.seed));
        let reduced = apply_chain(&plans, &split.train)?;
        if reduced.is_empty() {
            return Err(Error::data("minimisation removed every training interaction"));
        }
        Ok(fit(job.model, &reduced, job.seed)?.0)
    })();
    let model = match fitted {
        Ok(m) => m,
        Err(e) => {
            let status = failure_status(&e);
            return (config.metrics.iter().map(|m| cell(m, None, status.clone())).collect(), vec![]);
        }
    };
    let opts = eval_options(config);
    let mut cells = Vec::new();
    let mut reports = Vec::new();
    for m in &config.metrics {
        match evaluate(&model, split, m.kind, m.aggregation, &opts) {
            Ok(report) if report.summary().is_finite() => {
                cells.push(cell(m, Some(report.summary()), "ok".into()));
                reports.push(report);
            }
            Ok(_) => cells.push(cell(m, None, "failed: non-finite metric".into())),
            Err(e) => cells.push(cell(m, None, failure_status(&e))),
        }
    }
    (cells, reports)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn file_stem(metric: MetricKind) -> String {
    metric.to_string().replace('@', "")
}

/// Execute the configured grid and write the result directory.
///
/// Cell failures are recorded in `cells.csv` and do not stop the run; check
/// [`RunSummary::failed_cells`].
pub fn run(config: &ExperimentConfig) -> Result<RunSummary> {
    config.validate()?;
    let split = load_split(config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out.join("curves"))?;

    let expanded: Vec<Vec<PlanPoint>> = config.plans.iter().map(PlanSection::expand).collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (mi, model) in config.models.iter().enumerate() {
        for (pi, plan) in config.plans.iter().enumerate() {
            for point in &expanded[pi] {
                for &seed in &config.seeds {
                    jobs.push(FitJob {
                        model_index: mi,
                        model,
                        plan_index: pi,
                        plan,
                        point: point.clone(),
                        seed,
                    });
                }
            }
        }
    }
    let results: Vec<(Vec<CellResult>, Vec<EvalReport>)> =
        jobs.par_iter().map(|job| run_job(job, &split, config)).collect();

    let mut cells_w = csv::Writer::from_writer(create(&out.join("cells.csv"))?);
    cells_w.write_record(CELLS_CSV_HEADER)?;
    let mut reports_w = csv::Writer::from_writer(create(&out.join("reports.csv"))?);
    reports_w.write_record(["model", "plan", "budget", "seed"].into_iter().chain(REPORT_CSV_HEADER))?;
    for (job, (cells, reports)) in jobs.iter().zip(&results) {
        for c in cells {
            cells_w.write_record(c.record())?;
        }
        for r in reports {
            for row in report_rows(r) {
                let prefix = [job.model.label(), job.plan.label(), job.point.budget.clone(), job.seed.to_string()];
                reports_w.write_record(prefix.iter().chain(row.iter()))?;
            }
        }
    }
    cells_w.flush()?;
    reports_w.flush()?;

    let curves = write_curves(config, &jobs, &results, out)?;
    write_analysis(config, &split, out)?;

    let cells: Vec<CellResult> = results.into_iter().flat_map(|(c, _)| c).collect();
    let summary = RunSummary {
        output_dir: out.clone(),
        cells,
        curves,
    };
    write_manifest(config, &summary, out)?;
    Ok(summary)
}

fn write_curves(
    config: &ExperimentConfig,
    jobs: &[FitJob<'_>],
    results: &[(Vec<CellResult>, Vec<EvalReport>)],
    out: &Path,
) -> Result<usize> {
    // (model, plan, metric entry) -> points
    let mut points: BTreeMap<(usize, usize, usize), Vec<CurvePoint>> = BTreeMap::new();
    let mut failed: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for (job, (cells, _)) in jobs.iter().zip(results) {
        let Some(budget) = job.point.numeric_budget else {
            continue;
        };
        if job.plan.budgets.len() < 3 {
            continue;
        }
        for (ei, c) in cells.iter().enumerate() {
            let key = (job.model_index, job.plan_index, ei);
            match c.value {
                Some(value) => points.entry(key).or_default().push(CurvePoint {
                    budget,
                    seed: job.seed,
                    value,
                }),
                None => *failed.entry(key).or_default() += 1,
            }
        }
    }
    let keys: BTreeSet<_> = points.keys().chain(failed.keys()).copied().collect();

    let mut summary = csv::Writer::from_writer(create(&out.join("curves/summary.csv"))?);
    summary.write_record([
        "file", "model", "plan", "metric", "aggregation", "a", "b", "c", "residual", "failed_cells", "stop",
    ])?;
    for &(mi, pi, ei) in &keys {
        let mut pts = points.remove(&(mi, pi, ei)).unwrap_or_default();
        pts.sort_by_key(|p| (p.budget, config.seeds.iter().position(|s| *s == p.seed)));
        let mut curve = LearningCurve::from_points(pts);
        curve.failed_cells = failed.get(&(mi, pi, ei)).copied().unwrap_or(0);
        let metric = &config.metrics[ei];
        let stem = format!("m{mi}_p{pi}_{}_{}", file_stem(metric.kind), metric.aggregation);
        write_curve_csv(&curve, create(&out.join(format!("curves/{stem}.csv")))?)?;
        write_fit_csv(&curve, create(&out.join(format!("curves/{stem}.fit.csv")))?)?;

        let rule = StoppingRule {
            epsilon: config.stopping.epsilon,
            grid: config.plans[pi].budgets.clone(),
        };
        let stop = match decide_stop(&curve, &rule) {
            Ok(StopDecision::StopAt(k)) => k.to_string(),
            Ok(StopDecision::Continue) => "continue".to_owned(),
            Err(_) => "unfit".to_owned(),
        };
        let fit_cols = match &curve.fit {
            Some(f) => [f.a, f.b, f.c, f.residual].map(|x| x.to_string()),
            None => Default::default(),
        };
        let mut row = vec![
            stem,
            config.models[mi].label(),
            config.plans[pi].label(),
            metric.kind.to_string(),
            metric.aggregation.to_string(),
        ];
        row.extend(fit_cols);
        row.push(curve.failed_cells.to_string());
        row.push(stop);
        summary.write_record(&row)?;
    }
    summary.flush()?;
    Ok(keys.len())
}

fn write_analysis(config: &ExperimentConfig, split: &Split, out: &Path) -> Result<()> {
    let a = &config.analysis;
    if a.compatibility.is_none() && a.disparity.is_none() && a.cross_user.is_none() {
        return Ok(());
    }
    let dir = out.join("analysis");
    fs::create_dir_all(&dir)?;
    let opts = eval_options(config);
    if a.compatibility.is_some() {
        let report = compatibility_with_split(config, split)?;
        write_compatibility_csv(&report, create(&dir.join("compatibility.csv"))?)?;
        write_compatibility_samples_csv(&report, create(&dir.join("compatibility_samples.csv"))?)?;
    }
    if let Some(d) = &a.disparity {
        let seeds = d.seeds.as_ref().unwrap_or(&config.seeds);
        let report = disparity_under_minimisation(split, &d.model, d.metric, d.strategy.parse()?, seeds, &opts)?;
        write_disparity_csv(&report, create(&dir.join("disparity.csv"))?)?;
    }
    if let Some(x) = &a.cross_user {
        let seed = x.seed.unwrap_or(config.seeds[0]);
        let removed: BTreeSet<String> = x.users.iter().cloned().collect();
        let impact = cross_user_impact(split, &x.model, x.metric, &removed, seed, &opts)?;
        write_cross_user_csv(&impact, seed, create(&dir.join("cross_user.csv"))?)?;
    }
    Ok(())
}

fn task<'a>(t: &TaskSection, own: &'a Option<Split>, shared: &'a Split) -> Task<'a> {
    Task {
        label: t.label.clone(),
        split: own.as_ref().unwrap_or(shared),
        model: t.model.clone(),
        metric: t.metric,
    }
}

fn compatibility_with_split(config: &ExperimentConfig, split: &Split) -> Result<CompatibilityReport> {
    let c = config
        .analysis
        .compatibility
        .as_ref()
        .ok_or_else(|| Error::config("missing required section `analysis.compatibility`"))?;
    let split_for = |task: &TaskSection| -> Result<Option<Split>> {
        task.dataset.as_ref().map(|d| load_split_of(config, d)).transpose()
    };
    let (own_a, own_b) = (split_for(&c.task_a)?, split_for(&c.task_b)?);
    let (a, b) = (task(&c.task_a, &own_a, split), task(&c.task_b, &own_b, split));
    let seeds = c.seeds.as_ref().unwrap_or(&config.seeds);
    compatibility(&a, &b, &c.schedule, seeds, c.thresholds, &eval_options(config))
}

/// Run only the compatibility analysis and write its two CSV files.
pub fn run_compatibility(config: &ExperimentConfig) -> Result<CompatibilityReport> {
    if config.analysis.compatibility.is_none() {
        return Err(Error::config("missing required section `analysis.compatibility`"));
    }
    let split = load_split(config)?;
    let report = compatibility_with_split(config, &split)?;
    let dir = config.output_dir.join("analysis");
    fs::create_dir_all(&dir)?;
    write_compatibility_csv(&report, create(&dir.join("compatibility.csv"))?)?;
    write_compatibility_samples_csv(&report, create(&dir.join("compatibility_samples.csv"))?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveOutcome {
    pub model: ModelConfig,
    pub plan: String,
    pub curve: LearningCurve,
    pub stop: std::result::Result<StopDecision, String>,
}

/// Build one learning curve: the first configured model of kind `model_kind`
/// (or its defaults when none is configured) over the first budgeted plan
/// with at least three budgets.
pub fn single_curve(config: &ExperimentConfig, model_kind: &str, metric: MetricKind) -> Result<CurveOutcome> {
    let model = match config.models.iter().find(|m| m.kind_name() == model_kind) {
        Some(m) => m.clone(),
        None => default_model(model_kind)?,
    };
    let plan = config
        .plans
        .iter()
        .find(|p| p.strategy.is_budgeted() && p.budgets.len() >= 3 && p.chain.is_empty())
        .ok_or_else(|| Error::config("no unchained budgeted plan with at least 3 budgets"))?;
    let split = load_split(config)?;
    let curve = build_learning_curve(
        &split,
        &model,
        metric,
        plan.strategy,
        &plan.budgets,
        &config.seeds,
        &eval_options(config),
    )?;
    let rule = StoppingRule {
        epsilon: config.stopping.epsilon,
        grid: plan.budgets.clone(),
    };
    let stop = decide_stop(&curve, &rule).map_err(|e| e.to_string());
    Ok(CurveOutcome {
        model,
        plan: plan.label(),
        curve,
        stop,
    })
}

fn default_model(kind: &str) -> Result<ModelConfig> {
    let text = format!("kind = {kind:?}\n{}", if kind == "item_knn" { "neighbors = 20\n" } else { "" });
    toml::from_str(&text).map_err(|_| Error::config(format!("unknown model kind {kind:?}")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWithdrawal {
    pub model: String,
    pub delta: CostDelta,
    pub exactness: Exactness,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WithdrawOutcome {
    pub models: Vec<ModelWithdrawal>,
    pub warnings: Vec<String>,
    pub report: CostReport,
    pub ledger_path: PathBuf,
}

/// Withdraw `users` from every configured model, verify each retrain against
/// an independent fit on the reduced data, and append the events to
/// `<output_dir>/ledger.csv`.
pub fn withdraw_users(config: &ExperimentConfig, users: &[String], timestamp: u64) -> Result<WithdrawOutcome> {
    let request = WithdrawalRequest::new(users.iter().cloned(), timestamp)?;
    let split = load_split(config)?;
    let seed = config.seeds[0];
    let probes = probe_grid(&[&split.train, &split.test]);
    let mut ledger = CostLedger::new();
    let mut models = Vec::new();
    let mut warnings = BTreeSet::new();
    for model in &config.models {
        let state = ModelState::fit(model, &split.train, seed)?;
        let w = withdraw(&state, &request, &mut ledger)?;
        warnings.extend(w.warnings);
        let oracle = fit(model, &remaining(&split.train, &request), seed)?.0;
        models.push(ModelWithdrawal {
            model: model.label(),
            delta: w.delta,
            exactness: verify_exactness(&w.state.model, &oracle, &probes),
        });
    }
    let report = cost_report(&ledger, &config.unlearning.weights)?;
    fs::create_dir_all(&config.output_dir)?;
    let ledger_path = config.output_dir.join("ledger.csv");
    append_ledger_csv(&ledger_path, ledger.events(), &config.unlearning.weights)?;
    Ok(WithdrawOutcome {
        models,
        warnings: warnings.into_iter().collect(),
        report,
        ledger_path,
    })
}

fn remaining(train: &Dataset, request: &WithdrawalRequest) -> Dataset {
    train.filter(|it| !request.user_ids.contains(&it.user))
}

fn write_manifest(config: &ExperimentConfig, summary: &RunSummary, out: &Path) -> Result<()> {
    let join = |s: &[u64]| s.iter().map(u64::to_string).collect::<Vec<_>>().join(";");
    let mut m = String::new();
    let digest = Sha256::digest(config.source.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    let _ = writeln!(m, "harness_version={HARNESS_VERSION}");
    let _ = writeln!(m, "config_sha256={hex}");
    let _ = writeln!(m, "seeds={}", join(&config.seeds));
    if let Some(s) = config.seed_override {
        let _ = writeln!(m, "seed_override={s}");
    }
    let _ = writeln!(m, "split_seed={}", config.split.seed);
    let _ = writeln!(m, "evaluation_seed={}", config.evaluation.seed);
    let _ = writeln!(m, "negatives={}", config.evaluation.negatives);
    if let Some(s) = config.dataset.seed() {
        let _ = writeln!(m, "dataset_seed={s}");
    }
    if let Some(c) = &config.analysis.compatibility {
        let _ = writeln!(m, "compatibility_seeds={}", join(c.seeds.as_ref().unwrap_or(&config.seeds)));
        for (name, t) in [("a", &c.task_a), ("b", &c.task_b)] {
            if let Some(s) = t.dataset.as_ref().and_then(DatasetSection::seed) {
                let _ = writeln!(m, "compatibility_task_{name}_dataset_seed={s}");
            }
        }
    }
    if let Some(d) = &config.analysis.disparity {
        let _ = writeln!(m, "disparity_seeds={}", join(d.seeds.as_ref().unwrap_or(&config.seeds)));
    }
    if let Some(x) = &config.analysis.cross_user {
        let _ = writeln!(m, "cross_user_seed={}", x.seed.unwrap_or(config.seeds[0]));
    }
    let _ = writeln!(m, "cells={}", summary.cells.len());
    let _ = writeln!(m, "failed_cells={}", summary.failed_cells());
    let _ = writeln!(m, "curves={}", summary.curves);
    let _ = writeln!(m, "config_bytes={}", config.source.len());
    m.push_str("--- config ---\n");
    m.push_str(&config.source);
    fs::write(out.join("manifest.txt"), m)?;
    Ok(())
}
