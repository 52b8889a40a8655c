//! TOML experiment configuration.
//!
//! Relative dataset paths resolve against the directory of the config file.
//! The only environment override is `DATAMIN_OUTPUT_DIR`, which replaces
//! `output_dir` when the config is loaded from disk.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::analysis::{CompatibilityThresholds, PerturbationSchedule, MIN_SAMPLES};
use crate::dataset::{generate_synthetic, load_csv, CsvSchema, Dataset, SplitScheme, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{Aggregation, MetricKind};
use crate::minimisation::{Strategy, StrategyKind};
use crate::models::ModelConfig;
use crate::unlearning::CostWeights;

pub const OUTPUT_DIR_ENV: &str = "DATAMIN_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default = "col_user")]
    pub user_column: String,
    #[serde(default = "col_item")]
    pub item_column: String,
    #[serde(default = "col_rating")]
    pub rating_column: String,
    #[serde(default = "col_timestamp")]
    pub timestamp_column: String,
    pub group_column: Option<String>,
    pub rating_min: Option<f64>,
    pub rating_max: Option<f64>,
}

fn col_user() -> String {
    "user".into()
}
fn col_item() -> String {
    "item".into()
}
fn col_rating() -> String {
    "rating".into()
}
fn col_timestamp() -> String {
    "timestamp".into()
}

impl DatasetSection {
    fn validate(&self, section: &str) -> Result<()> {
        match (&self.path, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::config(format!("[{section}] sets both path and synthetic"))),
            (None, None) => Err(Error::config(format!("[{section}] needs either path or synthetic"))),
            (None, Some(spec)) => spec.validate(),
            (Some(_), None) => match (self.rating_min, self.rating_max) {
                (Some(lo), Some(hi)) if lo >= hi => {
                    Err(Error::config(format!("[{section}] rating_min must be below rating_max")))
                }
                (Some(_), None) | (None, Some(_)) => Err(Error::config(format!(
                    "[{section}] rating_min and rating_max go together"
                ))),
                _ => Ok(()),
            },
        }
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            user: self.user_column.clone(),
            item: self.item_column.clone(),
            rating: self.rating_column.clone(),
            timestamp: self.timestamp_column.clone(),
            group: Some(self.group_column.clone().unwrap_or_else(|| "group".into())),
            bounds: self.rating_min.zip(self.rating_max),
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        match (&self.path, &self.synthetic) {
            (Some(path), _) => load_csv(base_dir.join(path), &self.schema()),
            (None, Some(spec)) => generate_synthetic(spec),
            (None, None) => Err(Error::config("dataset section has no source")),
        }
    }

    /// Seed of the synthetic generator, if any.
    pub fn seed(&self) -> Option<u64> {
        self.synthetic.as_ref().map(|s| s.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub scheme: String,
    pub fraction: Option<f64>,
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSection {
    pub fn scheme(&self) -> Result<SplitScheme> {
        match (self.scheme.as_str(), self.fraction, self.k) {
            ("temporal_holdout", Some(fraction), None) => Ok(SplitScheme::TemporalHoldout { fraction }),
            ("leave_last_k", None, Some(k)) => Ok(SplitScheme::LeaveLastK { k }),
            ("temporal_holdout", ..) => Err(Error::config("[split] temporal_holdout takes only `fraction`")),
            ("leave_last_k", ..) => Err(Error::config("[split] leave_last_k takes only `k`")),
            (other, ..) => Err(Error::config(format!("[split] unknown scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub strategy: StrategyKind,
    #[serde(default)]
    pub budgets: Vec<usize>,
    #[serde(default)]
    pub fractions: Vec<f64>,
    /// Strategies applied, in order, before this one (e.g. `["recency(50)"]`).
    #[serde(default)]
    pub chain: Vec<String>,
}

/// One point of an expanded plan grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanPoint {
    pub strategy: Strategy,
    /// `budget` column: the budget or shuffle fraction, empty for `full`.
    pub budget: String,
    pub numeric_budget: Option<usize>,
}

impl PlanSection {
    pub fn label(&self) -> String {
        let mut parts = self.chain.clone();
        parts.push(self.strategy.name().to_owned());
        parts.join(">")
    }

    pub fn chain(&self) -> Result<Vec<Strategy>> {
        self.chain.iter().map(|s| s.parse()).collect()
    }

    pub fn expand(&self) -> Result<Vec<PlanPoint>> {
        let label = self.label();
        match self.strategy {
            StrategyKind::Full => {
                if !self.budgets.is_empty() || !self.fractions.is_empty() {
                    return Err(Error::config(format!("plan {label}: full takes no budgets or fractions")));
                }
                Ok(vec![PlanPoint {
                    strategy: Strategy::Full,
                    budget: String::new(),
                    numeric_budget: None,
                }])
            }
            StrategyKind::Shuffle => {
                if self.fractions.is_empty() || !self.budgets.is_empty() {
                    return Err(Error::config(format!("plan {label}: shuffle needs `fractions` and no budgets")));
                }
                self.fractions
                    .iter()
                    .map(|&p| {
                        let strategy = Strategy::Shuffle(p);
                        strategy.validate()?;
                        Ok(PlanPoint {
                            strategy,
                            budget: p.to_string(),
                            numeric_budget: None,
                        })
                    })
                    .collect()
            }
            kind => {
                if self.budgets.is_empty() || !self.fractions.is_empty() {
                    return Err(Error::config(format!("plan {label}: {} needs `budgets`", kind.name())));
                }
                let distinct: BTreeSet<usize> = self.budgets.iter().copied().collect();
                if distinct.len() != self.budgets.len() {
                    return Err(Error::config(format!("plan {label}: duplicate budgets")));
                }
                self.budgets
                    .iter()
                    .map(|&k| {
                        Ok(PlanPoint {
                            strategy: kind.with_budget(k)?,
                            budget: k.to_string(),
                            numeric_budget: Some(k),
                        })
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSection {
    pub kind: MetricKind,
    #[serde(default = "default_aggregation")]
    pub aggregation: Aggregation,
}

fn default_aggregation() -> Aggregation {
    Aggregation::GlobalMean
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub negatives: usize,
    pub seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { negatives: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoppingSection {
    pub epsilon: f64,
}

impl Default for StoppingSection {
    fn default() -> Self {
        Self { epsilon: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub label: String,
    pub model: ModelConfig,
    pub metric: MetricKind,
    /// Evaluate this task on its own dataset (same split settings).
    pub dataset: Option<DatasetSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompatibilitySection {
    pub task_a: TaskSection,
    pub task_b: TaskSection,
    pub schedule: PerturbationSchedule,
    #[serde(default)]
    pub thresholds: CompatibilityThresholds,
    /// Defaults to the top-level seeds.
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisparitySection {
    pub model: ModelConfig,
    pub metric: MetricKind,
    pub strategy: String,
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossUserSection {
    pub model: ModelConfig,
    pub metric: MetricKind,
    pub users: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub compatibility: Option<CompatibilitySection>,
    pub disparity: Option<DisparitySection>,
    pub cross_user: Option<CrossUserSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearningSection {
    #[serde(default)]
    pub weights: CostWeights,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    output_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    dataset: Option<DatasetSection>,
    split: Option<SplitSection>,
    models: Option<Vec<ModelConfig>>,
    plans: Option<Vec<PlanSection>>,
    metrics: Option<Vec<MetricSection>>,
    #[serde(default)]
    evaluation: EvaluationSection,
    #[serde(default)]
    stopping: StoppingSection,
    #[serde(default)]
    analysis: AnalysisSection,
    #[serde(default)]
    unlearning: UnlearningSection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub models: Vec<ModelConfig>,
    pub plans: Vec<PlanSection>,
    pub metrics: Vec<MetricSection>,
    pub evaluation: EvaluationSection,
    pub stopping: StoppingSection,
    pub analysis: AnalysisSection,
    pub unlearning: UnlearningSection,
    /// Directory that relative dataset paths resolve against.
    pub base_dir: PathBuf,
    /// The config text exactly as read; embedded in the manifest.
    pub source: String,
    /// Set when `--seed` replaced the configured seeds.
    pub seed_override: Option<u64>,
}

fn required<T>(value: Option<T>, section: &str) -> Result<T> {
    value.ok_or_else(|| Error::config(format!("missing required section `{section}`")))
}

impl ExperimentConfig {
    pub fn parse(source: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let raw: RawConfig = toml::from_str(source).map_err(|e| Error::config(e.to_string()))?;
        let config = ExperimentConfig {
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("results")),
            seeds: required(raw.seeds, "seeds")?,
            dataset: required(raw.dataset, "dataset")?,
            split: required(raw.split, "split")?,
            models: required(raw.models, "models")?,
            plans: required(raw.plans, "plans")?,
            metrics: required(raw.metrics, "metrics")?,
            evaluation: raw.evaluation,
            stopping: raw.stopping,
            analysis: raw.analysis,
            unlearning: raw.unlearning,
            base_dir: base_dir.into(),
            source: source.to_owned(),
            seed_override: None,
        };
        config.validate()?;
        Ok(config)
    }

    /// Read a config file, applying the `DATAMIN_OUTPUT_DIR` override.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut config = Self::parse(&source, base)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            config.output_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    /// Replace the seed list (and analysis seed lists) with a single seed.
    pub fn override_seed(&mut self, seed: u64) {
        self.seeds = vec![seed];
        self.seed_override = Some(seed);
        if let Some(c) = &mut self.analysis.compatibility {
            c.seeds = None;
        }
        if let Some(d) = &mut self.analysis.disparity {
            d.seeds = None;
        }
        if let Some(x) = &mut self.analysis.cross_user {
            x.seed = None;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonempty = |n: usize, section: &str| {
            if n == 0 {
                Err(Error::config(format!("section `{section}` is empty")))
            } else {
                Ok(())
            }
        };
        nonempty(self.seeds.len(), "seeds")?;
        nonempty(self.models.len(), "models")?;
        nonempty(self.plans.len(), "plans")?;
        nonempty(self.metrics.len(), "metrics")?;
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::config("duplicate entries in `seeds`"));
        }

        self.dataset.validate("dataset")?;
        self.split.scheme()?;
        let mut labels = BTreeSet::new();
        for m in &self.models {
            m.validate()?;
            if !labels.insert(m.label()) {
                return Err(Error::config(format!("duplicate model {}", m.label())));
            }
        }
        let mut labels = BTreeSet::new();
        for p in &self.plans {
            p.chain()?;
            p.expand()?;
            if !labels.insert(p.label()) {
                return Err(Error::config(format!("duplicate plan {}", p.label())));
            }
        }
        let mut seen = BTreeSet::new();
        for m in &self.metrics {
            if !seen.insert((m.kind, m.aggregation)) {
                return Err(Error::config(format!("duplicate metric {} / {}", m.kind, m.aggregation)));
            }
        }
        if !(self.stopping.epsilon > 0.0 && self.stopping.epsilon.is_finite()) {
            return Err(Error::config("stopping epsilon must be > 0"));
        }
        self.unlearning.weights.validate()?;

        if let Some(c) = &self.analysis.compatibility {
            for task in [&c.task_a, &c.task_b] {
                task.model.validate()?;
                if let Some(d) = &task.dataset {
                    d.validate("analysis.compatibility.task.dataset")?;
                }
            }
            c.schedule.validate()?;
            let t = &c.thresholds;
            if !(-1.0..=1.0).contains(&t.r_min) || !(t.p_max > 0.0 && t.p_max <= 1.0) || t.permutations == 0 {
                return Err(Error::config("compatibility thresholds need r_min in [-1, 1], p_max in (0, 1], permutations >= 1"));
            }
            let n = c.seeds.as_ref().unwrap_or(&self.seeds).len() * c.schedule.slices;
            if n < MIN_SAMPLES {
                return Err(Error::config(format!(
                    "compatibility yields {n} samples; at least {MIN_SAMPLES} are needed"
                )));
            }
        }
        if let Some(d) = &self.analysis.disparity {
            d.model.validate()?;
            d.strategy.parse::<Strategy>()?;
            if d.seeds.as_ref().is_some_and(Vec::is_empty) {
                return Err(Error::config("analysis.disparity seeds is empty"));
            }
        }
        if let Some(x) = &self.analysis.cross_user {
            x.model.validate()?;
            if x.users.is_empty() {
                return Err(Error::config("analysis.cross_user users is empty"));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        self.dataset.load(&self.base_dir)
    }
}
