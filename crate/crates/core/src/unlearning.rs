//! Consent withdrawal by exact retraining, with a deterministic cost ledger.
//!
//! A withdrawal refits the model from scratch on the training data minus the
//! withdrawn users, with the original configuration and seed. Because
//! fitting is deterministic, the result is bit-identical to a model that
//! never saw those users. Costs are counted in operations (SGD steps,
//! similarity computations, retrains), never wall time.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::Deserialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{fit, FitStats, FittedModel, ModelConfig, Recommender};

/// A fitted model together with everything needed to refit it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub seed: u64,
    pub train: Dataset,
    pub model: FittedModel,
    pub stats: FitStats,
}

impl ModelState {
    pub fn fit(config: &ModelConfig, train: &Dataset, seed: u64) -> Result<Self> {
        let (model, stats) = fit(config, train, seed)?;
        Ok(Self {
            config: config.clone(),
            seed,
            train: train.clone(),
            model,
            stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WithdrawalRequest {
    pub user_ids: BTreeSet<String>,
    pub timestamp: u64,
}

impl WithdrawalRequest {
    pub fn new<I, S>(user_ids: I, timestamp: u64) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let user_ids: BTreeSet<String> = user_ids.into_iter().map(Into::into).collect();
        if user_ids.is_empty() {
            return Err(Error::data("withdrawal request names no users"));
        }
        Ok(Self { user_ids, timestamp })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostWeights {
    pub sgd_updates: f64,
    pub similarity_ops: f64,
    pub retrains: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            sgd_updates: 1.0,
            similarity_ops: 1.0,
            retrains: 0.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !(ok(self.sgd_updates) && ok(self.similarity_ops) && ok(self.retrains)) {
            return Err(Error::config("cost weights must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostDelta {
    pub sgd_updates: u64,
    pub similarity_ops: u64,
    pub retrains: u64,
}

impl CostDelta {
    pub fn energy_proxy(&self, w: &CostWeights) -> f64 {
        w.sgd_updates * self.sgd_updates as f64
            + w.similarity_ops * self.similarity_ops as f64
            + w.retrains * self.retrains as f64
    }

    fn add(&mut self, other: &CostDelta) {
        self.sgd_updates += other.sgd_updates;
        self.similarity_ops += other.similarity_ops;
        self.retrains += other.retrains;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEvent {
    pub event_id: u64,
    pub timestamp: u64,
    pub users_removed: usize,
    pub cost: CostDelta,
}

/// Append-only record of withdrawal costs. Counters never decrease.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostLedger {
    events: Vec<LedgerEvent>,
    totals: CostDelta,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&mut self, timestamp: u64, users_removed: usize, cost: CostDelta) -> u64 {
        let event_id = self.events.len() as u64 + 1;
        self.totals.add(&cost);
        self.events.push(LedgerEvent {
            event_id,
            timestamp,
            users_removed,
            cost,
        });
        event_id
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn totals(&self) -> CostDelta {
        self.totals
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Withdrawal {
    pub state: ModelState,
    pub delta: CostDelta,
    pub event_id: u64,
    /// Requested users absent from the training data.
    pub unknown_users: Vec<String>,
    pub warnings: Vec<String>,
}

/// Remove the requested users' data and retrain from scratch.
///
/// Unknown users are reported as warnings; the retrain still happens and is
/// charged to the ledger.
pub fn withdraw(state: &ModelState, request: &WithdrawalRequest, ledger: &mut CostLedger) -> Result<Withdrawal> {
    let present: BTreeSet<&str> = state.train.users().into_iter().collect();
    let unknown_users: Vec<String> = request
        .user_ids
        .iter()
        .filter(|u| !present.contains(u.as_str()))
        .cloned()
        .collect();
    let warnings = unknown_users
        .iter()
        .map(|u| format!("user {u} has no training data; nothing to remove"))
        .collect();

    let remaining = state.train.without_users(&request.user_ids);
    if remaining.is_empty() {
        return Err(Error::data("withdrawal would leave the training set empty"));
    }
    let new_state = ModelState::fit(&state.config, &remaining, state.seed)?;
    let delta = CostDelta {
        sgd_updates: new_state.stats.sgd_updates,
        similarity_ops: new_state.stats.similarity_ops,
        retrains: 1,
    };
    let users_removed = request.user_ids.len() - unknown_users.len();
    let event_id = ledger.record(request.timestamp, users_removed, delta);
    Ok(Withdrawal {
        state: new_state,
        delta,
        event_id,
        unknown_users,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exactness {
    /// Every probe prediction is bit-identical.
    pub exact: bool,
    pub max_deviation: f64,
    pub probes: usize,
    pub warning: Option<String>,
}

pub fn verify_exactness<A, B>(candidate: &A, oracle: &B, probes: &[(String, String)]) -> Exactness
where
    A: Recommender + ?Sized,
    B: Recommender + ?Sized,
{
    if probes.is_empty() {
        return Exactness {
            exact: true,
            max_deviation: 0.0,
            probes: 0,
            warning: Some("empty probe set; exactness holds vacuously".into()),
        };
    }
    let mut exact = true;
    let mut max_deviation = 0.0f64;
    for (u, i) in probes {
        let (a, b) = (candidate.predict(u, i), oracle.predict(u, i));
        if a.to_bits() != b.to_bits() {
            exact = false;
        }
        max_deviation = max_deviation.max((a - b).abs());
    }
    Exactness {
        exact,
        max_deviation,
        probes: probes.len(),
        warning: None,
    }
}

/// Every (user, item) pair over the given datasets.
pub fn probe_grid(datasets: &[&Dataset]) -> Vec<(String, String)> {
    let users: BTreeSet<&str> = datasets.iter().flat_map(|d| d.users()).collect();
    let items: BTreeSet<&str> = datasets.iter().flat_map(|d| d.items()).collect();
    users
        .iter()
        .flat_map(|u| items.iter().map(move |i| ((*u).to_owned(), (*i).to_owned())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventCost {
    pub event_id: u64,
    pub cost: CostDelta,
    pub energy_proxy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub weights: CostWeights,
    pub per_event: Vec<EventCost>,
    pub total: CostDelta,
    pub energy_proxy: f64,
}

pub fn cost_report(ledger: &CostLedger, weights: &CostWeights) -> Result<CostReport> {
    weights.validate()?;
    let per_event: Vec<EventCost> = ledger
        .events()
        .iter()
        .map(|e| EventCost {
            event_id: e.event_id,
            cost: e.cost,
            energy_proxy: e.cost.energy_proxy(weights),
        })
        .collect();
    Ok(CostReport {
        weights: *weights,
        energy_proxy: per_event.iter().map(|e| e.energy_proxy).sum(),
        per_event,
        total: ledger.totals(),
    })
}

pub const LEDGER_CSV_HEADER: [&str; 7] = [
    "event_id",
    "timestamp",
    "users_removed",
    "sgd_updates",
    "similarity_ops",
    "retrains",
    "energy_proxy",
];

fn ledger_row(e: &LedgerEvent, weights: &CostWeights) -> [String; 7] {
    [
        e.event_id.to_string(),
        e.timestamp.to_string(),
        e.users_removed.to_string(),
        e.cost.sgd_updates.to_string(),
        e.cost.similarity_ops.to_string(),
        e.cost.retrains.to_string(),
        e.cost.energy_proxy(weights).to_string(),
    ]
}

pub fn write_ledger_csv<W: Write>(ledger: &CostLedger, weights: &CostWeights, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(LEDGER_CSV_HEADER)?;
    for e in ledger.events() {
        wtr.write_record(ledger_row(e, weights))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Append events to a ledger log, writing the header when the file is new.
pub fn append_ledger_csv(path: impl AsRef<Path>, events: &[LedgerEvent], weights: &CostWeights) -> Result<()> {
    let path = path.as_ref();
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut wtr = csv::Writer::from_writer(file);
    if fresh {
        wtr.write_record(LEDGER_CSV_HEADER)?;
    }
    for e in events {
        wtr.write_record(ledger_row(e, weights))?;
    }
    wtr.flush()?;
    Ok(())
}
