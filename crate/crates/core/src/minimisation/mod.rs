//! Per-user data minimisation strategies and learning-curve stopping rules.
//!
//! Budgets are per user: `recency(5)` keeps at most five interactions of
//! every user. Every strategy except `shuffle` returns a subset of its input.

mod curve;

pub use curve::{
    build_learning_curve, decide_stop, fit_power_law, prediction_error, write_curve_csv, write_fit_csv,
    CurvePoint, LearningCurve, PowerLawFit, PredictionError, StopDecision, StoppingRule,
};

use std::cmp::Reverse;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::Deserialize;

use crate::dataset::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::rng::HarnessRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Full,
    Random,
    Recency,
    Popularity,
    ExtremeValue,
    Shuffle,
}

impl StrategyKind {
    /// Whether the strategy is parameterised by a per-user budget.
    pub fn is_budgeted(self) -> bool {
        !matches!(self, StrategyKind::Full | StrategyKind::Shuffle)
    }

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Full => "full",
            StrategyKind::Random => "random",
            StrategyKind::Recency => "recency",
            StrategyKind::Popularity => "popularity",
            StrategyKind::ExtremeValue => "extreme_value",
            StrategyKind::Shuffle => "shuffle",
        }
    }

    pub fn with_budget(self, k: usize) -> Result<Strategy> {
        Ok(match self {
            StrategyKind::Random => Strategy::Random(k),
            StrategyKind::Recency => Strategy::Recency(k),
            StrategyKind::Popularity => Strategy::Popularity(k),
            StrategyKind::ExtremeValue => Strategy::ExtremeValue(k),
            StrategyKind::Full | StrategyKind::Shuffle => {
                return Err(Error::config(format!("strategy {} takes no budget", self.name())))
            }
        })
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => StrategyKind::Full,
            "random" => StrategyKind::Random,
            "recency" => StrategyKind::Recency,
            "popularity" => StrategyKind::Popularity,
            "extreme_value" => StrategyKind::ExtremeValue,
            "shuffle" => StrategyKind::Shuffle,
            _ => return Err(Error::config(format!("unknown strategy {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Full,
    /// Seeded uniform sample of `k` interactions per user.
    Random(usize),
    /// The `k` most recent interactions (ties: item id ascending).
    Recency(usize),
    /// The `k` interactions on the globally most-rated items (ties: item id).
    Popularity(usize),
    /// The `k` interactions furthest from the user's mean rating
    /// (ties: timestamp descending, then item id).
    ExtremeValue(usize),
    /// Swap owners between a seeded fraction `p` of interactions.
    Shuffle(f64),
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::Full => StrategyKind::Full,
            Strategy::Random(_) => StrategyKind::Random,
            Strategy::Recency(_) => StrategyKind::Recency,
            Strategy::Popularity(_) => StrategyKind::Popularity,
            Strategy::ExtremeValue(_) => StrategyKind::ExtremeValue,
            Strategy::Shuffle(_) => StrategyKind::Shuffle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Strategy::Shuffle(p) = self {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::config(format!("shuffle fraction {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Full => write!(f, "full"),
            Strategy::Random(k)
            | Strategy::Recency(k)
            | Strategy::Popularity(k)
            | Strategy::ExtremeValue(k) => write!(f, "{}({k})", self.kind().name()),
            Strategy::Shuffle(p) => write!(f, "shuffle({p})"),
        }
    }
}

/// Parses the `Display` form: `full`, `recency(5)`, `shuffle(0.2)`.
impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some((name, rest)) = s.split_once('(') else {
            let kind: StrategyKind = s.parse()?;
            return match kind {
                StrategyKind::Full => Ok(Strategy::Full),
                _ => Err(Error::config(format!("strategy {s:?} needs a parameter, e.g. {s}(5)"))),
            };
        };
        let arg = rest
            .strip_suffix(')')
            .ok_or_else(|| Error::config(format!("unbalanced parentheses in {s:?}")))?
            .trim();
        let kind: StrategyKind = name.trim().parse()?;
        let strategy = match kind {
            StrategyKind::Full => return Err(Error::config("full takes no parameter")),
            StrategyKind::Shuffle => Strategy::Shuffle(
                arg.parse()
                    .map_err(|_| Error::config(format!("invalid shuffle fraction in {s:?}")))?,
            ),
            _ => kind.with_budget(
                arg.parse()
                    .map_err(|_| Error::config(format!("invalid budget in {s:?}")))?,
            )?,
        };
        strategy.validate()?;
        Ok(strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimisationPlan {
    pub strategy: Strategy,
    pub seed: u64,
}

impl MinimisationPlan {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self { strategy, seed }
    }
}

pub fn apply(plan: &MinimisationPlan, train: &Dataset) -> Result<Dataset> {
    plan.strategy.validate()?;
    let profiles = train.by_user();
    let keep_per_user = |k: usize, order: &dyn Fn(&mut Vec<&Interaction>)| -> Vec<Interaction> {
        profiles
            .values()
            .flat_map(|profile| {
                let mut p = profile.clone();
                order(&mut p);
                p.truncate(k);
                p.into_iter().cloned()
            })
            .collect()
    };

    Ok(match plan.strategy {
        Strategy::Full => train.clone(),
        Strategy::Random(k) => {
            let mut rng = HarnessRng::derived(plan.seed, "random");
            let kept = profiles
                .values()
                .flat_map(|profile| {
                    // shuffle the whole profile so smaller budgets are prefixes
                    let mut p = profile.clone();
                    rng.shuffle(&mut p);
                    p.truncate(k);
                    p.into_iter().cloned().collect::<Vec<_>>()
                })
                .collect();
            train.derive(kept)
        }
        Strategy::Recency(k) => train.derive(keep_per_user(k, &|p| {
            p.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then_with(|| a.item.cmp(&b.item)))
        })),
        Strategy::Popularity(k) => {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for it in train.interactions() {
                *counts.entry(it.item.as_str()).or_default() += 1;
            }
            train.derive(keep_per_user(k, &|p| {
                p.sort_by_key(|it| (Reverse(counts[it.item.as_str()]), it.item.clone()))
            }))
        }
        Strategy::ExtremeValue(k) => {
            let kept = profiles
                .values()
                .flat_map(|profile| {
                    let mean = profile.iter().map(|it| it.rating).sum::<f64>() / profile.len() as f64;
                    let mut p = profile.clone();
                    p.sort_by(|a, b| {
                        (b.rating - mean)
                            .abs()
                            .total_cmp(&(a.rating - mean).abs())
                            .then_with(|| b.timestamp.cmp(&a.timestamp))
                            .then_with(|| a.item.cmp(&b.item))
                    });
                    p.truncate(k);
                    p.into_iter().cloned().collect::<Vec<_>>()
                })
                .collect();
            train.derive(kept)
        }
        Strategy::Shuffle(p) => shuffle(train, p, plan.seed)?,
    })
}

/// Apply plans in sequence; iterated minimisation of a data store.
pub fn apply_chain(plans: &[MinimisationPlan], train: &Dataset) -> Result<Dataset> {
    plans.iter().try_fold(train.clone(), |data, plan| apply(plan, &data))
}

/// Partner-swap shuffle.
///
/// Each interaction is selected independently with probability `p`. The
/// selection is put in seeded random order and greedily paired: an
/// interaction pairs with the earliest waiting one owned by a different user
/// whose swap would not give either user a duplicate item. Paired
/// interactions exchange owners; whatever remains unpaired stays in place.
/// Profile sizes and the multiset of (item, rating, timestamp) are
/// preserved exactly.
fn shuffle(train: &Dataset, p: f64, seed: u64) -> Result<Dataset> {
    let users = train.users();
    if users.len() < 2 {
        return Err(Error::data("shuffle needs at least two users"));
    }
    let all = train.interactions();
    let mut rng = HarnessRng::derived(seed, "shuffle");
    let mut selected: Vec<usize> = (0..all.len()).filter(|_| rng.bernoulli(p)).collect();
    rng.shuffle(&mut selected);

    let mut owner: Vec<&str> = all.iter().map(|it| it.user.as_str()).collect();
    let mut holdings: HashMap<&str, HashSet<&str>> = HashMap::new();
    for it in all {
        holdings.entry(it.user.as_str()).or_default().insert(it.item.as_str());
    }

    let mut waiting: Vec<usize> = Vec::new();
    for x in selected {
        let item_x = all[x].item.as_str();
        let partner = waiting.iter().position(|&y| {
            let item_y = all[y].item.as_str();
            owner[y] != owner[x]
                && (item_x == item_y
                    || (!holdings[owner[y]].contains(item_x) && !holdings[owner[x]].contains(item_y)))
        });
        match partner {
            Some(pos) => {
                let y = waiting.remove(pos);
                let (ux, uy) = (owner[x], owner[y]);
                let item_y = all[y].item.as_str();
                if item_x != item_y {
                    let hx = holdings.get_mut(ux).unwrap();
                    hx.remove(item_x);
                    hx.insert(item_y);
                    let hy = holdings.get_mut(uy).unwrap();
                    hy.remove(item_y);
                    hy.insert(item_x);
                }
                owner[x] = uy;
                owner[y] = ux;
            }
            None => waiting.push(x),
        }
    }

    let shuffled = all
        .iter()
        .zip(&owner)
        .map(|(it, &user)| Interaction {
            user: user.to_owned(),
            group: train.group_of(user).map(str::to_owned),
            ..it.clone()
        })
        .collect();
    Ok(train.derive(shuffled))
}
