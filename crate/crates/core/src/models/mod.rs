//! Recommenders of increasing data hunger: damped popularity, item-based
//! kNN and biased matrix factorisation trained by SGD.
//!
//! All fitting is single-threaded and deterministic for a fixed
//! `(train, config, seed)`. Users or items unseen at fit time are served by
//! the popularity fallback.

mod knn;
mod mf;
mod popularity;

pub use knn::{ItemKnnModel, Similarity};
pub use mf::{descent_direction, pointwise_loss, MfConfig, MfModel};
pub use popularity::PopularityModel;

use std::collections::HashMap;
use std::io::Write;

use serde::Deserialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_DAMPING: f64 = 25.0;

fn default_damping() -> f64 {
    DEFAULT_DAMPING
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Popularity {
        #[serde(default = "default_damping")]
        damping: f64,
    },
    ItemKnn {
        neighbors: usize,
        #[serde(default)]
        similarity: Similarity,
    },
    MfSgd(MfConfig),
}

impl ModelConfig {
    pub fn popularity() -> Self {
        ModelConfig::Popularity {
            damping: DEFAULT_DAMPING,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Popularity { damping } => {
                if !(*damping >= 0.0 && damping.is_finite()) {
                    return Err(Error::config("popularity damping must be >= 0"));
                }
            }
            ModelConfig::ItemKnn { neighbors, .. } => {
                if *neighbors == 0 {
                    return Err(Error::config("item_knn neighbors must be >= 1"));
                }
            }
            ModelConfig::MfSgd(cfg) => cfg.validate()?,
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::Popularity { .. } => "popularity",
            ModelConfig::ItemKnn { .. } => "item_knn",
            ModelConfig::MfSgd(_) => "mf_sgd",
        }
    }

    /// Compact label used in reports; contains no commas.
    pub fn label(&self) -> String {
        match self {
            ModelConfig::Popularity { damping } => format!("popularity[beta={damping}]"),
            ModelConfig::ItemKnn {
                neighbors,
                similarity,
            } => format!("item_knn[k={neighbors};{}]", similarity.name()),
            ModelConfig::MfSgd(c) => format!(
                "mf_sgd[d={};lr={};reg={};epochs={}]",
                c.latent_dim, c.learning_rate, c.regularization, c.epochs
            ),
        }
    }
}

/// Deterministic operation counts accumulated while fitting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FitStats {
    /// Single-example gradient steps.
    pub sgd_updates: u64,
    /// Item pairs whose similarity was computed.
    pub similarity_ops: u64,
}

pub trait Recommender {
    /// Rating estimate, clipped to the training rating bounds.
    fn predict(&self, user: &str, item: &str) -> f64;

    /// Top-`k` distinct candidates by `predict`, score descending then item
    /// id ascending.
    fn rank(&self, user: &str, candidates: &[&str], k: usize) -> Vec<String> {
        let mut scored: Vec<(f64, &str)> = candidates
            .iter()
            .map(|&item| (self.predict(user, item), item))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.dedup_by(|a, b| a.1 == b.1);
        scored.into_iter().take(k).map(|(_, item)| item.to_owned()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FittedModel {
    Popularity(PopularityModel),
    ItemKnn(ItemKnnModel),
    MfSgd(MfModel),
}

impl Recommender for FittedModel {
    fn predict(&self, user: &str, item: &str) -> f64 {
        match self {
            FittedModel::Popularity(m) => m.predict(user, item),
            FittedModel::ItemKnn(m) => m.predict(user, item),
            FittedModel::MfSgd(m) => m.predict(user, item),
        }
    }
}

impl FittedModel {
    /// Serialise parameters as `section,id,index,value` rows.
    ///
    /// Sections: `global_mean`, `damping`, `item_bias`, `user_bias`,
    /// `user_factor`, `item_factor` and `similarity` (id `a|b`, `a < b`,
    /// nonzero entries only).
    pub fn dump_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["section", "id", "index", "value"])?;
        let mut rows: Vec<(String, String, usize, f64)> = Vec::new();
        match self {
            FittedModel::Popularity(m) => m.dump_rows(&mut rows),
            FittedModel::ItemKnn(m) => m.dump_rows(&mut rows),
            FittedModel::MfSgd(m) => m.dump_rows(&mut rows),
        }
        for (section, id, index, value) in rows {
            wtr.write_record([section, id, index.to_string(), value.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn fit(config: &ModelConfig, train: &Dataset, seed: u64) -> Result<(FittedModel, FitStats)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("cannot fit a model on an empty training set"));
    }
    Ok(match config {
        ModelConfig::Popularity { damping } => (
            FittedModel::Popularity(PopularityModel::fit(train, *damping)?),
            FitStats::default(),
        ),
        ModelConfig::ItemKnn {
            neighbors,
            similarity,
        } => {
            let (m, stats) = ItemKnnModel::fit(train, *neighbors, *similarity)?;
            (FittedModel::ItemKnn(m), stats)
        }
        ModelConfig::MfSgd(cfg) => {
            let (m, stats) = MfModel::fit(train, cfg, seed)?;
            (FittedModel::MfSgd(m), stats)
        }
    })
}

/// Dense index over sorted string ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub(crate) struct Vocab {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub(crate) fn new<'a>(sorted_ids: impl IntoIterator<Item = &'a str>) -> Self {
        let ids: Vec<String> = sorted_ids.into_iter().map(str::to_owned).collect();
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self { ids, index }
    }

    pub(crate) fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub(crate) fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub(crate) fn len(&self) -> usize {
        self.ids.len()
    }
}
