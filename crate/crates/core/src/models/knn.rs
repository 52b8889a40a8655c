use serde::Deserialize;

use super::{FitStats, PopularityModel, Recommender, Vocab, DEFAULT_DAMPING};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Similarity {
    /// Cosine over the ratings of users who rated both items.
    #[default]
    Cosine,
    /// Cosine after subtracting each user's mean rating.
    AdjustedCosine,
}

impl Similarity {
    pub fn name(self) -> &'static str {
        match self {
            Similarity::Cosine => "cosine",
            Similarity::AdjustedCosine => "adjusted_cosine",
        }
    }
}

/// Item-based neighbourhood model.
///
/// `predict(u, i)` is the similarity-weighted mean of `u`'s ratings on the
/// `neighbors` items most similar to `i` (positive similarity only, ties by
/// item id). With no such neighbour the popularity fallback answers.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemKnnModel {
    neighbors: usize,
    similarity: Similarity,
    items: Vocab,
    users: Vocab,
    /// Row-major `n_items x n_items`.
    sim: Vec<f64>,
    profiles: Vec<Vec<(usize, f64)>>,
    fallback: PopularityModel,
    bounds: (f64, f64),
}

impl ItemKnnModel {
    pub fn fit(train: &Dataset, neighbors: usize, similarity: Similarity) -> Result<(Self, FitStats)> {
        if neighbors == 0 {
            return Err(Error::config("item_knn neighbors must be >= 1"));
        }
        let fallback = PopularityModel::fit(train, DEFAULT_DAMPING)?;
        let items = Vocab::new(train.items());
        let users = Vocab::new(train.users());
        let n = items.len();

        let mut profiles: Vec<Vec<(usize, f64)>> = vec![Vec::new(); users.len()];
        for it in train.interactions() {
            let u = users.get(&it.user).expect("user indexed");
            profiles[u].push((items.get(&it.item).expect("item indexed"), it.rating));
        }

        let mut dot = vec![0.0; n * n];
        let mut sq_left = vec![0.0; n * n];
        let mut sq_right = vec![0.0; n * n];
        let mut co_rated = vec![false; n * n];
        let mut centred: Vec<(usize, f64)> = Vec::new();
        for profile in &profiles {
            let offset = match similarity {
                Similarity::Cosine => 0.0,
                Similarity::AdjustedCosine => {
                    profile.iter().map(|p| p.1).sum::<f64>() / profile.len() as f64
                }
            };
            centred.clear();
            centred.extend(profile.iter().map(|&(i, r)| (i, r - offset)));
            for (a, &(i, x)) in centred.iter().enumerate() {
                for &(j, y) in &centred[a + 1..] {
                    // profiles are in item order, so i < j
                    let cell = i * n + j;
                    dot[cell] += x * y;
                    sq_left[cell] += x * x;
                    sq_right[cell] += y * y;
                    co_rated[cell] = true;
                }
            }
        }

        let mut sim = vec![0.0; n * n];
        let mut ops = 0u64;
        for i in 0..n {
            sim[i * n + i] = 1.0;
            for j in i + 1..n {
                let cell = i * n + j;
                if !co_rated[cell] {
                    continue;
                }
                ops += 1;
                let denom = (sq_left[cell] * sq_right[cell]).sqrt();
                let s = if denom > 0.0 {
                    (dot[cell] / denom).clamp(-1.0, 1.0)
                } else {
                    0.0
                };
                sim[cell] = s;
                sim[j * n + i] = s;
            }
        }

        Ok((
            Self {
                neighbors,
                similarity,
                items,
                users,
                sim,
                profiles,
                fallback,
                bounds: train.rating_bounds(),
            },
            FitStats {
                sgd_updates: 0,
                similarity_ops: ops,
            },
        ))
    }

    pub fn similarity(&self, a: &str, b: &str) -> Option<f64> {
        let (i, j) = (self.items.get(a)?, self.items.get(b)?);
        Some(self.sim[i * self.items.len() + j])
    }

    pub(super) fn dump_rows(&self, rows: &mut Vec<(String, String, usize, f64)>) {
        self.fallback.dump_rows(rows);
        let n = self.items.len();
        for i in 0..n {
            for j in i + 1..n {
                let s = self.sim[i * n + j];
                if s != 0.0 {
                    let id = format!("{}|{}", self.items.id(i), self.items.id(j));
                    rows.push(("similarity".into(), id, 0, s));
                }
            }
        }
    }
}

impl Recommender for ItemKnnModel {
    fn predict(&self, user: &str, item: &str) -> f64 {
        let (Some(u), Some(i)) = (self.users.get(user), self.items.get(item)) else {
            return self.fallback.predict(user, item);
        };
        let row = &self.sim[i * self.items.len()..(i + 1) * self.items.len()];
        let mut candidates: Vec<(f64, usize, f64)> = self.profiles[u]
            .iter()
            .filter(|&&(j, _)| j != i && row[j] > 0.0)
            .map(|&(j, r)| (row[j], j, r))
            .collect();
        if candidates.is_empty() {
            return self.fallback.predict(user, item);
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        candidates.truncate(self.neighbors);
        let (num, den) = candidates
            .iter()
            .fold((0.0, 0.0), |(num, den), &(s, _, r)| (num + s * r, den + s));
        (num / den).clamp(self.bounds.0, self.bounds.1)
    }
}
