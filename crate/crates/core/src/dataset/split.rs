use serde::Deserialize;

use super::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::rng::HarnessRng;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitScheme {
    /// Per user, the most recent `round(fraction * n)` interactions go to
    /// test, always leaving at least one in train.
    TemporalHoldout { fraction: f64 },
    /// Per user, the last `k` interactions go to test.
    LeaveLastK { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
    pub scheme: SplitScheme,
    pub seed: u64,
}

/// Split each user's profile chronologically.
///
/// Interactions are ordered by timestamp; equal timestamps are ordered by a
/// seeded random key drawn per interaction in canonical order.
pub fn split(dataset: &Dataset, scheme: SplitScheme, seed: u64) -> Result<Split> {
    match scheme {
        SplitScheme::TemporalHoldout { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::data(format!(
                    "temporal_holdout fraction {fraction} yields an empty train or test set"
                )));
            }
        }
        SplitScheme::LeaveLastK { k } => {
            if k == 0 {
                return Err(Error::data("leave_last_k(0) yields an empty test set"));
            }
            let short: Vec<&str> = dataset
                .by_user()
                .into_iter()
                .filter(|(_, p)| p.len() <= k)
                .map(|(u, _)| u)
                .collect();
            if !short.is_empty() {
                return Err(Error::data(format!(
                    "users with fewer than {} interactions: {}",
                    k + 1,
                    short.join(",")
                )));
            }
        }
    }

    let mut rng = HarnessRng::derived(seed, "split");
    let keys: Vec<u64> = dataset.interactions().iter().map(|_| rng.next_u64()).collect();

    let mut train: Vec<Interaction> = Vec::new();
    let mut test: Vec<Interaction> = Vec::new();
    let mut start = 0;
    let all = dataset.interactions();
    while start < all.len() {
        let end = start + all[start..].iter().take_while(|it| it.user == all[start].user).count();
        let mut order: Vec<usize> = (start..end).collect();
        order.sort_by_key(|&i| (all[i].timestamp, keys[i]));
        let n = order.len();
        let n_test = match scheme {
            SplitScheme::TemporalHoldout { fraction } => {
                ((fraction * n as f64).round() as usize).min(n - 1)
            }
            SplitScheme::LeaveLastK { k } => k,
        };
        for (pos, &i) in order.iter().enumerate() {
            if pos + n_test >= n {
                test.push(all[i].clone());
            } else {
                train.push(all[i].clone());
            }
        }
        start = end;
    }
    if test.is_empty() {
        return Err(Error::data("split produced an empty test set"));
    }
    Ok(Split {
        train: dataset.derive(train),
        test: dataset.derive(test),
        scheme,
        seed,
    })
}
