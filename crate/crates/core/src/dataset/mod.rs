//! Interaction logs, synthetic latent-factor data and train/test splits.
//!
//! A [`Dataset`] is immutable once built. Interactions are kept in canonical
//! order (user ascending, then item ascending) with at most one interaction
//! per (user, item) pair.

mod csv_io;
mod split;
mod synthetic;

pub use csv_io::{load_csv, read_csv, write_csv, CsvSchema};
pub use split::{split, Split, SplitScheme};
pub use synthetic::{generate_synthetic, SyntheticSpec};

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// One (user, item, rating, timestamp) event.
#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub rating: f64,
    /// Seconds since epoch.
    pub timestamp: u64,
    pub group: Option<String>,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, rating: f64, timestamp: u64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            rating,
            timestamp,
            group: None,
        }
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    interactions: Vec<Interaction>,
    rating_min: f64,
    rating_max: f64,
    group_map: BTreeMap<String, String>,
}

impl Dataset {
    /// Build a dataset from raw interactions.
    ///
    /// Duplicate (user, item) pairs are collapsed to the one with the latest
    /// timestamp; on equal timestamps the later input row wins. Rating bounds
    /// are inferred from the observed min/max unless `bounds` is given.
    pub fn new(interactions: Vec<Interaction>, bounds: Option<(f64, f64)>) -> Result<Self> {
        let mut latest: BTreeMap<(String, String), Interaction> = BTreeMap::new();
        for it in interactions {
            if !it.rating.is_finite() {
                return Err(Error::data(format!(
                    "non-finite rating for ({}, {})",
                    it.user, it.item
                )));
            }
            let key = (it.user.clone(), it.item.clone());
            match latest.get(&key) {
                Some(prev) if prev.timestamp > it.timestamp => {}
                _ => {
                    latest.insert(key, it);
                }
            }
        }
        let interactions: Vec<Interaction> = latest.into_values().collect();
        if interactions.is_empty() && bounds.is_none() {
            return Err(Error::data("dataset is empty"));
        }

        let (rating_min, rating_max) = match bounds {
            Some((lo, hi)) => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::data(format!("invalid rating bounds [{lo}, {hi}]")));
                }
                (lo, hi)
            }
            None => interactions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), it| {
                (lo.min(it.rating), hi.max(it.rating))
            }),
        };
        if let Some(it) = interactions
            .iter()
            .find(|it| it.rating < rating_min || it.rating > rating_max)
        {
            return Err(Error::data(format!(
                "rating {} for ({}, {}) outside bounds [{rating_min}, {rating_max}]",
                it.rating, it.user, it.item
            )));
        }

        let mut group_map = BTreeMap::new();
        for it in &interactions {
            if let Some(g) = &it.group {
                match group_map.get(&it.user) {
                    Some(existing) if existing != g => {
                        return Err(Error::data(format!(
                            "user {} has conflicting groups {existing} and {g}",
                            it.user
                        )));
                    }
                    Some(_) => {}
                    None => {
                        group_map.insert(it.user.clone(), g.clone());
                    }
                }
            }
        }

        Ok(Self {
            interactions,
            rating_min,
            rating_max,
            group_map,
        })
    }

    /// A dataset over a subset or rearrangement of this one's interactions,
    /// keeping the rating bounds and group assignments.
    ///
    /// Callers guarantee there are no duplicate (user, item) pairs and that
    /// ratings are within bounds.
    pub(crate) fn derive(&self, mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_by(|a, b| (&a.user, &a.item).cmp(&(&b.user, &b.item)));
        debug_assert!(interactions
            .windows(2)
            .all(|w| (&w[0].user, &w[0].item) != (&w[1].user, &w[1].item)));
        let users: BTreeSet<&str> = interactions.iter().map(|it| it.user.as_str()).collect();
        let group_map = self
            .group_map
            .iter()
            .filter(|(u, _)| users.contains(u.as_str()))
            .map(|(u, g)| (u.clone(), g.clone()))
            .collect();
        Self {
            interactions,
            rating_min: self.rating_min,
            rating_max: self.rating_max,
            group_map,
        }
    }

    /// Keep the interactions matching `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Interaction) -> bool) -> Self {
        self.derive(self.interactions.iter().filter(|it| keep(it)).cloned().collect())
    }

    /// Remove all interactions of the given users.
    pub fn without_users(&self, users: &BTreeSet<String>) -> Self {
        self.filter(|it| !users.contains(&it.user))
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn rating_bounds(&self) -> (f64, f64) {
        (self.rating_min, self.rating_max)
    }

    pub fn clip(&self, rating: f64) -> f64 {
        rating.clamp(self.rating_min, self.rating_max)
    }

    pub fn group_map(&self) -> &BTreeMap<String, String> {
        &self.group_map
    }

    pub fn group_of(&self, user: &str) -> Option<&str> {
        self.group_map.get(user).map(String::as_str)
    }

    pub fn has_groups(&self) -> bool {
        !self.group_map.is_empty()
    }

    /// Distinct users, ascending.
    pub fn users(&self) -> Vec<&str> {
        let mut users: Vec<&str> = self.interactions.iter().map(|it| it.user.as_str()).collect();
        users.dedup();
        users
    }

    /// Distinct items, ascending.
    pub fn items(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.interactions.iter().map(|it| it.item.as_str()).collect();
        set.into_iter().collect()
    }

    /// Interactions grouped by user, users ascending, each profile in item order.
    pub fn by_user(&self) -> BTreeMap<&str, Vec<&Interaction>> {
        let mut map: BTreeMap<&str, Vec<&Interaction>> = BTreeMap::new();
        for it in &self.interactions {
            map.entry(it.user.as_str()).or_default().push(it);
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_pair_keeps_latest_timestamp() {
        let ds = Dataset::new(
            vec![
                Interaction::new("u1", "i1", 2.0, 9),
                Interaction::new("u1", "i1", 4.0, 5),
                Interaction::new("u2", "i1", 3.0, 1),
            ],
            None,
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        let kept = &ds.interactions()[0];
        assert_eq!((kept.rating, kept.timestamp), (2.0, 9));
    }

    #[test]
    fn equal_timestamps_later_row_wins() {
        let ds = Dataset::new(
            vec![Interaction::new("u", "i", 1.0, 3), Interaction::new("u", "i", 5.0, 3)],
            Some((1.0, 5.0)),
        )
        .unwrap();
        assert_eq!(ds.interactions()[0].rating, 5.0);
    }

    #[test]
    fn bounds_inferred_from_observed() {
        let ds = Dataset::new(
            vec![Interaction::new("a", "x", 1.0, 0), Interaction::new("b", "x", 5.0, 0)],
            None,
        )
        .unwrap();
        assert_eq!(ds.rating_bounds(), (1.0, 5.0));
    }

    #[test]
    fn rating_outside_bounds_rejected() {
        let err = Dataset::new(vec![Interaction::new("a", "x", 6.0, 0)], Some((1.0, 5.0)));
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn conflicting_groups_rejected() {
        let err = Dataset::new(
            vec![
                Interaction::new("a", "x", 1.0, 0).with_group("g1"),
                Interaction::new("a", "y", 1.0, 0).with_group("g2"),
            ],
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn empty_without_bounds_rejected() {
        assert!(Dataset::new(vec![], None).is_err());
    }
}
