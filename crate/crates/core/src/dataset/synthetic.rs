//! Latent-factor synthetic ratings with optional group structure.
//!
//! Generation, in stream order from a single [`HarnessRng`] seeded with
//! `spec.seed`:
//!
//! 1. item factors `q_i ~ N(0, 1/latent_dim)` per component;
//! 2. users are assigned to groups contiguously by cumulative fraction;
//! 3. user factors `p_u ~ N(m_g, 1)` per component, where `m_g = 0` for the
//!    first group and group `g >= 1` is displaced by `group_preference_shift`
//!    along axis `(g - 1) mod latent_dim`;
//! 4. per user: a uniform sample of `interactions_per_user` distinct items
//!    (partial Fisher-Yates), a random permutation of timestamps
//!    `1..=interactions_per_user`, then one noise draw per interaction.
//!
//! The raw score `p_u . q_i + N(0, noise_sd)` is clipped to `[-2, 2]` and
//! shifted onto the rating scale `[1, 5]`.

use serde::Deserialize;

use super::{Dataset, Interaction};
use crate::error::{Error, Result};
use crate::rng::HarnessRng;

pub const RATING_MIN: f64 = 1.0;
pub const RATING_MAX: f64 = 5.0;
const RAW_LIMIT: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// `(label, fraction)` pairs summing to one. Empty means no groups.
    #[serde(default)]
    pub group_fractions: Vec<(String, f64)>,
    #[serde(default)]
    pub group_preference_shift: f64,
    #[serde(default)]
    pub noise_sd: f64,
    pub interactions_per_user: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.n_users == 0 || self.n_items == 0 || self.interactions_per_user == 0 {
            return Err(Error::config(
                "n_users, n_items and interactions_per_user must be positive",
            ));
        }
        if self.interactions_per_user > self.n_items {
            return Err(Error::config(format!(
                "interactions_per_user ({}) exceeds n_items ({})",
                self.interactions_per_user, self.n_items
            )));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::config("noise_sd must be a finite value >= 0"));
        }
        if !(self.group_preference_shift >= 0.0 && self.group_preference_shift.is_finite()) {
            return Err(Error::config("group_preference_shift must be a finite value >= 0"));
        }
        if !self.group_fractions.is_empty() {
            if self.group_fractions.iter().any(|(_, f)| !(0.0..=1.0).contains(f)) {
                return Err(Error::config("group fractions must lie in [0, 1]"));
            }
            let total: f64 = self.group_fractions.iter().map(|(_, f)| f).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("group fractions sum to {total}, not 1")));
            }
        }
        Ok(())
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let dim = spec.latent_dim;
    let mut rng = HarnessRng::new(spec.seed);

    let item_sd = 1.0 / (dim as f64).sqrt();
    let item_factors: Vec<Vec<f64>> = (0..spec.n_items)
        .map(|_| (0..dim).map(|_| rng.normal(0.0, item_sd)).collect())
        .collect();

    let user_groups = assign_groups(spec);

    let user_factors: Vec<Vec<f64>> = user_groups
        .iter()
        .map(|g| {
            let mut mean = vec![0.0; dim];
            if let Some(g) = *g {
                if g > 0 {
                    mean[(g - 1) % dim] = spec.group_preference_shift;
                }
            }
            mean.iter().map(|&m| rng.normal(m, 1.0)).collect()
        })
        .collect();

    let user_width = digits(spec.n_users);
    let item_width = digits(spec.n_items);
    let per_user = spec.interactions_per_user;
    let mut interactions = Vec::with_capacity(spec.n_users * per_user);
    let mut pool: Vec<usize> = (0..spec.n_items).collect();
    for (u, p_u) in user_factors.iter().enumerate() {
        pool.iter_mut().enumerate().for_each(|(i, slot)| *slot = i);
        for j in 0..per_user {
            let k = j + rng.below((spec.n_items - j) as u64) as usize;
            pool.swap(j, k);
        }
        let mut timestamps: Vec<u64> = (1..=per_user as u64).collect();
        rng.shuffle(&mut timestamps);

        let user = format!("u{u:0user_width$}");
        let group = user_groups[u].map(|g| spec.group_fractions[g].0.clone());
        for (j, &item) in pool[..per_user].iter().enumerate() {
            let dot: f64 = p_u.iter().zip(&item_factors[item]).map(|(a, b)| a * b).sum();
            let raw = dot + rng.normal(0.0, spec.noise_sd);
            let rating = raw.clamp(-RAW_LIMIT, RAW_LIMIT) + (RATING_MIN + RAW_LIMIT);
            interactions.push(Interaction {
                user: user.clone(),
                item: format!("i{item:0item_width$}"),
                rating,
                timestamp: timestamps[j],
                group: group.clone(),
            });
        }
    }
    Dataset::new(interactions, Some((RATING_MIN, RATING_MAX)))
}

fn assign_groups(spec: &SyntheticSpec) -> Vec<Option<usize>> {
    if spec.group_fractions.is_empty() {
        return vec![None; spec.n_users];
    }
    let mut out = Vec::with_capacity(spec.n_users);
    let mut cumulative = 0.0;
    let mut start = 0usize;
    let last = spec.group_fractions.len() - 1;
    for (g, (_, fraction)) in spec.group_fractions.iter().enumerate() {
        cumulative += fraction;
        let end = if g == last {
            spec.n_users
        } else {
            ((cumulative * spec.n_users as f64).round() as usize).min(spec.n_users)
        };
        out.extend(std::iter::repeat_n(Some(g), end.saturating_sub(start)));
        start = start.max(end);
    }
    out
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}
