//! Biased matrix factorisation trained by plain SGD.
//!
//! Objective, summed over training examples:
//!
//! ```text
//! (r - mu - b_u - b_i - p_u . q_i)^2 + reg * (|p_u|^2 + |q_i|^2 + b_u^2 + b_i^2)
//! ```
//!
//! `mu` is the training mean and stays fixed. Each step moves every
//! parameter along [`descent_direction`] scaled by the learning rate.

use serde::Deserialize;

use super::{FitStats, PopularityModel, Recommender, Vocab, DEFAULT_DAMPING};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::HarnessRng;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfConfig {
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub regularization: f64,
    pub epochs: usize,
    /// Factors start uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// When false only the biases are trained.
    pub train_factors: bool,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            learning_rate: 0.01,
            regularization: 0.05,
            epochs: 50,
            init_scale: 0.1,
            train_factors: true,
        }
    }
}

impl MfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("mf_sgd latent_dim must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("mf_sgd epochs must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("mf_sgd learning_rate must be > 0"));
        }
        if !(self.regularization >= 0.0 && self.regularization.is_finite()) {
            return Err(Error::config("mf_sgd regularization must be >= 0"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("mf_sgd init_scale must be >= 0"));
        }
        Ok(())
    }
}

/// Loss contribution of one example.
pub fn pointwise_loss(
    mu: f64,
    user_bias: f64,
    item_bias: f64,
    p: &[f64],
    q: &[f64],
    rating: f64,
    reg: f64,
) -> f64 {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let err = rating - mu - user_bias - item_bias - dot;
    let norms: f64 = p.iter().chain(q).map(|x| x * x).sum::<f64>() + user_bias.powi(2) + item_bias.powi(2);
    err * err + reg * norms
}

/// Negative half-gradient of [`pointwise_loss`], written into `dp`/`dq`.
///
/// Returns the bias components `(d_user_bias, d_item_bias)`.
#[allow(clippy::too_many_arguments)]
pub fn descent_direction(
    mu: f64,
    user_bias: f64,
    item_bias: f64,
    p: &[f64],
    q: &[f64],
    rating: f64,
    reg: f64,
    dp: &mut [f64],
    dq: &mut [f64],
) -> (f64, f64) {
    let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
    let err = rating - mu - user_bias - item_bias - dot;
    for k in 0..p.len() {
        dp[k] = err * q[k] - reg * p[k];
        dq[k] = err * p[k] - reg * q[k];
    }
    (err - reg * user_bias, err - reg * item_bias)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfModel {
    dim: usize,
    global_mean: f64,
    users: Vocab,
    items: Vocab,
    user_bias: Vec<f64>,
    item_bias: Vec<f64>,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    epoch_losses: Vec<f64>,
    fallback: PopularityModel,
    bounds: (f64, f64),
}

impl MfModel {
    pub fn fit(train: &Dataset, config: &MfConfig, seed: u64) -> Result<(Self, FitStats)> {
        config.validate()?;
        let fallback = PopularityModel::fit(train, DEFAULT_DAMPING)?;
        let dim = config.latent_dim;
        let users = Vocab::new(train.users());
        let items = Vocab::new(train.items());
        let global_mean = fallback.global_mean();

        let mut rng = HarnessRng::derived(seed, "mf_sgd");
        let s = config.init_scale;
        let user_factors: Vec<f64> = (0..users.len() * dim).map(|_| rng.uniform_range(-s, s)).collect();
        let item_factors: Vec<f64> = (0..items.len() * dim).map(|_| rng.uniform_range(-s, s)).collect();

        let examples: Vec<(usize, usize, f64)> = train
            .interactions()
            .iter()
            .map(|it| (users.get(&it.user).unwrap(), items.get(&it.item).unwrap(), it.rating))
            .collect();

        let mut model = Self {
            dim,
            global_mean,
            user_bias: vec![0.0; users.len()],
            item_bias: vec![0.0; items.len()],
            users,
            items,
            user_factors,
            item_factors,
            epoch_losses: Vec::with_capacity(config.epochs),
            fallback,
            bounds: train.rating_bounds(),
        };

        let lr = config.learning_rate;
        let factor_lr = if config.train_factors { lr } else { 0.0 };
        let reg = config.regularization;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut dp = vec![0.0; dim];
        let mut dq = vec![0.0; dim];
        let mut updates = 0u64;
        for epoch in 0..config.epochs {
            rng.shuffle(&mut order);
            for &e in &order {
                let (u, i, r) = examples[e];
                let p = &mut model.user_factors[u * dim..(u + 1) * dim];
                let q = &mut model.item_factors[i * dim..(i + 1) * dim];
                let (du, di) = descent_direction(
                    global_mean,
                    model.user_bias[u],
                    model.item_bias[i],
                    p,
                    q,
                    r,
                    reg,
                    &mut dp,
                    &mut dq,
                );
                model.user_bias[u] += lr * du;
                model.item_bias[i] += lr * di;
                for k in 0..dim {
                    p[k] += factor_lr * dp[k];
                    q[k] += factor_lr * dq[k];
                }
                updates += 1;
            }
            let loss = model.training_loss(&examples, reg);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            model.epoch_losses.push(loss);
        }

        Ok((
            model,
            FitStats {
                sgd_updates: updates,
                similarity_ops: 0,
            },
        ))
    }

    fn training_loss(&self, examples: &[(usize, usize, f64)], reg: f64) -> f64 {
        let d = self.dim;
        examples
            .iter()
            .map(|&(u, i, r)| {
                pointwise_loss(
                    self.global_mean,
                    self.user_bias[u],
                    self.item_bias[i],
                    &self.user_factors[u * d..(u + 1) * d],
                    &self.item_factors[i * d..(i + 1) * d],
                    r,
                    reg,
                )
            })
            .sum()
    }

    /// Total training objective after each epoch.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.user_factors
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.item_factors
    }

    pub(super) fn dump_rows(&self, rows: &mut Vec<(String, String, usize, f64)>) {
        rows.push(("global_mean".into(), String::new(), 0, self.global_mean));
        for (u, b) in self.user_bias.iter().enumerate() {
            rows.push(("user_bias".into(), self.users.id(u).to_owned(), 0, *b));
        }
        for (i, b) in self.item_bias.iter().enumerate() {
            rows.push(("item_bias".into(), self.items.id(i).to_owned(), 0, *b));
        }
        for (u, chunk) in self.user_factors.chunks(self.dim).enumerate() {
            for (k, v) in chunk.iter().enumerate() {
                rows.push(("user_factor".into(), self.users.id(u).to_owned(), k, *v));
            }
        }
        for (i, chunk) in self.item_factors.chunks(self.dim).enumerate() {
            for (k, v) in chunk.iter().enumerate() {
                rows.push(("item_factor".into(), self.items.id(i).to_owned(), k, *v));
            }
        }
    }
}

impl Recommender for MfModel {
    fn predict(&self, user: &str, item: &str) -> f64 {
        let (Some(u), Some(i)) = (self.users.get(user), self.items.get(item)) else {
            return self.fallback.predict(user, item);
        };
        let d = self.dim;
        let dot: f64 = self.user_factors[u * d..(u + 1) * d]
            .iter()
            .zip(&self.item_factors[i * d..(i + 1) * d])
            .map(|(a, b)| a * b)
            .sum();
        (self.global_mean + self.user_bias[u] + self.item_bias[i] + dot).clamp(self.bounds.0, self.bounds.1)
    }
}
