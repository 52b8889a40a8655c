//! Learning curves `y = a * n^(-b) + c` and the doubling-gain stopping rule.
//!
//! Fitting is damped Gauss-Newton (Levenberg-Marquardt with diagonal
//! scaling) on the per-budget mean values, at most 200 iterations, stopping
//! once an accepted step moves every parameter by less than 1e-10. The
//! initial guess is `b = 0.5`, `c` the most extreme observed value in the
//! direction the curve travels (minimum for decreasing curves, maximum for
//! increasing ones) and `a` chosen so the curve passes through the first
//! point. `b` is projected onto `b >= 0` after every step.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rayon::prelude::*;

use super::{apply, MinimisationPlan, StrategyKind};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Aggregation, EvalOptions, MetricKind};
use crate::models::{fit, ModelConfig};

const MAX_ITERATIONS: usize = 200;
const STEP_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub budget: usize,
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Root-mean-square residual over the fitted budgets.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl PowerLawFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(-self.b) + self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
    pub fit: Option<PowerLawFit>,
    /// Cells that produced no value (e.g. training divergence).
    pub failed_cells: usize,
}

impl LearningCurve {
    /// Build a curve from raw points, fitting when at least three distinct
    /// budgets are present.
    pub fn from_points(points: Vec<CurvePoint>) -> Self {
        let means = mean_by_budget(&points);
        let fit = if means.len() >= 3 {
            let xs: Vec<f64> = means.iter().map(|(n, _)| *n as f64).collect();
            let ys: Vec<f64> = means.iter().map(|(_, y)| *y).collect();
            fit_power_law(&xs, &ys)
        } else {
            None
        };
        Self {
            points,
            fit,
            failed_cells: 0,
        }
    }

    /// Mean value per budget, budgets ascending.
    pub fn means(&self) -> Vec<(usize, f64)> {
        mean_by_budget(&self.points)
    }

    pub fn budgets(&self) -> BTreeSet<usize> {
        self.points.iter().map(|p| p.budget).collect()
    }
}

fn mean_by_budget(points: &[CurvePoint]) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for p in points {
        let e = acc.entry(p.budget).or_default();
        e.0 += p.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(n, (s, c))| (n, s / c as f64)).collect()
}

fn sse(xs: &[f64], ys: &[f64], theta: [f64; 3]) -> f64 {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| (theta[0] * x.powf(-theta[1]) + theta[2] - y).powi(2))
        .sum()
}

/// Solve a symmetric positive-definite 3x3 system by Cholesky.
fn solve3(a: [[f64; 3]; 3], rhs: [f64; 3]) -> Option<[f64; 3]> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..3 {
        y[i] = (rhs[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        x[i] = (y[i] - (i + 1..3).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    Some(x)
}

/// Least-squares fit of `y = a * x^(-b) + c` with `b >= 0`.
///
/// Returns `None` when the data are unusable (fewer than three points,
/// non-positive budgets, non-finite values) or the iteration diverges.
/// A curve that is flat over the data is reported as `a = 0, b = 0` with
/// `c` the mean fitted value.
pub fn fit_power_law(xs: &[f64], ys: &[f64]) -> Option<PowerLawFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return None;
    }
    if xs.iter().any(|&x| !(x > 0.0 && x.is_finite())) || ys.iter().any(|y| !y.is_finite()) {
        return None;
    }
    let first = xs
        .iter()
        .zip(ys)
        .min_by(|a, b| a.0.total_cmp(b.0))
        .map(|(x, y)| (*x, *y))?;
    let last = xs
        .iter()
        .zip(ys)
        .max_by(|a, b| a.0.total_cmp(b.0))
        .map(|(x, y)| (*x, *y))?;
    let c0 = if first.1 >= last.1 {
        ys.iter().copied().fold(f64::INFINITY, f64::min)
    } else {
        ys.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    };
    let b0 = 0.5;
    let mut theta = [(first.1 - c0) * first.0.powf(b0), b0, c0];
    let mut cost = sse(xs, ys, theta);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < MAX_ITERATIONS {
        iterations += 1;
        let mut jtj = [[0.0; 3]; 3];
        let mut jtr = [0.0; 3];
        for (&x, &y) in xs.iter().zip(ys) {
            let pow = x.powf(-theta[1]);
            let r = theta[0] * pow + theta[2] - y;
            let j = [pow, -theta[0] * x.ln() * pow, 1.0];
            for a in 0..3 {
                jtr[a] += j[a] * r;
                for b in 0..3 {
                    jtj[a][b] += j[a] * j[b];
                }
            }
        }
        if jtr.iter().all(|g| *g == 0.0) {
            converged = true;
            break;
        }
        let mut damped = jtj;
        for k in 0..3 {
            damped[k][k] += lambda * jtj[k][k].max(1e-12);
        }
        let Some(step) = solve3(damped, [-jtr[0], -jtr[1], -jtr[2]]) else {
            lambda *= 10.0;
            if lambda > 1e16 {
                break;
            }
            continue;
        };
        let candidate = [theta[0] + step[0], (theta[1] + step[1]).max(0.0), theta[2] + step[2]];
        let candidate_cost = sse(xs, ys, candidate);
        if candidate_cost.is_finite() && candidate_cost <= cost {
            let moved = (0..3).map(|k| (candidate[k] - theta[k]).abs()).fold(0.0, f64::max);
            theta = candidate;
            cost = candidate_cost;
            lambda = (lambda / 10.0).max(1e-15);
            if moved < STEP_TOLERANCE {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e16 {
                // no downhill step left at any damping: a stationary point
                converged = true;
                break;
            }
        }
    }

    if theta.iter().any(|v| !v.is_finite()) || !cost.is_finite() {
        return None;
    }

    let x_min = first.0;
    let x_max = last.0;
    let span = theta[0].abs() * (x_min.powf(-theta[1]) - x_max.powf(-theta[1])).abs();
    if span <= 1e-12 * theta[2].abs().max(1.0) {
        let mean_fitted =
            xs.iter().map(|&x| theta[0] * x.powf(-theta[1]) + theta[2]).sum::<f64>() / xs.len() as f64;
        theta = [0.0, 0.0, mean_fitted];
        cost = sse(xs, ys, theta);
    }

    Some(PowerLawFit {
        a: theta[0],
        b: theta[1],
        c: theta[2],
        residual: (cost / xs.len() as f64).sqrt(),
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule {
    /// Smallest predicted gain per budget doubling still worth collecting.
    pub epsilon: f64,
    pub grid: Vec<usize>,
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("stopping epsilon must be > 0"));
        }
        if self.grid.is_empty() || self.grid[0] < 1 || self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("stopping grid must be strictly increasing budgets >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    StopAt(usize),
    Continue,
}

/// The smallest grid budget `k` whose predicted gain from `k` to `2k` is
/// below epsilon.
pub fn decide_stop(curve: &LearningCurve, rule: &StoppingRule) -> Result<StopDecision> {
    rule.validate()?;
    let fit = curve.fit.as_ref().ok_or(Error::CurveUnfit)?;
    Ok(rule
        .grid
        .iter()
        .find(|&&k| (fit.predict(k as f64) - fit.predict(2.0 * k as f64)).abs() < rule.epsilon)
        .map_or(StopDecision::Continue, |&k| StopDecision::StopAt(k)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionError {
    pub max_abs: f64,
    pub mean_abs: f64,
}

/// Extrapolation error of the fitted curve at held-out `(budget, observed)`
/// points.
pub fn prediction_error(curve: &LearningCurve, holdout: &[(usize, f64)]) -> Result<PredictionError> {
    if holdout.is_empty() {
        return Err(Error::data("holdout set is empty"));
    }
    let fitted = curve.budgets();
    if let Some((k, _)) = holdout.iter().find(|(k, _)| fitted.contains(k)) {
        return Err(Error::data(format!("holdout budget {k} was used for fitting")));
    }
    let fit = curve.fit.as_ref().ok_or(Error::CurveUnfit)?;
    let errors: Vec<f64> = holdout
        .iter()
        .map(|&(k, y)| (fit.predict(k as f64) - y).abs())
        .collect();
    Ok(PredictionError {
        max_abs: errors.iter().copied().fold(0.0, f64::max),
        mean_abs: errors.iter().sum::<f64>() / errors.len() as f64,
    })
}

/// Fit the model at every `(budget, seed)` cell of a budgeted strategy,
/// evaluate the global metric, and fit the power law to the mean values.
///
/// Each cell uses its seed for both the minimisation plan and the model
/// fit. Cells run in parallel; points come back ordered by budget, then
/// seed. Failed cells are counted, not fatal.
pub fn build_learning_curve(
    split: &Split,
    model: &ModelConfig,
    metric: MetricKind,
    family: StrategyKind,
    grid: &[usize],
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<LearningCurve> {
    let distinct: BTreeSet<usize> = grid.iter().copied().collect();
    if distinct.len() < 3 {
        return Err(Error::data("a learning curve needs at least 3 distinct budgets"));
    }
    if seeds.is_empty() {
        return Err(Error::data("a learning curve needs at least one seed"));
    }
    if distinct.contains(&0) {
        return Err(Error::data("learning-curve budgets must be >= 1"));
    }
    model.validate()?;
    family.with_budget(1)?;

    let cells: Vec<(usize, u64)> = distinct
        .iter()
        .flat_map(|&k| seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results: Vec<Option<CurvePoint>> = cells
        .par_iter()
        .map(|&(budget, seed)| {
            let plan = MinimisationPlan::new(family.with_budget(budget).ok()?, seed);
            let reduced = apply(&plan, &split.train).ok()?;
            let (fitted, _) = fit(model, &reduced, seed).ok()?;
            let report = evaluate(&fitted, split, metric, Aggregation::GlobalMean, opts).ok()?;
            let value = report.summary();
            value.is_finite().then_some(CurvePoint { budget, seed, value })
        })
        .collect();

    let failed_cells = results.iter().filter(|r| r.is_none()).count();
    let mut curve = LearningCurve::from_points(results.into_iter().flatten().collect());
    curve.failed_cells = failed_cells;
    Ok(curve)
}

/// `budget,seed,metric_value`
pub fn write_curve_csv<W: Write>(curve: &LearningCurve, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["budget", "seed", "metric_value"])?;
    for p in &curve.points {
        wtr.write_record([p.budget.to_string(), p.seed.to_string(), p.value.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

/// `a,b,c,residual`; header only when the curve has no fit.
pub fn write_fit_csv<W: Write>(curve: &LearningCurve, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["a", "b", "c", "residual"])?;
    if let Some(f) = &curve.fit {
        wtr.write_record([f.a.to_string(), f.b.to_string(), f.c.to_string(), f.residual.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
