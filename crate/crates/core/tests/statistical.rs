//! Seeded statistical checks and frozen regression bounds. These fit many
//! models; run with `--release` when iterating.

use std::collections::{BTreeSet, HashSet};

use datamin::analysis::{cross_user_impact, disparity_under_minimisation};
use datamin::dataset::{generate_synthetic, split, Dataset, Split, SplitScheme, SyntheticSpec};
use datamin::metrics::{EvalOptions, MetricKind};
use datamin::minimisation::{
    apply, build_learning_curve, prediction_error, MinimisationPlan, Strategy, StrategyKind,
};
use datamin::models::{MfConfig, ModelConfig, Similarity};

fn spec(n_users: usize, n_items: usize, per_user: usize, noise_sd: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_users,
        n_items,
        latent_dim: 4,
        group_fractions: vec![],
        group_preference_shift: 0.0,
        noise_sd,
        interactions_per_user: per_user,
        seed,
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

type Key = (String, String, u64, u64);

fn keys(d: &Dataset) -> HashSet<Key> {
    d.interactions()
        .iter()
        .map(|it| (it.user.clone(), it.item.clone(), it.rating.to_bits(), it.timestamp))
        .collect()
}

#[test]
fn shuffle_moves_about_p_of_interactions() {
    let data = generate_synthetic(&spec(200, 100, 20, 0.3, 3)).unwrap();
    let before = keys(&data);
    for p in [0.1, 0.5, 0.9] {
        let moved: Vec<f64> = (0..100u64)
            .map(|seed| {
                let out = apply(&MinimisationPlan::new(Strategy::Shuffle(p), seed), &data).unwrap();
                let stayed = keys(&out).intersection(&before).count();
                1.0 - stayed as f64 / data.len() as f64
            })
            .collect();
        let (m, se) = mean_and_se(&moved);
        assert!((m - p).abs() <= 3.0 * se, "p={p}: moved {m:.5} +- {se:.5}");
    }
}

fn grouped_split(shift: f64, seed: u64) -> Split {
    let mut s = spec(300, 100, 30, 0.3, seed);
    s.group_fractions = vec![("majority".into(), 0.8), ("minority".into(), 0.2)];
    s.group_preference_shift = shift;
    split(&generate_synthetic(&s).unwrap(), SplitScheme::LeaveLastK { k: 5 }, seed).unwrap()
}

fn group_gaps(shift: f64, strategy: Strategy) -> Vec<f64> {
    let model = ModelConfig::MfSgd(MfConfig::default());
    (0..20u64)
        .map(|seed| {
            let s = grouped_split(shift, 1000 + seed);
            let r = disparity_under_minimisation(&s, &model, MetricKind::Rmse, strategy, &[seed], &EvalOptions::default())
                .unwrap();
            r.per_group["majority"] - r.per_group["minority"]
        })
        .collect()
}

#[test]
fn identical_groups_show_no_disparity_under_random_budget() {
    let gaps = group_gaps(0.0, Strategy::Random(5));
    let (m, se) = mean_and_se(&gaps);
    assert!(m.abs() <= 3.0 * se, "mean gap {m:.5}, se {se:.5}");
}

#[test]
fn shifted_minority_loses_more_under_recency() {
    let gaps = group_gaps(2.0, Strategy::Recency(5));
    let (m, se) = mean_and_se(&gaps);
    println!("shifted minority gap: mean {m:.5}, se {se:.5}");
    // observed mean gap 0.097 over these 20 seeds
    assert!(m > 0.05, "mean gap {m:.5}");
    assert!(gaps.iter().filter(|g| **g > 0.0).count() >= 16);
}

#[test]
fn removing_one_user_barely_moves_popularity() {
    let data = generate_synthetic(&spec(1000, 200, 20, 0.3, 5)).unwrap();
    let s = split(&data, SplitScheme::LeaveLastK { k: 3 }, 0).unwrap();
    let removed = BTreeSet::from(["u042".to_string()]);
    let impact = cross_user_impact(
        &s,
        &ModelConfig::popularity(),
        MetricKind::Rmse,
        &removed,
        0,
        &EvalOptions::default(),
    )
    .unwrap();
    println!("cross-user: mean_abs {:e}, max_abs {:e}", impact.mean_abs, impact.max_abs);
    assert_eq!(impact.deltas.len(), 999);
    assert!(impact.max_abs > 0.0);
    // observed max_abs 6.5e-3
    assert!(impact.max_abs < 1e-2, "max_abs {}", impact.max_abs);
}

#[test]
fn noise_free_curve_extrapolates_to_double_budget() {
    let data = generate_synthetic(&spec(400, 120, 60, 0.0, 9)).unwrap();
    let s = split(&data, SplitScheme::LeaveLastK { k: 5 }, 0).unwrap();
    let model = ModelConfig::MfSgd(MfConfig {
        latent_dim: 4,
        learning_rate: 0.02,
        regularization: 0.01,
        ..MfConfig::default()
    });
    let opts = EvalOptions::default();
    let fitted = build_learning_curve(&s, &model, MetricKind::Rmse, StrategyKind::Random, &[12, 16, 20, 24], &[0, 1], &opts)
        .unwrap();
    let held = build_learning_curve(&s, &model, MetricKind::Rmse, StrategyKind::Random, &[12, 16, 20, 24, 48], &[0, 1], &opts)
        .unwrap();
    let holdout: Vec<(usize, f64)> = held.means().into_iter().filter(|(b, _)| *b == 48).collect();
    let err = prediction_error(&fitted, &holdout).unwrap();
    println!("curve {:?} fit {:?} holdout {holdout:?} error {err:?}", fitted.means(), fitted.fit);
    assert!(err.max_abs.is_finite());
    // observed 0.257 at budget 48
    assert!(err.max_abs < 0.4, "{err:?}");
}

#[test]
fn every_model_kind_yields_a_finite_curve_from_budget_one() {
    let data = generate_synthetic(&spec(80, 40, 12, 0.3, 2)).unwrap();
    let s = split(&data, SplitScheme::LeaveLastK { k: 2 }, 0).unwrap();
    for model in [
        ModelConfig::popularity(),
        ModelConfig::ItemKnn {
            neighbors: 10,
            similarity: Similarity::AdjustedCosine,
        },
        ModelConfig::MfSgd(MfConfig {
            epochs: 10,
            ..MfConfig::default()
        }),
    ] {
        for metric in [MetricKind::Rmse, MetricKind::Ndcg(10)] {
            let c = build_learning_curve(&s, &model, metric, StrategyKind::Recency, &[1, 2, 4, 8], &[0, 1], &EvalOptions::default())
                .unwrap();
            assert_eq!(c.failed_cells, 0);
            assert_eq!(c.points.len(), 8);
            assert!(c.points.iter().all(|p| p.value.is_finite()), "{} {metric}", model.kind_name());
        }
    }
}
