use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use proptest::prelude::*;
use proptest::strategy::Strategy as PropStrategy;

use datamin::analysis::pearson;
use datamin::dataset::{read_csv, split, write_csv, CsvSchema, Dataset, Interaction, SplitScheme};
use datamin::metrics::{evaluate, mae, rmse, Aggregation, EvalOptions, MetricKind};
use datamin::minimisation::{
    apply, decide_stop, CurvePoint, LearningCurve, MinimisationPlan, StopDecision, StoppingRule, Strategy,
};
use datamin::models::{fit, MfConfig, ModelConfig, Recommender, Similarity};
use datamin::unlearning::{probe_grid, verify_exactness, withdraw, CostLedger, ModelState, WithdrawalRequest};

/// Users with between `min_len` and 9 distinct items each, ratings on a
/// half-star scale, optional two-group labels.
fn arb_dataset(min_len: usize, grouped: bool) -> impl PropStrategy<Value = Dataset> {
    prop::collection::vec(
        prop::collection::btree_map(0u8..15, (2u8..=10, 0u64..30), min_len..10),
        2..7,
    )
    .prop_map(move |profiles| {
        let rows = profiles
            .into_iter()
            .enumerate()
            .flat_map(|(u, items)| {
                items.into_iter().map(move |(i, (r, t))| {
                    let it = Interaction::new(format!("u{u}"), format!("i{i:02}"), r as f64 / 2.0, t);
                    if grouped {
                        it.with_group(if u % 3 == 0 { "minor" } else { "major" })
                    } else {
                        it
                    }
                })
            })
            .collect();
        Dataset::new(rows, Some((1.0, 5.0))).unwrap()
    })
}

fn ids(d: &Dataset) -> BTreeSet<(String, String)> {
    d.interactions().iter().map(|it| (it.user.clone(), it.item.clone())).collect()
}

/// Scores looked up from a table; unknown pairs score 0.
struct Table(HashMap<(String, String), f64>, fn(f64) -> f64);

impl Recommender for Table {
    fn predict(&self, user: &str, item: &str) -> f64 {
        (self.1)(self.0.get(&(user.to_owned(), item.to_owned())).copied().unwrap_or(0.0))
    }
}

proptest! {
    #[test]
    fn csv_round_trip_is_byte_stable(data in arb_dataset(1, true)) {
        let mut first = Vec::new();
        write_csv(&data, &mut first).unwrap();
        let schema = CsvSchema { bounds: Some((1.0, 5.0)), ..CsvSchema::default() };
        let back = read_csv(first.as_slice(), &schema).unwrap();
        prop_assert_eq!(&back, &data);
        let mut second = Vec::new();
        write_csv(&back, &mut second).unwrap();
        prop_assert_eq!(first, second);
    }

    #[test]
    fn split_partitions_every_interaction(data in arb_dataset(3, false), k in 1usize..3, frac in 0.2f64..0.95, seed: u64) {
        for scheme in [SplitScheme::LeaveLastK { k }, SplitScheme::TemporalHoldout { fraction: frac }] {
            let s = split(&data, scheme, seed).unwrap();
            let (train, test) = (ids(&s.train), ids(&s.test));
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.union(&test).cloned().collect::<BTreeSet<_>>(), ids(&data));
            prop_assert_eq!(s.train.len() + s.test.len(), data.len());
            let train_by = s.train.by_user();
            for (u, tests) in s.test.by_user() {
                let latest_train = train_by[u].iter().map(|it| it.timestamp).max().unwrap();
                prop_assert!(tests.iter().all(|it| it.timestamp >= latest_train));
            }
            prop_assert_eq!(split(&data, scheme, seed).unwrap(), s);
        }
    }

    #[test]
    fn nested_budgets(data in arb_dataset(1, false), k1 in 0usize..10, extra in 0usize..5, seed: u64) {
        let k2 = k1 + extra;
        for make in [Strategy::Recency, Strategy::Popularity, Strategy::ExtremeValue, Strategy::Random] {
            let small = apply(&MinimisationPlan::new(make(k1), seed), &data).unwrap();
            let large = apply(&MinimisationPlan::new(make(k2), seed), &data).unwrap();
            prop_assert!(ids(&small).is_subset(&ids(&large)), "{} not nested in {}", make(k1), make(k2));
            prop_assert_eq!(apply(&MinimisationPlan::new(make(k1), seed), &data).unwrap(), small);
        }
    }

    #[test]
    fn shuffle_never_creates_duplicate_pairs(data in arb_dataset(1, false), p in 0.0f64..=1.0, seed: u64) {
        let out = apply(&MinimisationPlan::new(Strategy::Shuffle(p), seed), &data).unwrap();
        prop_assert_eq!(ids(&out).len(), data.len());
    }

    #[test]
    fn rmse_dominates_mae(errors in prop::collection::vec(-10.0f64..10.0, 1..50)) {
        let (r, m) = (rmse(&errors), mae(&errors));
        prop_assert!(r + 1e-12 >= m && m >= 0.0);
    }

    #[test]
    fn ranking_metrics_depend_only_on_order(
        data in arb_dataset(3, false),
        scores in prop::collection::vec(-3.0f64..3.0, 120),
        k in 1usize..6,
        seed: u64,
    ) {
        let s = split(&data, SplitScheme::LeaveLastK { k: 1 }, seed).unwrap();
        let mut table = HashMap::new();
        let users = data.users();
        let items = data.items();
        for (n, (u, i)) in users.iter().flat_map(|u| items.iter().map(move |i| (u, i))).enumerate() {
            table.insert(((*u).to_owned(), (*i).to_owned()), scores[n % scores.len()]);
        }
        let opts = EvalOptions { negatives: 5, seed };
        let plain = Table(table.clone(), |x| x);
        let affine = Table(table, |x| 2.0 * x + 1.0);
        for agg in [Aggregation::GlobalMean, Aggregation::PerUser] {
            let a = evaluate(&plain, &s, MetricKind::Ndcg(k), agg, &opts).unwrap();
            let b = evaluate(&affine, &s, MetricKind::Ndcg(k), agg, &opts).unwrap();
            prop_assert_eq!(a.value, b.value);
        }
        let hit = |k| evaluate(&plain, &s, MetricKind::HitRate(k), Aggregation::GlobalMean, &opts).unwrap().summary();
        prop_assert!(hit(k) <= hit(k + 1));
        let per_user = evaluate(&plain, &s, MetricKind::Ndcg(k), Aggregation::PerUser, &opts).unwrap();
        let global = evaluate(&plain, &s, MetricKind::Ndcg(k), Aggregation::GlobalMean, &opts).unwrap();
        prop_assert!((per_user.summary() - global.summary()).abs() < 1e-12);
    }

    #[test]
    fn stopping_is_monotone_in_epsilon(
        a in 0.1f64..5.0,
        b in 0.1f64..1.5,
        c in 0.0f64..1.0,
        e1 in 1e-4f64..0.2,
        e2 in 1e-4f64..0.2,
    ) {
        let points = [1usize, 2, 4, 8, 16, 32]
            .iter()
            .map(|&n| CurvePoint { budget: n, seed: 0, value: a * (n as f64).powf(-b) + c })
            .collect();
        let curve = LearningCurve::from_points(points);
        let grid: Vec<usize> = (1..=12).map(|i| 1usize << i).collect();
        let stop = |eps| match decide_stop(&curve, &StoppingRule { epsilon: eps, grid: grid.clone() }).unwrap() {
            StopDecision::StopAt(k) => k,
            StopDecision::Continue => usize::MAX,
        };
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        prop_assert!(stop(hi) <= stop(lo));
    }

    #[test]
    fn pearson_ignores_positive_affine_maps(
        pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..30),
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let zs: Vec<f64> = ys.iter().map(|y| scale * y + shift).collect();
        if let (Some(r1), Some(r2)) = (pearson(&xs, &ys), pearson(&xs, &zs)) {
            prop_assert!((r1 - r2).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sequential_withdrawals_equal_one_combined(data in arb_dataset(1, false), a in 0usize..6, b in 0usize..6, seed: u64) {
        let users = data.users();
        let (ua, ub) = (users[a % users.len()].to_owned(), users[b % users.len()].to_owned());
        if BTreeSet::from([ua.clone(), ub.clone()]).len() == users.len() {
            return Ok(());
        }
        let configs = [
            ModelConfig::popularity(),
            ModelConfig::ItemKnn { neighbors: 3, similarity: Similarity::AdjustedCosine },
            ModelConfig::MfSgd(MfConfig { latent_dim: 2, epochs: 3, ..MfConfig::default() }),
        ];
        let probes = probe_grid(&[&data]);
        for cfg in configs {
            let state = ModelState::fit(&cfg, &data, seed).unwrap();
            let mut ledger = CostLedger::new();
            let first = withdraw(&state, &WithdrawalRequest::new([ua.clone()], 1).unwrap(), &mut ledger).unwrap();
            let second = withdraw(&first.state, &WithdrawalRequest::new([ub.clone()], 2).unwrap(), &mut ledger).unwrap();
            let both = withdraw(&state, &WithdrawalRequest::new([ua.clone(), ub.clone()], 3).unwrap(), &mut CostLedger::new()).unwrap();
            prop_assert!(verify_exactness(&second.state.model, &both.state.model, &probes).exact);
            let totals = ledger.totals();
            prop_assert_eq!(totals.retrains, 2);
            prop_assert_eq!(totals.sgd_updates, first.delta.sgd_updates + second.delta.sgd_updates);
        }
    }

    #[test]
    fn rank_is_top_k_by_predict(data in arb_dataset(2, false), k in 1usize..8, seed: u64) {
        for cfg in [ModelConfig::popularity(), ModelConfig::ItemKnn { neighbors: 4, similarity: Similarity::Cosine }] {
            let (model, _) = fit(&cfg, &data, seed).unwrap();
            let items = data.items();
            for user in data.users() {
                let got = model.rank(user, &items, k);
                let mut oracle: Vec<(f64, &str)> = items.iter().map(|i| (model.predict(user, i), *i)).collect();
                oracle.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(y.1)));
                let expected: Vec<String> = oracle.iter().take(k).map(|(_, i)| (*i).to_owned()).collect();
                prop_assert_eq!(got, expected);
            }
        }
    }

    #[test]
    fn metric_ranges(data in arb_dataset(3, true), seed: u64) {
        let s = split(&data, SplitScheme::LeaveLastK { k: 1 }, seed).unwrap();
        let (model, _) = fit(&ModelConfig::popularity(), &s.train, seed).unwrap();
        let opts = EvalOptions { negatives: 4, seed };
        for metric in [MetricKind::Rmse, MetricKind::Mae, MetricKind::Ndcg(3), MetricKind::HitRate(2)] {
            let r = evaluate(&model, &s, metric, Aggregation::PerGroup, &opts).unwrap();
            let values: BTreeMap<String, f64> = r.scoped().unwrap().clone();
            prop_assert!(values.values().all(|v| *v >= 0.0 && v.is_finite()));
            if !metric.lower_is_better() {
                prop_assert!(values.values().all(|v| *v <= 1.0));
            }
            prop_assert_eq!(r.n_evaluated + r.n_skipped_cold, s.test.users().len());
        }
        let users: HashSet<&str> = s.test.users().into_iter().collect();
        prop_assert_eq!(users.len(), data.users().len());
    }
}
