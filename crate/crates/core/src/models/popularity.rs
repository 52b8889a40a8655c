use super::{Recommender, Vocab};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Unpersonalised baseline: global mean plus a damped item bias
/// `sum(r - mu) / (n_i + damping)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityModel {
    global_mean: f64,
    damping: f64,
    items: Vocab,
    item_bias: Vec<f64>,
    bounds: (f64, f64),
}

impl PopularityModel {
    pub fn fit(train: &Dataset, damping: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::data("cannot fit popularity on an empty training set"));
        }
        let n = train.len() as f64;
        let global_mean = train.interactions().iter().map(|it| it.rating).sum::<f64>() / n;
        let items = Vocab::new(train.items());
        let mut sums = vec![0.0; items.len()];
        let mut counts = vec![0usize; items.len()];
        for it in train.interactions() {
            let i = items.get(&it.item).expect("item indexed");
            sums[i] += it.rating - global_mean;
            counts[i] += 1;
        }
        let item_bias = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| {
                let denom = c as f64 + damping;
                if denom > 0.0 {
                    s / denom
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self {
            global_mean,
            damping,
            items,
            item_bias,
            bounds: train.rating_bounds(),
        })
    }

    pub fn global_mean(&self) -> f64 {
        self.global_mean
    }

    pub fn item_bias(&self, item: &str) -> f64 {
        self.items.get(item).map_or(0.0, |i| self.item_bias[i])
    }

    pub(super) fn dump_rows(&self, rows: &mut Vec<(String, String, usize, f64)>) {
        rows.push(("global_mean".into(), String::new(), 0, self.global_mean));
        rows.push(("damping".into(), String::new(), 0, self.damping));
        for (i, b) in self.item_bias.iter().enumerate() {
            rows.push(("item_bias".into(), self.items.id(i).to_owned(), 0, *b));
        }
    }
}

impl Recommender for PopularityModel {
    fn predict(&self, _user: &str, item: &str) -> f64 {
        (self.global_mean + self.item_bias(item)).clamp(self.bounds.0, self.bounds.1)
    }
}
