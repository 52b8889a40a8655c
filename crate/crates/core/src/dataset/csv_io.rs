use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Interaction};
use crate::error::{Error, Result};

/// Column mapping for interaction CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub user: String,
    pub item: String,
    pub rating: String,
    pub timestamp: String,
    /// Optional column; ignored when absent from the header.
    pub group: Option<String>,
    /// Declared rating bounds; inferred from the data when `None`.
    pub bounds: Option<(f64, f64)>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            user: "user".into(),
            item: "item".into(),
            rating: "rating".into(),
            timestamp: "timestamp".into(),
            group: Some("group".into()),
            bounds: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::data(format!("cannot open {}: {e}", path.display())))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rdr.headers().map_err(|e| csv_parse_error(&e, 1))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::data("empty file"));
    }
    let col = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column {name:?}"),
        })
    };
    let user_col = col(&schema.user)?;
    let item_col = col(&schema.item)?;
    let rating_col = col(&schema.rating)?;
    let ts_col = col(&schema.timestamp)?;
    let group_col = schema
        .group
        .as_ref()
        .and_then(|g| headers.iter().position(|h| h == g));

    let mut interactions = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_parse_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let parse_err = |what: &str, raw: &str| Error::Parse {
            line,
            message: format!("invalid {what} {raw:?}"),
        };

        let user = field(user_col);
        let item = field(item_col);
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty user or item".into(),
            });
        }
        let rating: f64 = field(rating_col)
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| parse_err("rating", field(rating_col)))?;
        let timestamp: u64 = field(ts_col)
            .parse()
            .map_err(|_| parse_err("timestamp", field(ts_col)))?;
        if let Some((lo, hi)) = schema.bounds {
            if rating < lo || rating > hi {
                return Err(Error::Parse {
                    line,
                    message: format!("rating {rating} outside declared bounds [{lo}, {hi}]"),
                });
            }
        }
        let group = group_col
            .map(field)
            .filter(|g| !g.is_empty())
            .map(str::to_owned);
        interactions.push(Interaction {
            user: user.to_owned(),
            item: item.to_owned(),
            rating,
            timestamp,
            group,
        });
    }
    if interactions.is_empty() {
        return Err(Error::data("empty file: no interaction rows"));
    }
    Dataset::new(interactions, schema.bounds)
}

fn csv_parse_error(err: &csv::Error, fallback_line: u64) -> Error {
    Error::Parse {
        line: err.position().map_or(fallback_line, |p| p.line()),
        message: err.to_string(),
    }
}

/// Write `user,item,rating,timestamp[,group]` in canonical order.
///
/// The group column is emitted only when the dataset carries groups.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let with_group = dataset.has_groups();
    if with_group {
        wtr.write_record(["user", "item", "rating", "timestamp", "group"])?;
    } else {
        wtr.write_record(["user", "item", "rating", "timestamp"])?;
    }
    for it in dataset.interactions() {
        let rating = it.rating.to_string();
        let ts = it.timestamp.to_string();
        if with_group {
            let group = dataset.group_of(&it.user).unwrap_or("");
            wtr.write_record([it.user.as_str(), &it.item, &rating, &ts, group])?;
        } else {
            wtr.write_record([it.user.as_str(), &it.item, &rating, &ts])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
