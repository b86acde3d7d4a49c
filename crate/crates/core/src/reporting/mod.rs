//! Operator plumbing: config loading and echo, non-clobbering writes, SVG
//! charts and CSV summaries.

mod config;
mod io;
mod svg;

pub use config::{load_config, ResolvedConfig, SCHEMA};
pub use io::{atomic_write, free_path};
pub use svg::{bar_chart, line_chart};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::frozen_lake::{median, CSV_HEADER};
use crate::toy_lm::TOY_CSV_HEADER;

/// Merges run CSVs (Frozen Lake or toy LM) into one table with a row per
/// `(experiment, method)`: run count, median and mean of the headline metric
/// (`mse` or `exact_match`).
pub fn summarize_csvs(files: &[(String, String)]) -> Result<String> {
    let mut groups: BTreeMap<(&str, String), Vec<f64>> = BTreeMap::new();
    for (name, text) in files {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or("").trim();
        let kind = if header == CSV_HEADER {
            "frozenlake"
        } else if header == TOY_CSV_HEADER {
            "toylm"
        } else {
            return Err(Error::Config(format!("{name}: unrecognised header {header:?}")));
        };
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let metric = fields.get(2).and_then(|f| f.parse::<f64>().ok());
            match (fields.len(), metric) {
                (5, Some(m)) => groups.entry((kind, fields[0].to_string())).or_default().push(m),
                _ => return Err(Error::Config(format!("{name}: malformed row {}", i + 2))),
            }
        }
    }
    let mut out = String::from("experiment,method,runs,median,mean\n");
    for ((kind, method), mut v) in groups {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let n = v.len();
        out.push_str(&format!("{kind},{method},{n},{},{}\n", median(&mut v), mean));
    }
    Ok(out)
}
