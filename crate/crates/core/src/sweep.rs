//! Sweep grids and the best-per-variant results table.

use std::collections::BTreeMap;

use crate::config::KEYS;
use crate::error::{Error, Result};

/// Grid keys that form the learning-rate × batch-size axes; every other
/// grid key distinguishes variants.
pub const TUNING_KEYS: [&str; 4] = ["lr1", "lr2", "batch1", "batch2"];

pub const TABLE_HEADER: &str = "variant,metric,lr,batch_size";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

/// Parses `key=v1,v2,...`.
pub fn parse_axis(spec: &str) -> Result<GridAxis> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("grid {spec:?} must look like key=v1,v2")))?;
    let key = key.trim();
    if !KEYS.contains(&key) {
        return Err(Error::Config(format!("grid key {key:?} is not a configuration key")));
    }
    let values: Vec<String> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(String::from)
        .collect();
    if values.is_empty() {
        return Err(Error::Config(format!("grid {key} lists no values")));
    }
    Ok(GridAxis { key: key.to_string(), values })
}

/// One grid cell: its configuration entries in axis order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub entries: Vec<(String, String)>,
}

impl Cell {
    /// Variant label built from the non-tuning entries, `base` when none.
    pub fn variant(&self) -> String {
        let parts: Vec<String> = self
            .entries
            .iter()
            .filter(|(k, _)| !TUNING_KEYS.contains(&k.as_str()))
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(" ")
        }
    }
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn expand(axes: &[GridAxis]) -> Result<Vec<Cell>> {
    if axes.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut seen = Vec::new();
    for a in axes {
        if seen.contains(&a.key) {
            return Err(Error::Config(format!("grid key {} given twice", a.key)));
        }
        seen.push(a.key.clone());
    }
    let mut cells = vec![Cell { entries: Vec::new() }];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let mut c = cell.clone();
                c.entries.push((axis.key.clone(), v.clone()));
                next.push(c);
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Outcome of one cell; `metric` is `None` for a failed cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub variant: String,
    pub metric: Option<f64>,
    pub lr: f64,
    pub batch_size: usize,
}

/// Best cell per variant, sorted by metric descending. Variants whose cells
/// all failed come last with an empty metric.
pub fn best_per_variant(results: &[CellResult]) -> Vec<CellResult> {
    let mut best: BTreeMap<&str, &CellResult> = BTreeMap::new();
    for r in results {
        let better = match best.get(r.variant.as_str()) {
            None => true,
            Some(prev) => match (r.metric, prev.metric) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                _ => false,
            },
        };
        if better {
            best.insert(&r.variant, r);
        }
    }
    let mut rows: Vec<CellResult> = best.into_values().cloned().collect();
    rows.sort_by(|a, b| match (a.metric, b.metric) {
        (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.variant.cmp(&b.variant)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.variant.cmp(&b.variant),
    });
    rows
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn render_table(rows: &[CellResult]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let metric = r.metric.map_or(String::new(), |m| format!("{m:.6}"));
        out.push_str(&format!(
            "{},{},{:e},{}\n",
            csv_field(&r.variant),
            metric,
            r.lr,
            r.batch_size
        ));
    }
    out
}
