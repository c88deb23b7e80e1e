//! Per-replication rows and their aggregation across replications.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Adjustment, Parameter};

/// One estimate as written by the `estimate` step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub parameter: Parameter,
    pub adjustment: Adjustment,
    pub query: String,
    pub conditioning: String,
    pub value: f64,
    pub n: usize,
}

/// An estimate compared with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub replication: usize,
    pub parameter: Parameter,
    pub adjustment: Adjustment,
    pub query: String,
    pub conditioning: String,
    pub estimate: f64,
    pub truth: Option<f64>,
    pub squared_error: Option<f64>,
    pub absolute_error: Option<f64>,
}

impl ReportRow {
    pub fn new(replication: usize, est: &EstimateRow, truth: Option<f64>) -> Self {
        let err = truth.map(|t| est.value - t);
        ReportRow {
            replication,
            parameter: est.parameter,
            adjustment: est.adjustment,
            query: est.query.clone(),
            conditioning: est.conditioning.clone(),
            estimate: est.value,
            truth,
            squared_error: err.map(|e| e * e),
            absolute_error: err.map(f64::abs),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    /// Sample standard deviation over `sqrt(k)`; 0 for a single value.
    pub std_error: f64,
}

/// Mean, median and standard error; values are summed in the given order.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    let k = values.len();
    if k == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if k % 2 == 1 {
        sorted[k / 2]
    } else {
        0.5 * (sorted[k / 2 - 1] + sorted[k / 2])
    };
    let std_error = if k > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (k - 1) as f64 / k as f64).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        mean,
        median,
        std_error,
    })
}

/// Label of the aggregate row averaging every query of a parameter.
pub const ALL_QUERIES: &str = "ALL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub parameter: Parameter,
    pub adjustment: Adjustment,
    pub query: String,
    pub conditioning: String,
    pub replications: usize,
    pub estimate_mean: Option<f64>,
    pub squared_error_mean: Option<f64>,
    pub squared_error_median: Option<f64>,
    pub squared_error_se: Option<f64>,
    pub absolute_error_mean: Option<f64>,
    pub absolute_error_median: Option<f64>,
    pub absolute_error_se: Option<f64>,
}

impl AggregateRow {
    fn new(parameter: Parameter, adjustment: Adjustment, query: String, conditioning: String) -> Self {
        AggregateRow {
            parameter,
            adjustment,
            query,
            conditioning,
            replications: 0,
            estimate_mean: None,
            squared_error_mean: None,
            squared_error_median: None,
            squared_error_se: None,
            absolute_error_mean: None,
            absolute_error_median: None,
            absolute_error_se: None,
        }
    }

    fn set_errors(&mut self, sq: &[f64], abs: &[f64]) {
        if let Some(s) = summarize(sq) {
            self.squared_error_mean = Some(s.mean);
            self.squared_error_median = Some(s.median);
            self.squared_error_se = Some(s.std_error);
        }
        if let Some(s) = summarize(abs) {
            self.absolute_error_mean = Some(s.mean);
            self.absolute_error_median = Some(s.median);
            self.absolute_error_se = Some(s.std_error);
        }
    }
}

/// Per-query statistics across replications, followed by one `ALL` row per
/// (parameter, adjustment) summarizing each replication's mean error over
/// its queries. Groups keep their first-appearance order.
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    type Key = (Parameter, Adjustment, String, String);
    let mut order: Vec<Key> = Vec::new();
    let mut groups: BTreeMap<Key, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.parameter, r.adjustment, r.query.clone(), r.conditioning.clone());
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r);
    }
    let mut out = Vec::with_capacity(order.len() + 2);
    for key in &order {
        let g = &groups[key];
        let mut row = AggregateRow::new(key.0, key.1, key.2.clone(), key.3.clone());
        row.replications = g.len();
        let est: Vec<f64> = g.iter().map(|r| r.estimate).collect();
        row.estimate_mean = summarize(&est).map(|s| s.mean);
        let sq: Vec<f64> = g.iter().filter_map(|r| r.squared_error).collect();
        let abs: Vec<f64> = g.iter().filter_map(|r| r.absolute_error).collect();
        row.set_errors(&sq, &abs);
        out.push(row);
    }

    let mut params: Vec<(Parameter, Adjustment)> = Vec::new();
    for key in &order {
        if !params.contains(&(key.0, key.1)) {
            params.push((key.0, key.1));
        }
    }
    for (p, adj) in params {
        // replication -> (squared errors, absolute errors), in row order
        let mut per_rep: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.parameter == p && r.adjustment == adj) {
            let e = per_rep.entry(r.replication).or_default();
            if let (Some(s), Some(a)) = (r.squared_error, r.absolute_error) {
                e.0.push(s);
                e.1.push(a);
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let with_truth: Vec<_> = per_rep.values().filter(|(s, _)| !s.is_empty()).collect();
        let sq: Vec<f64> = with_truth.iter().map(|(s, _)| mean(s)).collect();
        let abs: Vec<f64> = with_truth.iter().map(|(_, a)| mean(a)).collect();
        let mut row = AggregateRow::new(p, adj, ALL_QUERIES.into(), String::new());
        row.replications = per_rep.len();
        row.set_errors(&sq, &abs);
        out.push(row);
    }
    out
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Csv {
        row,
        column: String::new(),
        message: format!("{}: {e}", path.display()),
    }
}

pub fn write_rows<T: Serialize, W: Write>(writer: W, rows: &[T]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `rows` with a header. An empty slice produces an empty file.
pub fn write_csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_rows(std::io::BufWriter::new(f), rows).map_err(|e| csv_error(path, e))
}

pub fn read_rows<T: for<'de> Deserialize<'de>, R: Read>(reader: R) -> std::result::Result<Vec<T>, csv::Error> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

pub fn read_csv_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rows(std::io::BufReader::new(f)).map_err(|e| csv_error(path, e))
}
