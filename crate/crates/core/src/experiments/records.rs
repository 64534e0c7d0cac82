//! Metric records and their CSV form. Floats are written with 17
//! significant digits so every value reads back bit for bit.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

pub(crate) fn sig17<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format_f64(*v))
}

fn sig17_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.serialize_str(&format_f64(*v)),
        None => s.serialize_str(""),
    }
}

/// Scientific notation with 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One value of one metric for one run, epoch and split. Columns are written
/// in field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub mode: String,
    pub cutoff_kind: String,
    #[serde(serialize_with = "sig17")]
    pub cutoff_ratio: f64,
    #[serde(serialize_with = "sig17")]
    pub aug_ce_weight: f64,
    #[serde(serialize_with = "sig17")]
    pub js_weight: f64,
    pub epoch: usize,
    pub split: String,
    pub metric_name: String,
    #[serde(serialize_with = "sig17")]
    pub value: f64,
    pub forwards: u64,
    pub backwards: u64,
    #[serde(serialize_with = "sig17")]
    pub wall_seconds: f64,
}

pub const METRICS_COLUMNS: [&str; 14] = [
    "run_id",
    "seed",
    "mode",
    "cutoff_kind",
    "cutoff_ratio",
    "aug_ce_weight",
    "js_weight",
    "epoch",
    "split",
    "metric_name",
    "value",
    "forwards",
    "backwards",
    "wall_seconds",
];

/// One row per run of a sweep, with the statistics of the run's cell
/// (all seeds sharing its kind and swept value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub sweep: String,
    pub cutoff_kind: String,
    #[serde(serialize_with = "sig17")]
    pub value: f64,
    pub seed: u64,
    pub run_id: String,
    #[serde(serialize_with = "sig17")]
    pub dev_accuracy: f64,
    #[serde(serialize_with = "sig17")]
    pub cell_mean: f64,
    #[serde(serialize_with = "sig17")]
    pub cell_sd: f64,
    pub cell_n: usize,
    /// Published number for this cell, for orientation only.
    #[serde(serialize_with = "sig17_opt")]
    pub reference: Option<f64>,
}

fn check_finite(r: &MetricsRecord) -> Result<()> {
    if r.value.is_finite() && r.wall_seconds.is_finite() {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "non-finite {} for run {} epoch {}",
            r.metric_name, r.run_id, r.epoch
        )))
    }
}

pub fn write_metrics<W: Write>(records: &[MetricsRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        check_finite(r)?;
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(METRICS_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_COLUMNS {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

pub fn write_summary<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_summary<R: Read>(input: R) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
