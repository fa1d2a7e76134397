//! Relative errors for log-likelihoods and densities, and the result table.

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;

/// `(‖p − e‖₂ / ‖e‖₂, max|p − e| / max|e|)`.
pub fn relative_errors(pred: ArrayView1<f64>, exact: ArrayView1<f64>) -> Result<(f64, f64)> {
    if pred.len() != exact.len() {
        return Err(Error::Shape(format!("{} predictions for {} exact values", pred.len(), exact.len())));
    }
    if exact.is_empty() {
        return Err(Error::Contract("relative errors of an empty vector".into()));
    }
    let (mut num2, mut den2, mut num_inf, mut den_inf) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&p, &e) in pred.iter().zip(exact.iter()) {
        let diff = p - e;
        num2 += diff * diff;
        den2 += e * e;
        num_inf = num_inf.max(diff.abs());
        den_inf = den_inf.max(e.abs());
    }
    if den2 == 0.0 {
        return Err(Error::Domain("exact values are identically zero".into()));
    }
    Ok((num2.sqrt() / den2.sqrt(), num_inf / den_inf))
}

/// Density errors from log-densities. Both vectors are shifted by the
/// largest exact value before exponentiating, which cancels in the ratios.
pub fn pdf_errors_from_ll(pred_ll: ArrayView1<f64>, exact_ll: ArrayView1<f64>) -> Result<(f64, f64)> {
    if exact_ll.is_empty() {
        return Err(Error::Contract("density errors of an empty vector".into()));
    }
    let c = exact_ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !c.is_finite() {
        return Err(Error::Domain(format!("largest exact log-density is {c}")));
    }
    relative_errors(pred_ll.mapv(|q| (q - c).exp()).view(), exact_ll.mapv(|q| (q - c).exp()).view())
}

/// One row of the result table. `seed == None` marks the mean over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub method: String,
    pub d: usize,
    pub seed: Option<u64>,
    pub ll_l2: f64,
    pub ll_linf: f64,
    pub pdf_l2: f64,
    pub pdf_linf: f64,
    /// Training epochs per second.
    pub rate: f64,
    pub epochs: usize,
}

impl ErrorReport {
    /// Field-wise mean of `rows`, labelled as the mean row.
    pub fn mean(rows: &[ErrorReport]) -> Option<ErrorReport> {
        let first = rows.first()?;
        let n = rows.len() as f64;
        let avg = |f: fn(&ErrorReport) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Some(ErrorReport {
            method: first.method.clone(),
            d: first.d,
            seed: None,
            ll_l2: avg(|r| r.ll_l2),
            ll_linf: avg(|r| r.ll_linf),
            pdf_l2: avg(|r| r.pdf_l2),
            pdf_linf: avg(|r| r.pdf_linf),
            rate: avg(|r| r.rate),
            epochs: first.epochs,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    /// From the file extension, CSV unless it is `.json`.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            _ => Format::Csv,
        }
    }
}

pub const COLUMNS: [&str; 9] = ["method", "d", "seed", "ll_l2", "ll_linf", "pdf_l2", "pdf_linf", "rate", "epochs"];

#[derive(Serialize, Deserialize)]
struct JsonRow {
    method: String,
    d: usize,
    seed: String,
    ll_l2: f64,
    ll_linf: f64,
    pdf_l2: f64,
    pdf_linf: f64,
    rate: f64,
    epochs: usize,
}

fn seed_label(seed: Option<u64>) -> String {
    seed.map_or_else(|| "mean".to_string(), |s| s.to_string())
}

fn parse_seed(s: &str) -> Result<Option<u64>> {
    if s == "mean" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Config(format!("bad seed field {s:?}")))
}

pub fn results_to_string(reports: &[ErrorReport], format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(COLUMNS)?;
            for r in reports {
                w.write_record([
                    r.method.clone(),
                    r.d.to_string(),
                    seed_label(r.seed),
                    r.ll_l2.to_string(),
                    r.ll_linf.to_string(),
                    r.pdf_l2.to_string(),
                    r.pdf_linf.to_string(),
                    r.rate.to_string(),
                    r.epochs.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
        }
        Format::Json => {
            let rows: Vec<JsonRow> = reports
                .iter()
                .map(|r| JsonRow {
                    method: r.method.clone(),
                    d: r.d,
                    seed: seed_label(r.seed),
                    ll_l2: r.ll_l2,
                    ll_linf: r.ll_linf,
                    pdf_l2: r.pdf_l2,
                    pdf_linf: r.pdf_linf,
                    rate: r.rate,
                    epochs: r.epochs,
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&rows)?;
            s.push('\n');
            Ok(s)
        }
    }
}

/// Writes the table atomically.
pub fn emit_results(reports: &[ErrorReport], path: &Path, format: Format) -> Result<()> {
    write_atomic(path, results_to_string(reports, format)?.as_bytes())
}

pub fn parse_results(text: &str, format: Format) -> Result<Vec<ErrorReport>> {
    match format {
        Format::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers()?.clone();
            if header.iter().ne(COLUMNS) {
                return Err(Error::Config(format!("unexpected result columns {:?}", header.iter().collect::<Vec<_>>())));
            }
            let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Config(format!("bad number {s:?}"))) };
            let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Config(format!("bad integer {s:?}"))) };
            r.records()
                .map(|rec| {
                    let rec = rec?;
                    Ok(ErrorReport {
                        method: rec[0].to_string(),
                        d: int(&rec[1])?,
                        seed: parse_seed(&rec[2])?,
                        ll_l2: num(&rec[3])?,
                        ll_linf: num(&rec[4])?,
                        pdf_l2: num(&rec[5])?,
                        pdf_linf: num(&rec[6])?,
                        rate: num(&rec[7])?,
                        epochs: int(&rec[8])?,
                    })
                })
                .collect()
        }
        Format::Json => {
            let rows: Vec<JsonRow> = serde_json::from_str(text)?;
            rows.into_iter()
                .map(|r| {
                    Ok(ErrorReport {
                        method: r.method,
                        d: r.d,
                        seed: parse_seed(&r.seed)?,
                        ll_l2: r.ll_l2,
                        ll_linf: r.ll_linf,
                        pdf_l2: r.pdf_l2,
                        pdf_linf: r.pdf_linf,
                        rate: r.rate,
                        epochs: r.epochs,
                    })
                })
                .collect()
        }
    }
}

pub fn load_results(path: &Path) -> Result<Vec<ErrorReport>> {
    parse_results(&std::fs::read_to_string(path)?, Format::for_path(path))
}
