//! Metrics (R^2, RMSE, MAE), experiment records, and artifact serialization:
//! `report.json`, `report.csv`, `scatter.csv`, and `trace.jsonl`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::RunTrace;
use crate::alignstat::SubspaceStats;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// R^2 = 1 - sum (pred - truth)^2 / sum (truth - mean)^2. May be negative;
/// undefined for constant truth.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "r2: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.len() < 2 {
        return Err(Error::UndefinedStatistic(
            "r2 needs at least 2 observations".into(),
        ));
    }
    let n = truth.len() as f64;
    let mean = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|y| (y - mean) * (y - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedStatistic(
            "r2 undefined for constant labels".into(),
        ));
    }
    let ss_res: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "rmse: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let ss: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, y)| (p - y) * (p - y))
        .sum();
    Ok((ss / n).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Dimension(format!(
            "mae: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth).map(|(p, y)| (p - y).abs()).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub r2: f64,
    pub rmse: f64,
    pub mae: f64,
    pub n: usize,
}

impl MetricsRecord {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(MetricsRecord {
            r2: r2(pred, truth)?,
            rmse: rmse(pred, truth)?,
            mae: mae(pred, truth)?,
            n: pred.len(),
        })
    }
}

/// Subspace diagnostics carried alongside metrics in experiment records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub valid_dims: usize,
    pub subspace_rank: usize,
    /// Pearson correlation between eigenvalues and dimension weights.
    pub lambda_alpha_correlation: Option<f64>,
    /// (k, reconstruction error) pairs, k ascending.
    pub reconstruction_curve: Vec<(usize, f64)>,
    /// Per-dimension (skewness, excess kurtosis) of the projected source
    /// features, first `k` subspace dimensions.
    pub normality: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    /// FNV-1a hash of the canonical config serialization.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub method: String,
    pub seed: u64,
    /// Metrics keyed by domain tag ("source", "target", ...).
    pub metrics: BTreeMap<String, MetricsRecord>,
    pub diverged: bool,
    pub diagnostics: Option<Diagnostics>,
    pub wall_clock_secs: f64,
}

/// 64-bit FNV-1a — stable, dependency-free config fingerprint.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Formats a float with 17 significant digits; round-trips any f64 exactly.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // JSON has no literals for these; keep a readable token for CSV
        format!("{v}")
    }
}

struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// JSON with every float printed at 17 significant digits, so that
/// serialize -> parse -> serialize is byte-stable and lossless.
pub fn to_json_17<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigitFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(out).map_err(|e| Error::Serialization(e.to_string()))
}

/// Writes `report.json` (full records) and `report.csv` (one row per
/// method x domain) into `dir`.
pub fn write_report(records: &[ExperimentRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let json_path = dir.join("report.json");
    let json = to_json_17(&records)?;
    std::fs::write(&json_path, json.as_bytes()).map_err(|e| Error::io(&json_path, e))?;

    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["method", "seed", "domain", "r2", "rmse", "mae", "n", "diverged"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    for rec in records {
        for (domain, m) in &rec.metrics {
            w.write_record([
                rec.method.as_str(),
                &rec.seed.to_string(),
                domain,
                &fmt_f64(m.r2),
                &fmt_f64(m.rmse),
                &fmt_f64(m.mae),
                &m.n.to_string(),
                &rec.diverged.to_string(),
            ])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        if rec.metrics.is_empty() {
            // divergent runs still appear in the table
            w.write_record([
                rec.method.as_str(),
                &rec.seed.to_string(),
                "-",
                "-",
                "-",
                "-",
                "0",
                &rec.diverged.to_string(),
            ])
            .map_err(|e| Error::Serialization(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))
}

/// Projects both feature clouds onto the top-2 subspace directions and writes
/// `(domain_tag, pc1, pc2)` rows.
pub fn export_pca_scatter(
    source_features: &Matrix,
    target_features: Option<&Matrix>,
    sub: &SubspaceStats,
    path: &Path,
) -> Result<()> {
    if sub.k() < 2 {
        return Err(Error::Dimension(format!(
            "scatter export needs K >= 2, subspace has {}",
            sub.k()
        )));
    }
    let mut w =
        csv::Writer::from_path(path).map_err(|e| Error::Serialization(e.to_string()))?;
    w.write_record(["domain", "pc1", "pc2"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    let mut dump = |tag: &str, features: &Matrix| -> Result<()> {
        if features.cols() != sub.feature_dim() {
            return Err(Error::Dimension(format!(
                "scatter: features have {} dims, subspace {}",
                features.cols(),
                sub.feature_dim()
            )));
        }
        for i in 0..features.rows() {
            let row = features.row(i);
            let mut pc = [0.0f64; 2];
            for (d, p) in pc.iter_mut().enumerate() {
                let v = sub.basis.row(d);
                *p = row
                    .iter()
                    .zip(&sub.mean)
                    .zip(v)
                    .map(|((z, m), b)| (z - m) * b)
                    .sum();
            }
            w.write_record([tag, &fmt_f64(pc[0]), &fmt_f64(pc[1])])
                .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        Ok(())
    };
    dump("source", source_features)?;
    if let Some(t) = target_features {
        dump("target", t)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Appends one JSON line per adaptation iteration, plus a divergence line
/// when the run aborted.
pub fn append_trace_jsonl(path: &Path, method: &str, seed: u64, trace: &RunTrace) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for it in &trace.iterations {
        let line = to_json_17(&serde_json::json!({
            "method": method,
            "seed": seed,
            "epoch": it.epoch,
            "iter": it.iter,
            "loss": it.loss,
            "timestamp_ms": it.timestamp_ms,
        }))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    if let Some(reason) = &trace.divergence {
        let line = to_json_17(&serde_json::json!({
            "method": method,
            "seed": seed,
            "divergence": reason,
        }))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
