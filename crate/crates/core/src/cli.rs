//! Experiment runner: train source → capture statistics → run adaptation
//! methods → evaluate → write artifacts. Also the checkpoint format and the
//! `inspect` diagnostics printout.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{
    self, baseline_bn_adapt, baseline_oracle, baseline_prototype, evaluate_predictions, run_tta,
    AdaptMode, RunTrace, SourceStats, TrainConfig,
};
use crate::alignstat::{self, VALID_DIM_TOL};
use crate::config::{DatasetConfig, ExperimentConfig, MethodName, MethodSpec};
use crate::data::{
    apply_standardizer, fit_standardizer, generate_shift_pair, load_csv, ShiftSpec, Standardizer,
    TabularDataset,
};
use crate::error::{Error, Result};
use crate::linalg::{pearson_correlation, Matrix};
use crate::netcore::{ForwardMode, RegressionModel};
use crate::report::{
    self, append_trace_jsonl, export_pca_scatter, fnv1a64, write_report, ExperimentRecord,
    MetricsRecord,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume or inspect a trained source model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: RegressionModel,
    pub standardizer: Option<Standardizer>,
    pub stats: SourceStats,
    pub feature_names: Vec<String>,
    pub label_column: Option<String>,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = report::to_json_17(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad checkpoint {}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

/// Materializes the configured dataset as (source, target), standardized
/// when requested.
pub fn load_dataset(
    cfg: &DatasetConfig,
) -> Result<(TabularDataset, TabularDataset, Option<Standardizer>)> {
    match cfg {
        DatasetConfig::Synthetic { spec, n_source, n_target, seed } => {
            let (s, t) = generate_shift_pair(spec, *n_source, *n_target, *seed)?;
            Ok((s, t, None))
        }
        DatasetConfig::MeanShift { dim, delta, function, noise_std, n_source, n_target, seed } => {
            let spec = ShiftSpec::mean_shift(*dim, delta.clone(), function.clone(), *noise_std);
            let (s, t) = generate_shift_pair(&spec, *n_source, *n_target, *seed)?;
            Ok((s, t, None))
        }
        DatasetConfig::Csv { path, label_column, split, standardize } => {
            let (s, t) = load_csv(path, label_column, split)?;
            if *standardize {
                let std = fit_standardizer(&s)?;
                let s = apply_standardizer(&std, &s)?;
                let t = apply_standardizer(&std, &t)?;
                Ok((s, t, Some(std)))
            } else {
                Ok((s, t, None))
            }
        }
    }
}

pub struct RunSummary {
    pub records: Vec<ExperimentRecord>,
    pub any_diverged: bool,
}

struct MethodOutcome {
    metrics: BTreeMap<String, MetricsRecord>,
    trace: RunTrace,
    diverged: bool,
}

/// Runs one method on a fresh copy of the trained source model and evaluates
/// it on both domains.
fn run_method(
    base_model: &RegressionModel,
    stats: &SourceStats,
    spec: &MethodSpec,
    cfg: &ExperimentConfig,
    source: &TabularDataset,
    target: &TabularDataset,
    seed: u64,
) -> Result<MethodOutcome> {
    let started = std::time::Instant::now();
    // each method starts from an identical copy of the source checkpoint
    let mut model = base_model.clone();
    let acfg = spec.resolve(&cfg.adapt, stats.subspace.k(), seed)?;
    let mut trace = RunTrace::default();
    let mut diverged = false;
    // alignment methods adapt and predict under batch statistics; the others
    // predict with running statistics
    let mut target_eval_mode = ForwardMode::Eval;

    match spec.name {
        MethodName::Source => {}
        MethodName::BnAdapt => baseline_bn_adapt(&mut model, &target.inputs, acfg.batch_size)?,
        MethodName::Prototype => baseline_prototype(&mut model, &target.inputs, acfg.batch_size)?,
        MethodName::Oracle => {
            let tcfg = TrainConfig {
                epochs: acfg.epochs,
                lr: acfg.lr,
                batch_size: acfg.batch_size,
                seed,
            };
            trace = baseline_oracle(&mut model, target, &tcfg)?;
        }
        MethodName::Ssa
        | MethodName::Ssa2wd
        | MethodName::SsaL1
        | MethodName::Naive
        | MethodName::NaiveTopVariance => {
            target_eval_mode = ForwardMode::BatchStat;
            match run_tta(&mut model, stats, &target.inputs, &acfg) {
                Ok(t) => {
                    diverged = t.diverged();
                    trace = t;
                }
                // a degenerate objective is reported as a divergence result
                // so failed naive runs still appear in the report tables
                Err(Error::DegenerateDimension(msg)) | Err(Error::Divergence(msg)) => {
                    diverged = true;
                    trace.divergence = Some(msg);
                }
                Err(e) => return Err(e),
            }
        }
    }

    let mut metrics = BTreeMap::new();
    if !diverged {
        let src_pred =
            evaluate_predictions(&mut model, &source.inputs, acfg.batch_size, ForwardMode::Eval)?;
        metrics.insert(
            source.domain_tag.clone(),
            MetricsRecord::compute(&src_pred, source.labels()?)?,
        );
        let tgt_pred = match (&acfg.mode, &trace.online_predictions) {
            // batched-online already produced its predictions en route
            (AdaptMode::BatchedOnline, Some(p)) => p.clone(),
            _ => evaluate_predictions(&mut model, &target.inputs, acfg.batch_size, target_eval_mode)?,
        };
        metrics.insert(
            target.domain_tag.clone(),
            MetricsRecord::compute(&tgt_pred, target.labels()?)?,
        );
    }
    trace.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(MethodOutcome { metrics, trace, diverged })
}

fn build_diagnostics(
    model: &mut RegressionModel,
    stats: &SourceStats,
    source: &TabularDataset,
) -> Result<report::Diagnostics> {
    let fp = model.forward(&source.inputs, ForwardMode::Eval)?;
    let features = fp.features();
    let raw = alignstat::feature_stats(features)?;
    let valid_dims = alignstat::count_valid_dims(&raw, VALID_DIM_TOL);
    let sub = &stats.subspace;
    let lambda_alpha_correlation = if sub.k() >= 2 {
        pearson_correlation(&sub.eigenvalues, &sub.weights).ok()
    } else {
        None
    };
    // reconstruction curve for the mean target of the first source row
    let mut curve = Vec::new();
    if features.rows() > 0 {
        let z = features.row(0);
        for n in 1..=sub.k() {
            curve.push((n, alignstat::reconstruction_error(z, sub, n)?));
        }
    }
    let projected = alignstat::project(features, sub)?;
    let normality = alignstat::normality_diagnostic(&projected)?;
    Ok(report::Diagnostics {
        valid_dims,
        subspace_rank: sub.k(),
        lambda_alpha_correlation,
        reconstruction_curve: curve,
        normality,
    })
}

/// Full pipeline for one config. `seeds` repeats every method; `dry_run`
/// validates, prints the resolved plan, and touches no files.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    dry_run: bool,
) -> Result<RunSummary> {
    cfg.validate()?;
    let seeds: Vec<u64> = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds.to_vec() };
    let config_json = cfg.canonical_json()?;
    let config_hash = format!("{:016x}", fnv1a64(config_json.to_string().as_bytes()));

    if dry_run {
        println!("config hash: {config_hash}");
        println!("output dir:  {}", cfg.effective_output_dir().display());
        println!("seeds:       {seeds:?}");
        println!("model:       {:?} + linear head", cfg.model.hidden);
        for m in &cfg.methods {
            // K resolution depends on the trained rank; show the request
            let k = m.k.or(cfg.adapt.k).map_or("min(100, rank)".to_string(), |k| k.to_string());
            println!(
                "method {:>18}: K={k} lr={} batch={} epochs={} mode={:?}",
                m.name.as_str(),
                m.lr.unwrap_or(cfg.adapt.lr),
                m.batch_size.unwrap_or(cfg.adapt.batch_size),
                m.epochs.unwrap_or(cfg.adapt.epochs),
                m.mode.unwrap_or(cfg.adapt.mode),
            );
        }
        return Ok(RunSummary { records: Vec::new(), any_diverged: false });
    }

    let out_dir = cfg.effective_output_dir();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let (source, target, standardizer) = load_dataset(&cfg.dataset)?;
    log::info!(
        "dataset: {} source rows, {} target rows, {} features",
        source.len(),
        target.len(),
        source.inputs.cols()
    );

    // train once; every method adapts a copy of this checkpoint
    let mut model = RegressionModel::new_mlp(
        source.inputs.cols(),
        &cfg.model.hidden,
        cfg.model.init_seed,
    );
    let (stats, _train_trace) = adapt::train_source(&mut model, &source, &cfg.train, usize::MAX)?;
    log::info!(
        "source training done; subspace rank {}, {} feature dims",
        stats.subspace.k(),
        model.feature_dim()
    );

    let checkpoint = Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        standardizer,
        stats: stats.clone(),
        feature_names: source.feature_names.clone(),
        label_column: None,
        config_hash: config_hash.clone(),
    };
    checkpoint.save(&out_dir.join("checkpoint.json"))?;

    // the standardized domain data, for `inspect` and external analysis
    source.write_csv(&out_dir.join("source.csv"), "label")?;
    target.write_csv(&out_dir.join("target.csv"), "label")?;

    // 2-D scatter of both feature clouds under the frozen source model
    if stats.subspace.k() >= 2 {
        let src_feat = model.forward(&source.inputs, ForwardMode::Eval)?;
        let tgt_feat = model.forward(&target.inputs, ForwardMode::Eval)?;
        export_pca_scatter(
            src_feat.features(),
            Some(tgt_feat.features()),
            &stats.subspace,
            &out_dir.join("scatter.csv"),
        )?;
    }

    let diagnostics = build_diagnostics(&mut model, &stats, &source)?;

    let trace_path = out_dir.join("trace.jsonl");
    if trace_path.exists() {
        std::fs::remove_file(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
    }

    let mut records = Vec::new();
    let mut any_diverged = false;
    for &seed in &seeds {
        for spec in &cfg.methods {
            let outcome = run_method(&model, &stats, spec, cfg, &source, &target, seed)?;
            any_diverged |= outcome.diverged;
            append_trace_jsonl(&trace_path, spec.name.as_str(), seed, &outcome.trace)?;
            records.push(ExperimentRecord {
                config_hash: config_hash.clone(),
                config: config_json.clone(),
                method: spec.name.as_str().to_string(),
                seed,
                metrics: outcome.metrics,
                diverged: outcome.diverged,
                diagnostics: Some(diagnostics.clone()),
                wall_clock_secs: outcome.trace.wall_clock_secs,
            });
        }
    }

    write_report(&records, &out_dir)?;
    print_summary(&records, &target.domain_tag);
    Ok(RunSummary { records, any_diverged })
}

/// Per-method mean ± std of target R² across seeds.
fn print_summary(records: &[ExperimentRecord], target_tag: &str) {
    let mut by_method: Vec<(String, Vec<f64>, bool)> = Vec::new();
    for rec in records {
        let entry = match by_method.iter_mut().find(|(m, _, _)| *m == rec.method) {
            Some(e) => e,
            None => {
                by_method.push((rec.method.clone(), Vec::new(), false));
                by_method.last_mut().unwrap()
            }
        };
        match rec.metrics.get(target_tag) {
            Some(m) => entry.1.push(m.r2),
            None => entry.2 = true,
        }
    }
    println!("{:>18}  target R2 (mean ± std over seeds)", "method");
    for (method, r2s, diverged) in &by_method {
        if r2s.is_empty() {
            println!("{method:>18}  -{}", if *diverged { "  (diverged)" } else { "" });
            continue;
        }
        let n = r2s.len() as f64;
        let mean = r2s.iter().sum::<f64>() / n;
        let std = (r2s.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        println!("{method:>18}  {mean:+.4} ± {std:.4}");
    }
}

/// Loads a checkpoint, featurizes a CSV dataset with it, and prints the
/// subspace diagnostics (valid dims, rank, spectrum, weight correlation,
/// sensitivity).
pub fn inspect_model(checkpoint_path: &Path, dataset_path: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let mut model = ckpt.model;

    let inputs = read_feature_csv(dataset_path, &ckpt.feature_names)?;
    let inputs = match &ckpt.standardizer {
        Some(std) => {
            let ds = TabularDataset {
                inputs,
                labels: None,
                feature_names: ckpt.feature_names.clone(),
                domain_tag: "inspect".into(),
            };
            apply_standardizer(std, &ds)?.inputs
        }
        None => inputs,
    };

    let fp = model.forward(&inputs, ForwardMode::Eval)?;
    let features = fp.features();
    let raw = alignstat::feature_stats(features)?;
    let valid = alignstat::count_valid_dims(&raw, VALID_DIM_TOL);
    println!("feature dims:     {}", raw.dim());
    println!("valid dims:       {valid}");

    // recompute the rank on this dataset for consistency with the stored one
    let sigma = alignstat::covariance(features, &raw.mean)?;
    let eig = crate::linalg::sym_eig(&sigma)?;
    let rank = crate::linalg::numeric_rank(&eig.eigenvalues, crate::linalg::RANK_REL_TOL)?;
    println!("covariance rank:  {rank} (checkpoint subspace: {})", ckpt.stats.subspace.k());

    let top = eig.eigenvalues.iter().take(10).collect::<Vec<_>>();
    println!("top eigenvalues:  {top:?}");

    let sub = &ckpt.stats.subspace;
    if sub.k() >= 2 {
        match pearson_correlation(&sub.eigenvalues, &sub.weights) {
            Ok(c) => println!("corr(lambda, alpha): {c:+.4}"),
            Err(_) => println!("corr(lambda, alpha): undefined (constant series)"),
        }
    }
    let sens = alignstat::sensitivity(sub);
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &s in &sens {
        lo = lo.min(s);
        hi = hi.max(s);
        sum += s;
    }
    println!(
        "sensitivity:      min {lo:.4}  mean {:.4}  max {hi:.4} over {} raw dims",
        sum / sens.len() as f64,
        sens.len()
    );
    Ok(())
}

/// Reads only the named feature columns from a CSV, in checkpoint order.
fn read_feature_csv(path: &Path, feature_names: &[String]) -> Result<Matrix> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Config(format!("bad CSV header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let mut cols = Vec::with_capacity(feature_names.len());
    for name in feature_names {
        let idx = headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Config(format!("column '{name}' missing from {}", path.display()))
        })?;
        cols.push(idx);
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped = 0usize;
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Config(format!("bad CSV row: {e}")))?;
        let mut row = Vec::with_capacity(cols.len());
        let mut ok = true;
        for &c in &cols {
            match rec.get(c).map(str::trim).and_then(|v| v.parse::<f64>().ok()) {
                Some(v) => row.push(v),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if ok {
            rows.push(row);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing values from {}", path.display());
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no usable rows in {}", path.display())));
    }
    Matrix::from_rows(&rows)
}
