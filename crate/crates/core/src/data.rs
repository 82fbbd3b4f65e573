//! Dataset provisioning: seeded synthetic covariate-shift pairs sharing one
//! conditional p(y|x), CSV ingestion with a configurable domain split,
//! source-fit standardization, and deterministic batching.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub inputs: Matrix,
    pub labels: Option<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub domain_tag: String,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Result<&[f64]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Config(format!("dataset '{}' has no labels", self.domain_tag)))
    }

    /// Rows selected by index, in order.
    pub fn select(&self, idx: &[usize]) -> TabularDataset {
        let mut inputs = Matrix::zeros(idx.len(), self.inputs.cols());
        for (r, &i) in idx.iter().enumerate() {
            inputs.row_mut(r).copy_from_slice(self.inputs.row(i));
        }
        TabularDataset {
            inputs,
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            feature_names: self.feature_names.clone(),
            domain_tag: self.domain_tag.clone(),
        }
    }

    pub fn write_csv(&self, path: &Path, label_column: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))?;
        let mut header = self.feature_names.clone();
        if self.labels.is_some() {
            header.push(label_column.to_string());
        }
        w.write_record(&header)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self
                .inputs
                .row(i)
                .iter()
                .map(|v| format!("{v:.15e}"))
                .collect();
            if let Some(labels) = &self.labels {
                rec.push(format!("{:.15e}", labels[i]));
            }
            w.write_record(&rec)
                .map_err(|e| Error::Serialization(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }
}

/// Ground-truth regression function shared by both domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    Linear {
        coef: Vec<f64>,
        intercept: f64,
    },
    /// Fixed random two-layer tanh network; nonlinear enough that learned
    /// features occupy a strict subspace.
    TanhNet {
        hidden: usize,
        seed: u64,
    },
    /// Tanh network over a subset of coordinates; the remaining inputs are
    /// label-irrelevant nuisance dimensions, so a covariate shift placed on
    /// them perturbs feature statistics without changing the regression
    /// function.
    MaskedTanhNet {
        hidden: usize,
        seed: u64,
        dims: Vec<usize>,
    },
}

fn tanh_net_eval(x: &[f64], hidden: usize, seed: u64) -> f64 {
    let d = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (2.0 / d as f64).sqrt();
    let mut out = 0.0;
    for _ in 0..hidden {
        let mut pre = rng.gen_range(-1.0..1.0f64);
        for &xi in x {
            pre += rng.gen_range(-scale..scale) * xi;
        }
        out += rng.gen_range(-1.0..1.0f64) * pre.tanh();
    }
    out
}

impl GroundTruth {
    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            GroundTruth::Linear { coef, intercept } => dot(coef, x) + intercept,
            GroundTruth::TanhNet { hidden, seed } => tanh_net_eval(x, *hidden, *seed),
            GroundTruth::MaskedTanhNet { hidden, seed, dims } => {
                let sub: Vec<f64> = dims.iter().map(|&j| x[j]).collect();
                tanh_net_eval(&sub, *hidden, *seed)
            }
        }
    }
}

/// Gaussian input law: `x = mean + factor * n`, `n ~ N(0, I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputLaw {
    pub mean: Vec<f64>,
    /// Row-major dim x dim factor (e.g. a Cholesky factor or any full-rank
    /// square root of the desired covariance).
    pub cov_factor: Vec<Vec<f64>>,
}

impl InputLaw {
    pub fn isotropic(mean: Vec<f64>, std: f64) -> Self {
        let d = mean.len();
        let mut cov_factor = vec![vec![0.0; d]; d];
        for (i, row) in cov_factor.iter_mut().enumerate() {
            row[i] = std;
        }
        InputLaw { mean, cov_factor }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.mean.len() != dim {
            return Err(Error::Config(format!(
                "input law mean length {} != dim {dim}",
                self.mean.len()
            )));
        }
        if self.cov_factor.len() != dim || self.cov_factor.iter().any(|r| r.len() != dim) {
            return Err(Error::Config("covariance factor must be dim x dim".into()));
        }
        // full-rank check via the Gram matrix of the factor
        let flat: Vec<f64> = self.cov_factor.iter().flatten().copied().collect();
        let f = Matrix::from_vec(dim, dim, flat)?;
        let gram = f.matmul(&f.transpose())?;
        let eig = crate::linalg::sym_eig(&gram)?;
        let rank = crate::linalg::numeric_rank(&eig.eigenvalues, crate::linalg::RANK_REL_TOL)
            .map_err(|e| Error::Config(format!("covariance factor not PSD: {e}")))?;
        if rank < dim {
            return Err(Error::Config(format!(
                "covariance factor is rank-deficient ({rank} < {dim})"
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let d = self.mean.len();
        let n: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        (0..d)
            .map(|i| self.mean[i] + dot(&self.cov_factor[i], &n))
            .collect()
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Covariate-shift specification: per-domain input laws, one shared
/// ground-truth function, one shared label-noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub dim: usize,
    pub source: InputLaw,
    pub target: InputLaw,
    pub function: GroundTruth,
    pub noise_std: f64,
}

impl ShiftSpec {
    /// Null shift: identical isotropic laws in both domains.
    pub fn null_shift(dim: usize, function: GroundTruth, noise_std: f64) -> Self {
        ShiftSpec {
            dim,
            source: InputLaw::isotropic(vec![0.0; dim], 1.0),
            target: InputLaw::isotropic(vec![0.0; dim], 1.0),
            function,
            noise_std,
        }
    }

    /// Mean shift of the given vector applied to the target law.
    pub fn mean_shift(dim: usize, delta: Vec<f64>, function: GroundTruth, noise_std: f64) -> Self {
        ShiftSpec {
            dim,
            source: InputLaw::isotropic(vec![0.0; dim], 1.0),
            target: InputLaw::isotropic(delta, 1.0),
            function,
            noise_std,
        }
    }
}

/// Draws a labeled source/target pair under the shared conditional p(y|x).
/// Target labels are kept for evaluation only.
pub fn generate_shift_pair(
    spec: &ShiftSpec,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> Result<(TabularDataset, TabularDataset)> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    spec.source.validate(spec.dim)?;
    spec.target.validate(spec.dim)?;
    if spec.noise_std < 0.0 {
        return Err(Error::Config("noise_std must be >= 0".into()));
    }

    let feature_names: Vec<String> = (0..spec.dim).map(|j| format!("x{j}")).collect();
    let make = |law: &InputLaw, n: usize, tag: &str, rng_seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut inputs = Matrix::zeros(n, spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let x = law.sample(&mut rng);
            let y = spec.function.evaluate(&x) + spec.noise_std * standard_normal(&mut rng);
            inputs.row_mut(i).copy_from_slice(&x);
            labels.push(y);
        }
        TabularDataset {
            inputs,
            labels: Some(labels),
            feature_names: feature_names.clone(),
            domain_tag: tag.to_string(),
        }
    };

    let source = make(&spec.source, n_source, "source", seed.wrapping_mul(2).wrapping_add(1));
    let target = make(&spec.target, n_target, "target", seed.wrapping_mul(2).wrapping_add(2));
    Ok((source, target))
}

/// Predicate that decides which rows belong to the source domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitRule {
    /// Categorical column: listed values go to the source side.
    Category {
        column: String,
        source_values: Vec<String>,
    },
    /// Numeric column threshold: `value < cutoff` goes to the source side
    /// when `source_is_below`, otherwise the target side.
    Threshold {
        column: String,
        cutoff: f64,
        source_is_below: bool,
    },
}

impl SplitRule {
    fn column(&self) -> &str {
        match self {
            SplitRule::Category { column, .. } => column,
            SplitRule::Threshold { column, .. } => column,
        }
    }

    fn is_source(&self, raw: &str) -> Result<bool> {
        match self {
            SplitRule::Category { source_values, .. } => {
                Ok(source_values.iter().any(|v| v == raw))
            }
            SplitRule::Threshold {
                cutoff,
                source_is_below,
                ..
            } => {
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("non-numeric split value '{raw}'")))?;
                Ok((v < *cutoff) == *source_is_below)
            }
        }
    }
}

/// Loads a CSV and partitions the rows into source and target domains.
///
/// Numeric columns other than the label (and a categorical split column)
/// become features; rows with missing or non-numeric feature cells are
/// dropped and the count logged.
pub fn load_csv(
    path: &Path,
    label_column: &str,
    split_rule: &SplitRule,
) -> Result<(TabularDataset, TabularDataset)> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Config(format!("bad CSV header: {e}")))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("label column '{label_column}' not found")))?;
    let split_idx = headers
        .iter()
        .position(|h| h == split_rule.column())
        .ok_or_else(|| {
            Error::Config(format!("split column '{}' not found", split_rule.column()))
        })?;

    let categorical_split = matches!(split_rule, SplitRule::Category { .. });
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != label_idx && !(categorical_split && i == split_idx))
        .collect();
    let feature_names: Vec<String> = feature_idx.iter().map(|&i| headers[i].clone()).collect();

    let mut src_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut tgt_rows: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Config(format!("bad CSV record: {e}")))?;
        let parse_cell = |i: usize| -> Option<f64> {
            record.get(i).and_then(|c| {
                let c = c.trim();
                if c.is_empty() {
                    None
                } else {
                    c.parse::<f64>().ok()
                }
            })
        };
        let label = parse_cell(label_idx);
        let feats: Option<Vec<f64>> = feature_idx.iter().map(|&i| parse_cell(i)).collect();
        let split_cell = record.get(split_idx).map(str::trim).unwrap_or("");
        match (label, feats, split_cell.is_empty()) {
            (Some(y), Some(x), false) => {
                if split_rule.is_source(split_cell)? {
                    src_rows.push((x, y));
                } else {
                    tgt_rows.push((x, y));
                }
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::info!("load_csv: dropped {dropped} rows with missing values");
    }
    if src_rows.is_empty() || tgt_rows.is_empty() {
        return Err(Error::Config(format!(
            "split produced an empty side (source {}, target {})",
            src_rows.len(),
            tgt_rows.len()
        )));
    }

    let build = |rows: Vec<(Vec<f64>, f64)>, tag: &str| -> Result<TabularDataset> {
        let mut inputs = Matrix::zeros(rows.len(), feature_names.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, (x, y)) in rows.into_iter().enumerate() {
            inputs.row_mut(i).copy_from_slice(&x);
            labels.push(y);
        }
        Ok(TabularDataset {
            inputs,
            labels: Some(labels),
            feature_names: feature_names.clone(),
            domain_tag: tag.to_string(),
        })
    };
    Ok((build(src_rows, "source")?, build(tgt_rows, "target")?))
}

/// Per-feature standardization fit on the source split; zero-variance
/// features are dropped (with a warning) rather than divided by zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    /// Indices of retained features in the original layout.
    pub retained: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_standardizer(source: &TabularDataset) -> Result<Standardizer> {
    let stats = crate::alignstat::feature_stats(&source.inputs)?;
    let mut retained = Vec::new();
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for j in 0..stats.dim() {
        let sd = stats.var[j].sqrt();
        if sd > 0.0 {
            retained.push(j);
            mean.push(stats.mean[j]);
            std.push(sd);
        } else {
            log::warn!(
                "dropping zero-variance feature '{}'",
                source.feature_names.get(j).map_or("?", |s| s.as_str())
            );
        }
    }
    if retained.is_empty() {
        return Err(Error::Config("all features have zero variance".into()));
    }
    Ok(Standardizer { retained, mean, std })
}

pub fn apply_standardizer(std: &Standardizer, dataset: &TabularDataset) -> Result<TabularDataset> {
    let d = dataset.inputs.cols();
    if std.retained.iter().any(|&j| j >= d) {
        return Err(Error::Dimension(format!(
            "standardizer fit on wider data than {d} columns"
        )));
    }
    let n = dataset.len();
    let mut inputs = Matrix::zeros(n, std.retained.len());
    for i in 0..n {
        let src = dataset.inputs.row(i);
        for (c, &j) in std.retained.iter().enumerate() {
            inputs.set(i, c, (src[j] - std.mean[c]) / std.std[c]);
        }
    }
    Ok(TabularDataset {
        inputs,
        labels: dataset.labels.clone(),
        feature_names: std
            .retained
            .iter()
            .map(|&j| dataset.feature_names.get(j).cloned().unwrap_or_default())
            .collect(),
        domain_tag: dataset.domain_tag.clone(),
    })
}

/// Seed-deterministic index batches; a final batch of fewer than 2 rows is
/// dropped (batch statistics would be undefined).
pub fn batch_indices(n: usize, batch_size: usize, shuffle: bool, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch_size must be >= 2");
    let mut idx: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        idx.shuffle(&mut rng);
    }
    let mut out = Vec::new();
    for chunk in idx.chunks(batch_size) {
        if chunk.len() >= 2 {
            out.push(chunk.to_vec());
        } else {
            log::debug!("dropping final batch of {} row(s)", chunk.len());
        }
    }
    out
}

/// Writes a dataset fixture; mostly for tests and the scatter export path.
pub fn write_csv_raw(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(f, "{}", header.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
    for row in rows {
        writeln!(f, "{}", row.join(",")).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn linear_spec(dim: usize) -> ShiftSpec {
        ShiftSpec::null_shift(
            dim,
            GroundTruth::Linear {
                coef: (0..dim).map(|i| (i + 1) as f64).collect(),
                intercept: 0.5,
            },
            0.0,
        )
    }

    #[test]
    fn noise_free_linear_labels_exact() {
        let spec = linear_spec(3);
        let (src, tgt) = generate_shift_pair(&spec, 20, 20, 7).unwrap();
        for ds in [&src, &tgt] {
            let labels = ds.labels().unwrap();
            for i in 0..ds.len() {
                let expect = spec.function.evaluate(ds.inputs.row(i));
                assert_abs_diff_eq!(labels[i], expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn shared_conditional_across_domains() {
        // the ground-truth function gives identical labels regardless of domain tag
        let spec = ShiftSpec::mean_shift(
            4,
            vec![2.0, 0.0, 0.0, 0.0],
            GroundTruth::TanhNet { hidden: 8, seed: 3 },
            0.0,
        );
        let x = [0.3, -0.7, 1.1, 0.0];
        let y1 = spec.function.evaluate(&x);
        let y2 = spec.function.evaluate(&x);
        assert_eq!(y1, y2);
    }

    #[test]
    fn generate_is_seed_deterministic() {
        let spec = linear_spec(2);
        let (a, _) = generate_shift_pair(&spec, 10, 10, 42).unwrap();
        let (b, _) = generate_shift_pair(&spec, 10, 10, 42).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn non_psd_factor_rejected() {
        let mut spec = linear_spec(2);
        spec.source.cov_factor = vec![vec![1.0, 0.0], vec![1.0, 0.0]]; // rank 1
        assert!(matches!(
            generate_shift_pair(&spec, 10, 10, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn load_csv_fixture_split() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.csv");
        write_csv_raw(
            &path,
            &["a", "b", "domain", "y"],
            &[
                vec!["1".into(), "2".into(), "in".into(), "10".into()],
                vec!["3".into(), "4".into(), "out".into(), "20".into()],
                vec!["5".into(), "6".into(), "in".into(), "30".into()],
                vec!["7".into(), "8".into(), "out".into(), "40".into()],
            ],
        )
        .unwrap();
        let rule = SplitRule::Category {
            column: "domain".into(),
            source_values: vec!["in".into()],
        };
        let (src, tgt) = load_csv(&path, "y", &rule).unwrap();
        assert_eq!(src.len(), 2);
        assert_eq!(tgt.len(), 2);
        assert_eq!(src.feature_names, vec!["a", "b"]);
        assert_eq!(src.inputs.row(0), &[1.0, 2.0]);
        assert_eq!(src.labels().unwrap(), &[10.0, 30.0]);
        assert_eq!(tgt.inputs.row(1), &[7.0, 8.0]);
    }

    #[test]
    fn load_csv_drops_missing_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing.csv");
        write_csv_raw(
            &path,
            &["a", "domain", "y"],
            &[
                vec!["1".into(), "in".into(), "10".into()],
                vec!["".into(), "out".into(), "20".into()],
                vec!["3".into(), "out".into(), "30".into()],
            ],
        )
        .unwrap();
        let rule = SplitRule::Category {
            column: "domain".into(),
            source_values: vec!["in".into()],
        };
        let (src, tgt) = load_csv(&path, "y", &rule).unwrap();
        assert_eq!(src.len() + tgt.len(), 2);
    }

    #[test]
    fn load_csv_missing_label_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nolabel.csv");
        write_csv_raw(
            &path,
            &["a", "domain"],
            &[vec!["1".into(), "in".into()]],
        )
        .unwrap();
        let rule = SplitRule::Category {
            column: "domain".into(),
            source_values: vec!["in".into()],
        };
        assert!(matches!(
            load_csv(&path, "y", &rule),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn threshold_split_keeps_column_as_feature() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("thr.csv");
        write_csv_raw(
            &path,
            &["long", "y"],
            &[
                vec!["-120.0".into(), "1".into()],
                vec!["-118.0".into(), "2".into()],
            ],
        )
        .unwrap();
        let rule = SplitRule::Threshold {
            column: "long".into(),
            cutoff: -119.0,
            source_is_below: true,
        };
        let (src, tgt) = load_csv(&path, "y", &rule).unwrap();
        assert_eq!(src.feature_names, vec!["long"]);
        assert_eq!(src.len(), 1);
        assert_eq!(tgt.len(), 1);
    }

    #[test]
    fn standardizer_source_becomes_standard() {
        let spec = linear_spec(3);
        let (src, tgt) = generate_shift_pair(&spec, 200, 100, 1).unwrap();
        let st = fit_standardizer(&src).unwrap();
        let src_std = apply_standardizer(&st, &src).unwrap();
        let stats = crate::alignstat::feature_stats(&src_std.inputs).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(stats.mean[j], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(stats.var[j].sqrt(), 1.0, epsilon = 1e-10);
        }
        // the same transform applies to target without refit
        let before = st.clone();
        let _ = apply_standardizer(&st, &tgt).unwrap();
        assert_eq!(st, before);
    }

    #[test]
    fn standardizer_drops_constant_feature() {
        let inputs = Matrix::from_rows(&[
            vec![1.0, 5.0],
            vec![2.0, 5.0],
            vec![3.0, 5.0],
        ])
        .unwrap();
        let ds = TabularDataset {
            inputs,
            labels: None,
            feature_names: vec!["a".into(), "const".into()],
            domain_tag: "source".into(),
        };
        let st = fit_standardizer(&ds).unwrap();
        assert_eq!(st.retained, vec![0]);
        let out = apply_standardizer(&st, &ds).unwrap();
        assert_eq!(out.inputs.cols(), 1);
    }

    #[test]
    fn shifted_target_mean_nonzero_after_source_fit() {
        let spec = ShiftSpec::mean_shift(
            3,
            vec![2.0, 2.0, 2.0],
            GroundTruth::Linear { coef: vec![1.0; 3], intercept: 0.0 },
            0.0,
        );
        let (src, tgt) = generate_shift_pair(&spec, 500, 500, 11).unwrap();
        let st = fit_standardizer(&src).unwrap();
        let tgt_std = apply_standardizer(&st, &tgt).unwrap();
        let stats = crate::alignstat::feature_stats(&tgt_std.inputs).unwrap();
        assert!(stats.mean.iter().any(|m| m.abs() > 0.5));
    }

    #[test]
    fn batch_sizes_and_short_batch() {
        let b = batch_indices(10, 4, false, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = batch_indices(5, 4, false, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4]);
    }

    #[test]
    fn shuffle_is_seed_deterministic() {
        let a = batch_indices(20, 6, true, 9);
        let b = batch_indices(20, 6, true, 9);
        assert_eq!(a, b);
        let c = batch_indices(20, 6, true, 10);
        assert_ne!(a, c);
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let spec = linear_spec(2);
        let (src, _) = generate_shift_pair(&spec, 10, 10, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.csv");
        src.write_csv(&path, "y").unwrap();

        let mut reader = csv::Reader::from_path(&path).unwrap();
        let labels = src.labels().unwrap();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.unwrap();
            for j in 0..2 {
                let v: f64 = rec.get(j).unwrap().parse().unwrap();
                let orig = src.inputs.get(i, j);
                let scale = orig.abs().max(1e-300);
                assert!((v - orig).abs() / scale < 1e-14, "{v} vs {orig}");
            }
            let y: f64 = rec.get(2).unwrap().parse().unwrap();
            let scale = labels[i].abs().max(1e-300);
            assert!((y - labels[i]).abs() / scale < 1e-14);
        }
    }

    #[test]
    fn masked_tanh_net_ignores_nuisance_dims() {
        let f = GroundTruth::MaskedTanhNet { hidden: 8, seed: 3, dims: vec![0, 2] };
        let a = f.evaluate(&[0.5, -1.0, 2.0, 7.0]);
        let b = f.evaluate(&[0.5, 99.0, 2.0, -42.0]);
        assert_eq!(a, b);
        // matches the plain net applied to the selected coordinates
        let plain = GroundTruth::TanhNet { hidden: 8, seed: 3 };
        assert_eq!(a, plain.evaluate(&[0.5, 2.0]));
    }
}
