//! Training and adaptation engines: Adam, source MSE training, the
//! subspace-alignment TTA loop (offline and batched-online), and the
//! Source / BN-adapt / Prototype / Oracle baselines.

use serde::{Deserialize, Serialize};

use crate::alignstat::{
    self, alignment_loss_grad, AlignmentVariant, FeatureStats, Metric, RawDimSelection, Space,
    SubspaceStats, VALID_DIM_TOL,
};
use crate::data::{batch_indices, TabularDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netcore::{ForwardMode, LossGrad, ParamSelector, RegressionModel};

/// Adam with bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

impl AdamState {
    pub fn new(lr: f64, n_params: usize) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected update in place. A non-finite gradient skips the
    /// step so the caller can record the divergence.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "adam_step: {} params, {} grads, state sized {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(StepOutcome::Applied)
    }
}

/// Offline: adapt for `epochs` passes, then evaluate. BatchedOnline:
/// alternate one prediction and one update per incoming batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    Offline,
    BatchedOnline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub k: usize,
    pub variant: AlignmentVariant,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mode: AdaptMode,
    pub param_selector: ParamSelector,
    pub seed: u64,
    /// Also refresh normalization running statistics during TTA forwards
    /// (off by default so BN-adapt and alignment effects stay separable).
    pub update_running_stats: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            k: 100,
            variant: AlignmentVariant::ssa(),
            lr: 1e-3,
            batch_size: 64,
            epochs: 1,
            mode: AdaptMode::Offline,
            param_selector: ParamSelector::NormAffineOnly,
            seed: 0,
            update_running_stats: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub epoch: usize,
    pub iter: usize,
    pub loss: f64,
    pub timestamp_ms: u64,
}

/// Per-iteration loss trace plus a recorded divergence event, if any.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunTrace {
    pub iterations: Vec<IterRecord>,
    pub divergence: Option<String>,
    /// Predictions collected during batched-online adaptation, aligned with
    /// the target row order. None in offline mode.
    pub online_predictions: Option<Vec<f64>>,
    pub wall_clock_secs: f64,
}

impl RunTrace {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.iterations.first().map(|r| r.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.iterations.last().map(|r| r.loss)
    }

    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> = self
            .iterations
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        if losses.is_empty() {
            None
        } else {
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        }
    }
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Source statistics captured after source training: raw per-dimension
/// moments, the detected subspace, and the head used for the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub feature: FeatureStats,
    pub subspace: SubspaceStats,
    pub head_w: Vec<f64>,
}

impl SourceStats {
    /// First `k` subspace dimensions (eigenpairs are stored descending).
    pub fn truncated_subspace(&self, k: usize) -> Result<SubspaceStats> {
        if k == 0 || k > self.subspace.k() {
            return Err(Error::Dimension(format!(
                "requested K={k}, stored subspace has {}",
                self.subspace.k()
            )));
        }
        let d = self.subspace.feature_dim();
        let mut basis = Matrix::zeros(k, d);
        for r in 0..k {
            basis.row_mut(r).copy_from_slice(self.subspace.basis.row(r));
        }
        Ok(SubspaceStats {
            mean: self.subspace.mean.clone(),
            basis,
            eigenvalues: self.subspace.eigenvalues[..k].to_vec(),
            weights: self.subspace.weights[..k].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

fn mse_loss_grad(preds: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    let b = preds.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(preds.len());
    for (p, y) in preds.iter().zip(labels) {
        let e = p - y;
        loss += e * e / b;
        grad.push(2.0 * e / b);
    }
    (loss, grad)
}

/// Supervised MSE training with Adam over the selected parameter group.
fn train_mse(
    model: &mut RegressionModel,
    inputs: &Matrix,
    labels: &[f64],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
    selector: ParamSelector,
) -> Result<RunTrace> {
    let start = std::time::Instant::now();
    let mut trace = RunTrace::default();
    let mut params = model.snapshot_params(selector);
    let mut adam = AdamState::new(lr, params.len());
    for epoch in 0..epochs {
        let batches = batch_indices(inputs.rows(), batch_size, true, seed.wrapping_add(epoch as u64));
        for (it, batch) in batches.iter().enumerate() {
            let mut x = Matrix::zeros(batch.len(), inputs.cols());
            let mut y = Vec::with_capacity(batch.len());
            for (r, &i) in batch.iter().enumerate() {
                x.row_mut(r).copy_from_slice(inputs.row(i));
                y.push(labels[i]);
            }
            let fp = model.forward(&x, ForwardMode::Train)?;
            let (loss, d_pred) = mse_loss_grad(&fp.predictions, &y);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "training loss {loss} at epoch {epoch} iter {it}"
                )));
            }
            trace.iterations.push(IterRecord {
                epoch,
                iter: it,
                loss,
                timestamp_ms: now_ms(),
            });
            let grads = model.backward(
                &fp.tape,
                &LossGrad::from_predictions(d_pred, model.feature_dim()),
            )?;
            let flat = grads.flatten(selector);
            if adam.step(&mut params, &flat)? == StepOutcome::SkippedNonFinite {
                return Err(Error::Divergence(format!(
                    "non-finite gradient at epoch {epoch} iter {it}"
                )));
            }
            model.restore_params(selector, &params)?;
        }
    }
    trace.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Trains the model on labeled source data with MSE, then captures the source
/// feature statistics and subspace (eval-mode forwards, single pass over the
/// whole source set). `k` is lowered to the numeric rank with a warning when
/// the spectrum is too degenerate.
pub fn train_source(
    model: &mut RegressionModel,
    source: &TabularDataset,
    cfg: &TrainConfig,
    k: usize,
) -> Result<(SourceStats, RunTrace)> {
    let labels = source.labels()?;
    let trace = train_mse(
        model,
        &source.inputs,
        labels,
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        ParamSelector::All,
    )?;
    let stats = compute_source_stats(model, &source.inputs, k)?;
    Ok((stats, trace))
}

/// Source statistics for an already-trained model.
pub fn compute_source_stats(
    model: &mut RegressionModel,
    source_inputs: &Matrix,
    k: usize,
) -> Result<SourceStats> {
    let fp = model.forward(source_inputs, ForwardMode::Eval)?;
    let features = fp.features();
    let feature = alignstat::feature_stats(features)?;
    let sigma = alignstat::covariance(features, &feature.mean)?;
    let eig = crate::linalg::sym_eig(&sigma)?;
    let rank = crate::linalg::numeric_rank(&eig.eigenvalues, crate::linalg::RANK_REL_TOL)?;
    if rank == 0 {
        return Err(Error::DegenerateDimension(
            "source features have numeric rank 0".into(),
        ));
    }
    // usize::MAX means "use the full numeric rank" and is not worth a warning
    let k_eff = if k > rank {
        if k != usize::MAX {
            log::warn!("requested K={k} exceeds source feature rank {rank}; lowering K to {rank}");
        }
        rank
    } else {
        k
    };
    let subspace = alignstat::detect_subspace(features, &model.head_w, k_eff)?;
    Ok(SourceStats {
        feature,
        subspace,
        head_w: model.head_w.clone(),
    })
}

/// The alignment objective resolved for one adaptation run.
enum Objective {
    Subspace {
        sub: SubspaceStats,
        weights: Vec<f64>,
    },
    RawDims {
        sel: RawDimSelection,
        weights: Vec<f64>,
    },
}

fn resolve_objective(source: &SourceStats, cfg: &AdaptConfig) -> Result<(Objective, Metric)> {
    let metric = cfg.variant.metric;
    let objective = match cfg.variant.space {
        Space::Subspace => {
            let sub = source.truncated_subspace(cfg.k)?;
            let weights = if cfg.variant.weighted {
                sub.weights.clone()
            } else {
                vec![1.0; sub.k()]
            };
            Objective::Subspace { sub, weights }
        }
        Space::NaiveTopVariance => {
            let sel = alignstat::select_top_variance(&source.feature, &source.head_w, cfg.k)?;
            for (i, &v) in sel.var.iter().enumerate() {
                if v <= VALID_DIM_TOL {
                    return Err(Error::DegenerateDimension(format!(
                        "selected raw dimension {} has zero source variance",
                        sel.dims[i]
                    )));
                }
            }
            let weights = if cfg.variant.weighted {
                sel.weights.clone()
            } else {
                vec![1.0; sel.dims.len()]
            };
            Objective::RawDims { sel, weights }
        }
        Space::FullSpace => {
            let d = source.feature.dim();
            for (j, &v) in source.feature.var.iter().enumerate() {
                if v <= VALID_DIM_TOL {
                    return Err(Error::DegenerateDimension(format!(
                        "source dimension {j} has zero variance"
                    )));
                }
            }
            let sel = RawDimSelection {
                dims: (0..d).collect(),
                mean: source.feature.mean.clone(),
                var: source.feature.var.clone(),
                weights: vec![1.0; d],
            };
            Objective::RawDims {
                weights: vec![1.0; d],
                sel,
            }
        }
    };
    Ok((objective, metric))
}

impl Objective {
    /// Loss on a feature batch plus its gradient w.r.t. the features.
    fn loss_grad(&self, metric: Metric, features: &Matrix) -> Result<(f64, Matrix)> {
        let b = features.rows();
        let bf = b as f64;
        match self {
            Objective::Subspace { sub, weights } => {
                let projected = alignstat::project(features, sub)?;
                let stats = alignstat::feature_stats(&projected)?;
                let (loss, d_mu, d_var) = alignment_loss_grad(
                    metric,
                    &stats.mean,
                    &stats.var,
                    &sub.eigenvalues,
                    weights,
                )?;
                let k = sub.k();
                let d = sub.feature_dim();
                let mut d_features = Matrix::zeros(b, d);
                for i in 0..b {
                    let prow = projected.row(i);
                    let frow = d_features.row_mut(i);
                    for dim in 0..k {
                        // d loss / d z~_{i,dim}
                        let coef = d_mu[dim] / bf
                            + d_var[dim] * 2.0 * (prow[dim] - stats.mean[dim]) / bf;
                        if coef != 0.0 {
                            let vrow = sub.basis.row(dim);
                            for (f, &v) in frow.iter_mut().zip(vrow) {
                                *f += coef * v;
                            }
                        }
                    }
                }
                Ok((loss, d_features))
            }
            Objective::RawDims { sel, weights } => {
                // target stats on the selected raw dimensions
                let k = sel.dims.len();
                let mut sub_features = Matrix::zeros(b, k);
                for i in 0..b {
                    let row = features.row(i);
                    for (c, &j) in sel.dims.iter().enumerate() {
                        sub_features.set(i, c, row[j]);
                    }
                }
                let stats = alignstat::feature_stats(&sub_features)?;
                // shift by the source mean so the reference is N(0, source var)
                let mu_shift: Vec<f64> = stats
                    .mean
                    .iter()
                    .zip(&sel.mean)
                    .map(|(t, s)| t - s)
                    .collect();
                let (loss, d_mu, d_var) =
                    alignment_loss_grad(metric, &mu_shift, &stats.var, &sel.var, weights)?;
                let mut d_features = Matrix::zeros(b, features.cols());
                for i in 0..b {
                    for (c, &j) in sel.dims.iter().enumerate() {
                        let coef = d_mu[c] / bf
                            + d_var[c] * 2.0 * (sub_features.get(i, c) - stats.mean[c]) / bf;
                        d_features.set(i, j, coef);
                    }
                }
                Ok((loss, d_features))
            }
        }
    }
}

/// The TTA loop: per mini-batch, extract features with batch statistics,
/// compute the alignment loss, backpropagate, and Adam-update only the
/// selected parameters. On a non-finite loss the run aborts and the partial
/// trace records the divergence.
pub fn run_tta(
    model: &mut RegressionModel,
    source: &SourceStats,
    target_inputs: &Matrix,
    cfg: &AdaptConfig,
) -> Result<RunTrace> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be >= 2".into()));
    }
    let start = std::time::Instant::now();
    let (objective, metric) = resolve_objective(source, cfg)?;
    let forward_mode = if cfg.update_running_stats {
        ForwardMode::Train
    } else {
        ForwardMode::BatchStat
    };

    let mut trace = RunTrace::default();
    let mut params = model.snapshot_params(cfg.param_selector);
    let mut adam = AdamState::new(cfg.lr, params.len());

    match cfg.mode {
        AdaptMode::Offline => {
            'epochs: for epoch in 0..cfg.epochs {
                let batches = batch_indices(
                    target_inputs.rows(),
                    cfg.batch_size,
                    true,
                    cfg.seed.wrapping_add(epoch as u64),
                );
                for (it, batch) in batches.iter().enumerate() {
                    let mut x = Matrix::zeros(batch.len(), target_inputs.cols());
                    for (r, &i) in batch.iter().enumerate() {
                        x.row_mut(r).copy_from_slice(target_inputs.row(i));
                    }
                    if !tta_step(
                        model, &objective, metric, &x, forward_mode, &mut adam, &mut params, cfg,
                        epoch, it, &mut trace,
                    )? {
                        break 'epochs;
                    }
                }
            }
        }
        AdaptMode::BatchedOnline => {
            let n = target_inputs.rows();
            let mut predictions = vec![f64::NAN; n];
            let batches = batch_indices(n, cfg.batch_size, false, cfg.seed);
            let mut covered = 0usize;
            for (it, batch) in batches.iter().enumerate() {
                let mut x = Matrix::zeros(batch.len(), target_inputs.cols());
                for (r, &i) in batch.iter().enumerate() {
                    x.row_mut(r).copy_from_slice(target_inputs.row(i));
                }
                // evaluate with the current model, then update on the same batch
                let fp = model.forward(&x, ForwardMode::BatchStat)?;
                for (r, &i) in batch.iter().enumerate() {
                    predictions[i] = fp.predictions[r];
                }
                covered += batch.len();
                if !tta_step(
                    model, &objective, metric, &x, forward_mode, &mut adam, &mut params, cfg, 0,
                    it, &mut trace,
                )? {
                    break;
                }
            }
            // a leftover single row cannot form batch statistics; predict it
            // with running statistics
            if covered < n && trace.divergence.is_none() {
                for i in 0..n {
                    if predictions[i].is_nan() {
                        let mut x = Matrix::zeros(1, target_inputs.cols());
                        x.row_mut(0).copy_from_slice(target_inputs.row(i));
                        let fp = model.forward(&x, ForwardMode::Eval)?;
                        predictions[i] = fp.predictions[0];
                    }
                }
            }
            trace.online_predictions = Some(predictions);
        }
    }

    trace.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// One adaptation step; returns false when the run must abort (divergence).
#[allow(clippy::too_many_arguments)]
fn tta_step(
    model: &mut RegressionModel,
    objective: &Objective,
    metric: Metric,
    x: &Matrix,
    forward_mode: ForwardMode,
    adam: &mut AdamState,
    params: &mut Vec<f64>,
    cfg: &AdaptConfig,
    epoch: usize,
    it: usize,
    trace: &mut RunTrace,
) -> Result<bool> {
    let fp = match model.forward(x, forward_mode) {
        Ok(fp) => fp,
        Err(Error::Numerical(msg)) => {
            trace.divergence = Some(format!("epoch {epoch} iter {it}: {msg}"));
            return Ok(false);
        }
        Err(e) => return Err(e),
    };
    let (loss, d_features) = objective.loss_grad(metric, fp.features())?;
    if !loss.is_finite() {
        trace.divergence = Some(format!("epoch {epoch} iter {it}: loss {loss}"));
        return Ok(false);
    }
    trace.iterations.push(IterRecord {
        epoch,
        iter: it,
        loss,
        timestamp_ms: now_ms(),
    });
    let grads = model.backward(&fp.tape, &LossGrad::from_features(d_features))?;
    let flat = grads.flatten(cfg.param_selector);
    if adam.step(params, &flat)? == StepOutcome::SkippedNonFinite {
        trace.divergence = Some(format!("epoch {epoch} iter {it}: non-finite gradient"));
        return Ok(false);
    }
    if params.iter().any(|p| !p.is_finite()) {
        trace.divergence = Some(format!("epoch {epoch} iter {it}: non-finite parameter"));
        return Ok(false);
    }
    model.restore_params(cfg.param_selector, params)?;
    Ok(true)
}

/// BN-adapt baseline: train-mode forwards refresh the normalization running
/// statistics; no gradient step is taken.
pub fn baseline_bn_adapt(
    model: &mut RegressionModel,
    target_inputs: &Matrix,
    batch_size: usize,
) -> Result<()> {
    let before = model.snapshot_params(ParamSelector::All);
    for batch in batch_indices(target_inputs.rows(), batch_size, false, 0) {
        let mut x = Matrix::zeros(batch.len(), target_inputs.cols());
        for (r, &i) in batch.iter().enumerate() {
            x.row_mut(r).copy_from_slice(target_inputs.row(i));
        }
        model.forward(&x, ForwardMode::Train)?;
    }
    debug_assert_eq!(model.snapshot_params(ParamSelector::All), before);
    Ok(())
}

/// Prototype baseline: the head weight vector becomes the running mean of the
/// arriving target features; the extractor and intercept stay frozen.
pub fn baseline_prototype(
    model: &mut RegressionModel,
    target_inputs: &Matrix,
    batch_size: usize,
) -> Result<()> {
    let n = target_inputs.rows();
    if n == 0 {
        return Ok(());
    }
    let d = model.feature_dim();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for batch in batch_indices(n, batch_size, false, 0) {
        let mut x = Matrix::zeros(batch.len(), target_inputs.cols());
        for (r, &i) in batch.iter().enumerate() {
            x.row_mut(r).copy_from_slice(target_inputs.row(i));
        }
        let fp = model.forward(&x, ForwardMode::Eval)?;
        let features = fp.features();
        for r in 0..features.rows() {
            for (j, &v) in features.row(r).iter().enumerate() {
                sum[j] += v;
            }
        }
        count += features.rows();
    }
    if count > 0 {
        for (w, s) in model.head_w.iter_mut().zip(&sum) {
            *w = s / count as f64;
        }
    }
    Ok(())
}

/// Oracle baseline: supervised MSE fine-tuning of all parameters on labeled
/// target data (upper-bound reference).
pub fn baseline_oracle(
    model: &mut RegressionModel,
    target: &TabularDataset,
    cfg: &TrainConfig,
) -> Result<RunTrace> {
    let labels = target.labels()?;
    train_mse(
        model,
        &target.inputs,
        labels,
        cfg.epochs,
        cfg.lr,
        cfg.batch_size,
        cfg.seed,
        ParamSelector::All,
    )
}

/// Predictions over a dataset, batched deterministically. In batch-statistics
/// mode a trailing single row is folded into the previous batch so every row
/// is predicted.
pub fn evaluate_predictions(
    model: &mut RegressionModel,
    inputs: &Matrix,
    batch_size: usize,
    mode: ForwardMode,
) -> Result<Vec<f64>> {
    let n = inputs.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let needs_pairs = mode != ForwardMode::Eval && model.has_norm_layers();
    if needs_pairs && n == 1 {
        return Err(Error::BatchTooSmall { need: 2, got: 1 });
    }
    let mut chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<usize>>()
        .chunks(batch_size)
        .map(|c| c.to_vec())
        .collect();
    if needs_pairs && chunks.len() >= 2 && chunks.last().is_some_and(|c| c.len() < 2) {
        let tail = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(tail);
    }
    let mut predictions = vec![0.0; n];
    for chunk in &chunks {
        let mut x = Matrix::zeros(chunk.len(), inputs.cols());
        for (r, &i) in chunk.iter().enumerate() {
            x.row_mut(r).copy_from_slice(inputs.row(i));
        }
        let fp = model.forward(&x, mode)?;
        for (r, &i) in chunk.iter().enumerate() {
            predictions[i] = fp.predictions[r];
        }
    }
    Ok(predictions)
}
