//! Feedforward regression network: feature extractor (Linear -> BatchNorm ->
//! ReLU blocks) plus a linear head, with reverse-mode gradients over a static
//! tape and named parameter groups so adaptation can touch only the
//! normalization affine parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};

/// Which normalization statistics a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForwardMode {
    /// Batch statistics; running stats updated via momentum.
    Train,
    /// Batch statistics; running stats frozen.
    BatchStat,
    /// Running statistics; no batch coupling.
    Eval,
}

impl ForwardMode {
    fn uses_batch_stats(self) -> bool {
        !matches!(self, ForwardMode::Eval)
    }
}

/// Parameter group selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelector {
    All,
    NormAffineOnly,
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// out x in
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub linear: LinearLayer,
    pub norm: BatchNormLayer,
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPSILON: f64 = 1e-5;

/// Feature extractor plus linear head `w^T z + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    pub d_in: usize,
    pub blocks: Vec<Block>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl RegressionModel {
    /// MLP with the given hidden widths; Kaiming-uniform linear weights, zero
    /// biases, gamma=1, beta=0, seeded.
    pub fn new_mlp(d_in: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(hidden.len());
        let mut fan_in = d_in;
        for &width in hidden {
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut weight = Matrix::zeros(width, fan_in);
            for w in weight.data_mut() {
                *w = rng.gen_range(-bound..bound);
            }
            blocks.push(Block {
                linear: LinearLayer {
                    weight,
                    bias: vec![0.0; width],
                },
                norm: BatchNormLayer {
                    gamma: vec![1.0; width],
                    beta: vec![0.0; width],
                    running_mean: vec![0.0; width],
                    running_var: vec![1.0; width],
                    momentum: DEFAULT_BN_MOMENTUM,
                    epsilon: DEFAULT_BN_EPSILON,
                },
            });
            fan_in = width;
        }
        let bound = (6.0 / fan_in as f64).sqrt();
        let head_w = (0..fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        RegressionModel {
            d_in,
            blocks,
            head_w,
            head_b: 0.0,
        }
    }

    /// Identity feature extractor (no blocks) with the given head.
    pub fn identity(d_in: usize, head_w: Vec<f64>, head_b: f64) -> Result<Self> {
        if head_w.len() != d_in {
            return Err(Error::Dimension(format!(
                "head width {} != input width {}",
                head_w.len(),
                d_in
            )));
        }
        Ok(RegressionModel {
            d_in,
            blocks: Vec::new(),
            head_w,
            head_b,
        })
    }

    /// Feature dimension D (penultimate layer width).
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.d_in, |b| b.linear.bias.len())
    }

    pub fn has_norm_layers(&self) -> bool {
        !self.blocks.is_empty()
    }

    pub fn forward(&mut self, batch: &Matrix, mode: ForwardMode) -> Result<ForwardPass> {
        if batch.cols() != self.d_in {
            return Err(Error::Dimension(format!(
                "input width {} != model input width {}",
                batch.cols(),
                self.d_in
            )));
        }
        if !batch.is_finite() {
            return Err(Error::Numerical("non-finite input batch".into()));
        }
        let b = batch.rows();
        if self.has_norm_layers() && mode.uses_batch_stats() && b < 2 {
            return Err(Error::BatchTooSmall { need: 2, got: b });
        }

        let n_blocks = self.blocks.len();
        let mut xs: Vec<Matrix> = Vec::with_capacity(n_blocks + 1);
        xs.push(batch.clone());
        let mut xhats: Vec<Matrix> = Vec::with_capacity(n_blocks);
        let mut inv_stds: Vec<Vec<f64>> = Vec::with_capacity(n_blocks);

        for block in self.blocks.iter_mut() {
            let x = xs.last().unwrap();
            let width = block.linear.bias.len();

            // linear
            let mut lin = Matrix::zeros(b, width);
            for i in 0..b {
                let xi = x.row(i);
                let out = lin.row_mut(i);
                for (j, o) in out.iter_mut().enumerate() {
                    *o = dot(block.linear.weight.row(j), xi) + block.linear.bias[j];
                }
            }

            // batch norm
            let (mean, var) = if mode.uses_batch_stats() {
                let mut mean = vec![0.0; width];
                let mut var = vec![0.0; width];
                for i in 0..b {
                    for (j, &v) in lin.row(i).iter().enumerate() {
                        mean[j] += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= b as f64;
                }
                for i in 0..b {
                    for (j, &v) in lin.row(i).iter().enumerate() {
                        let d = v - mean[j];
                        var[j] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= b as f64; // population normalization
                }
                if mode == ForwardMode::Train {
                    let m = block.norm.momentum;
                    for j in 0..width {
                        block.norm.running_mean[j] =
                            (1.0 - m) * block.norm.running_mean[j] + m * mean[j];
                        block.norm.running_var[j] =
                            (1.0 - m) * block.norm.running_var[j] + m * var[j];
                    }
                }
                (mean, var)
            } else {
                (block.norm.running_mean.clone(), block.norm.running_var.clone())
            };

            let inv_std: Vec<f64> = var
                .iter()
                .map(|&v| 1.0 / (v + block.norm.epsilon).sqrt())
                .collect();

            let mut xhat = Matrix::zeros(b, width);
            let mut out = Matrix::zeros(b, width);
            for i in 0..b {
                for j in 0..width {
                    let h = (lin.get(i, j) - mean[j]) * inv_std[j];
                    xhat.set(i, j, h);
                    let y = block.norm.gamma[j] * h + block.norm.beta[j];
                    out.set(i, j, y.max(0.0)); // ReLU
                }
            }
            if !out.is_finite() {
                return Err(Error::Numerical("non-finite activation".into()));
            }
            xhats.push(xhat);
            inv_stds.push(inv_std);
            xs.push(out);
        }

        let features = xs.last().unwrap().clone();
        let predictions: Vec<f64> = (0..b)
            .map(|i| dot(&self.head_w, features.row(i)) + self.head_b)
            .collect();
        if predictions.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite prediction".into()));
        }

        Ok(ForwardPass {
            predictions,
            tape: Tape {
                mode,
                xs,
                xhats,
                inv_stds,
            },
        })
    }

    /// Reverse-mode gradients from upstream gradients on the features and
    /// predictions recorded by `forward`.
    pub fn backward(&self, tape: &Tape, seed_grad: &LossGrad) -> Result<Gradients> {
        let features = tape.features();
        let b = features.rows();
        let d = features.cols();
        if seed_grad.d_features.rows() != b || seed_grad.d_features.cols() != d {
            return Err(Error::Dimension(format!(
                "d_features shape {}x{} != {}x{}",
                seed_grad.d_features.rows(),
                seed_grad.d_features.cols(),
                b,
                d
            )));
        }
        if seed_grad.d_predictions.len() != b {
            return Err(Error::Dimension(format!(
                "d_predictions length {} != batch {}",
                seed_grad.d_predictions.len(),
                b
            )));
        }

        let mut grads = Gradients::zeros_like(self);

        // head
        let mut d_z = seed_grad.d_features.clone();
        for i in 0..b {
            let gp = seed_grad.d_predictions[i];
            grads.head_b += gp;
            let zi = features.row(i);
            for j in 0..d {
                grads.head_w[j] += gp * zi[j];
                let v = d_z.get(i, j) + gp * self.head_w[j];
                d_z.set(i, j, v);
            }
        }

        // blocks, reversed
        for (bi, block) in self.blocks.iter().enumerate().rev() {
            let width = block.linear.bias.len();
            let x_in = &tape.xs[bi];
            let out = &tape.xs[bi + 1];
            let xhat = &tape.xhats[bi];
            let inv_std = &tape.inv_stds[bi];
            let bg = &mut grads.blocks[bi];

            // ReLU: zero where the activated output is zero
            let mut d_bn = d_z;
            for i in 0..b {
                for j in 0..width {
                    if out.get(i, j) <= 0.0 {
                        d_bn.set(i, j, 0.0);
                    }
                }
            }

            // batch norm affine
            let mut d_xhat = Matrix::zeros(b, width);
            for i in 0..b {
                for j in 0..width {
                    let g = d_bn.get(i, j);
                    bg.gamma[j] += g * xhat.get(i, j);
                    bg.beta[j] += g;
                    d_xhat.set(i, j, g * block.norm.gamma[j]);
                }
            }

            // batch norm statistics
            let mut d_lin = Matrix::zeros(b, width);
            if tape.mode.uses_batch_stats() {
                let bf = b as f64;
                let mut sum_dxhat = vec![0.0; width];
                let mut sum_dxhat_xhat = vec![0.0; width];
                for i in 0..b {
                    for j in 0..width {
                        let g = d_xhat.get(i, j);
                        sum_dxhat[j] += g;
                        sum_dxhat_xhat[j] += g * xhat.get(i, j);
                    }
                }
                for i in 0..b {
                    for j in 0..width {
                        let g = d_xhat.get(i, j);
                        let v = inv_std[j] / bf
                            * (bf * g - sum_dxhat[j] - xhat.get(i, j) * sum_dxhat_xhat[j]);
                        d_lin.set(i, j, v);
                    }
                }
            } else {
                for i in 0..b {
                    for j in 0..width {
                        d_lin.set(i, j, d_xhat.get(i, j) * inv_std[j]);
                    }
                }
            }

            // linear
            let in_width = x_in.cols();
            let mut d_x = Matrix::zeros(b, in_width);
            for i in 0..b {
                let xi = x_in.row(i);
                let gi = d_lin.row(i);
                for j in 0..width {
                    let g = gi[j];
                    if g != 0.0 {
                        bg.bias[j] += g;
                        let wrow = block.linear.weight.row(j);
                        let wgrad = bg.weight.row_mut(j);
                        for k in 0..in_width {
                            wgrad[k] += g * xi[k];
                        }
                        let dxi = d_x.row_mut(i);
                        for k in 0..in_width {
                            dxi[k] += g * wrow[k];
                        }
                    }
                }
            }
            d_z = d_x;
        }

        Ok(grads)
    }

    /// Flattened copy of the selected parameters.
    pub fn snapshot_params(&self, selector: ParamSelector) -> Vec<f64> {
        let mut out = Vec::new();
        match selector {
            ParamSelector::All => {
                for block in &self.blocks {
                    out.extend_from_slice(block.linear.weight.data());
                    out.extend_from_slice(&block.linear.bias);
                    out.extend_from_slice(&block.norm.gamma);
                    out.extend_from_slice(&block.norm.beta);
                }
                out.extend_from_slice(&self.head_w);
                out.push(self.head_b);
            }
            ParamSelector::NormAffineOnly => {
                for block in &self.blocks {
                    out.extend_from_slice(&block.norm.gamma);
                    out.extend_from_slice(&block.norm.beta);
                }
            }
            ParamSelector::HeadOnly => {
                out.extend_from_slice(&self.head_w);
                out.push(self.head_b);
            }
        }
        out
    }

    /// Writes a flat vector back into the selected parameters; the complement
    /// of the selector is untouched.
    pub fn restore_params(&mut self, selector: ParamSelector, flat: &[f64]) -> Result<()> {
        let expected = self.snapshot_params(selector).len();
        if flat.len() != expected {
            return Err(Error::Dimension(format!(
                "restore_params: expected {expected} values, got {}",
                flat.len()
            )));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| {
            let s = &flat[pos..pos + n];
            pos += n;
            s
        };
        match selector {
            ParamSelector::All => {
                for block in &mut self.blocks {
                    let wlen = block.linear.weight.data().len();
                    block
                        .linear
                        .weight
                        .data_mut()
                        .copy_from_slice(take(wlen));
                    let n = block.linear.bias.len();
                    block.linear.bias.copy_from_slice(take(n));
                    block.norm.gamma.copy_from_slice(take(n));
                    block.norm.beta.copy_from_slice(take(n));
                }
                let n = self.head_w.len();
                self.head_w.copy_from_slice(take(n));
                self.head_b = take(1)[0];
            }
            ParamSelector::NormAffineOnly => {
                for block in &mut self.blocks {
                    let n = block.norm.gamma.len();
                    block.norm.gamma.copy_from_slice(take(n));
                    block.norm.beta.copy_from_slice(take(n));
                }
            }
            ParamSelector::HeadOnly => {
                let n = self.head_w.len();
                self.head_w.copy_from_slice(take(n));
                self.head_b = take(1)[0];
            }
        }
        Ok(())
    }

    /// Flattened copy of the normalization running statistics (not trainable
    /// parameters; used by tests and the BN-adapt baseline contract).
    pub fn snapshot_running_stats(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.extend_from_slice(&block.norm.running_mean);
            out.extend_from_slice(&block.norm.running_var);
        }
        out
    }
}

/// Differentiation record produced by `forward`.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: ForwardMode,
    /// Block inputs: xs[0] is the batch, xs[i+1] the output of block i.
    xs: Vec<Matrix>,
    xhats: Vec<Matrix>,
    inv_stds: Vec<Vec<f64>>,
}

impl Tape {
    pub fn features(&self) -> &Matrix {
        self.xs.last().unwrap()
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub predictions: Vec<f64>,
    pub tape: Tape,
}

impl ForwardPass {
    pub fn features(&self) -> &Matrix {
        self.tape.features()
    }
}

/// Upstream gradients seeding `backward`: d loss / d features and
/// d loss / d predictions.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub d_features: Matrix,
    pub d_predictions: Vec<f64>,
}

impl LossGrad {
    pub fn from_predictions(d_predictions: Vec<f64>, feature_dim: usize) -> Self {
        LossGrad {
            d_features: Matrix::zeros(d_predictions.len(), feature_dim),
            d_predictions,
        }
    }

    pub fn from_features(d_features: Matrix) -> Self {
        let b = d_features.rows();
        LossGrad {
            d_features,
            d_predictions: vec![0.0; b],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradients for every parameter, in the same layout as the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub blocks: Vec<BlockGrads>,
    pub head_w: Vec<f64>,
    pub head_b: f64,
}

impl Gradients {
    pub fn zeros_like(model: &RegressionModel) -> Self {
        Gradients {
            blocks: model
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    weight: Matrix::zeros(b.linear.weight.rows(), b.linear.weight.cols()),
                    bias: vec![0.0; b.linear.bias.len()],
                    gamma: vec![0.0; b.norm.gamma.len()],
                    beta: vec![0.0; b.norm.beta.len()],
                })
                .collect(),
            head_w: vec![0.0; model.head_w.len()],
            head_b: 0.0,
        }
    }

    /// Flattens the selected gradients in the same order as
    /// `RegressionModel::snapshot_params`.
    pub fn flatten(&self, selector: ParamSelector) -> Vec<f64> {
        let mut out = Vec::new();
        match selector {
            ParamSelector::All => {
                for bg in &self.blocks {
                    out.extend_from_slice(bg.weight.data());
                    out.extend_from_slice(&bg.bias);
                    out.extend_from_slice(&bg.gamma);
                    out.extend_from_slice(&bg.beta);
                }
                out.extend_from_slice(&self.head_w);
                out.push(self.head_b);
            }
            ParamSelector::NormAffineOnly => {
                for bg in &self.blocks {
                    out.extend_from_slice(&bg.gamma);
                    out.extend_from_slice(&bg.beta);
                }
            }
            ParamSelector::HeadOnly => {
                out.extend_from_slice(&self.head_w);
                out.push(self.head_b);
            }
        }
        out
    }
}
