//! Feature statistics and alignment losses: per-dimension moments, covariance,
//! subspace detection with dimension weighting, projection, Gaussian KL /
//! 2-Wasserstein / L1 alignment, and the subspace diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, dot, norm2, Matrix};

/// Per-dimension mean and population variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Source subspace statistics: mean, orthonormal basis (rows), eigenvalues and
/// dimension weights `alpha_d = 1 + |w . v_d|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceStats {
    pub mean: Vec<f64>,
    /// K x D, rows orthonormal.
    pub basis: Matrix,
    /// K, descending, strictly positive.
    pub eigenvalues: Vec<f64>,
    /// K, each >= 1.
    pub weights: Vec<f64>,
}

impl SubspaceStats {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.basis.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Kl,
    Wasserstein2,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Detected eigensubspace (projection by the source basis).
    Subspace,
    /// Ablation: top-K raw feature dimensions by source variance,
    /// weights `1 + |w_d|`.
    NaiveTopVariance,
    /// All D raw dimensions, unweighted (the naive baseline).
    FullSpace,
}

/// One alignment objective: a metric, the space it acts in, and whether
/// dimension weighting is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentVariant {
    pub metric: Metric,
    pub space: Space,
    pub weighted: bool,
}

impl AlignmentVariant {
    pub fn ssa() -> Self {
        AlignmentVariant {
            metric: Metric::Kl,
            space: Space::Subspace,
            weighted: true,
        }
    }
}

/// Relative floor applied to target variances before division.
pub const VARIANCE_FLOOR_REL: f64 = 1e-8;

/// Absolute tolerance for counting valid (nonzero-variance) dimensions.
pub const VALID_DIM_TOL: f64 = 1e-12;

/// Per-dimension mean and population variance over the rows of `features`.
pub fn feature_stats(features: &Matrix) -> Result<FeatureStats> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    if !features.is_finite() {
        return Err(Error::Numerical("feature_stats: non-finite input".into()));
    }
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            mean[j] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            let dv = v - mean[j];
            var[j] += dv * dv;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    Ok(FeatureStats { mean, var })
}

/// Population covariance around the given mean.
pub fn covariance(features: &Matrix, mean: &[f64]) -> Result<Matrix> {
    let n = features.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: n });
    }
    let d = features.cols();
    if mean.len() != d {
        return Err(Error::Dimension(format!(
            "covariance: mean length {} != {}",
            mean.len(),
            d
        )));
    }
    let mut sigma = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (j, &v) in features.row(i).iter().enumerate() {
            centered[j] = v - mean[j];
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            let row = sigma.row_mut(a);
            for (b, &cb) in centered.iter().enumerate() {
                row[b] += ca * cb;
            }
        }
    }
    for v in sigma.data_mut() {
        *v /= n as f64;
    }
    Ok(sigma)
}

/// Top-K eigenpairs of the source feature covariance, with dimension weights
/// from the head. Fails if `k` exceeds the numeric rank: aligning degenerate
/// directions is exactly the failure this subspace restriction avoids.
pub fn detect_subspace(features: &Matrix, head_w: &[f64], k: usize) -> Result<SubspaceStats> {
    let d = features.cols();
    if head_w.len() != d {
        return Err(Error::Dimension(format!(
            "detect_subspace: head width {} != feature width {}",
            head_w.len(),
            d
        )));
    }
    if k == 0 {
        return Err(Error::Config("detect_subspace: K must be >= 1".into()));
    }
    if k > d {
        return Err(Error::Dimension(format!(
            "detect_subspace: K={k} > feature dimension {d}"
        )));
    }
    let stats = feature_stats(features)?;
    let sigma = covariance(features, &stats.mean)?;
    let eig = linalg::sym_eig(&sigma)?;
    let rank = linalg::numeric_rank(&eig.eigenvalues, linalg::RANK_REL_TOL)?;
    if k > rank {
        return Err(Error::RankExceeded {
            requested: k,
            rank,
        });
    }

    let mut basis = Matrix::zeros(k, d);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for row in 0..k {
        basis
            .row_mut(row)
            .copy_from_slice(eig.eigenvectors.row(row));
        eigenvalues.push(eig.eigenvalues[row]);
        weights.push(1.0 + dot(head_w, eig.eigenvectors.row(row)).abs());
    }
    Ok(SubspaceStats {
        mean: stats.mean,
        basis,
        eigenvalues,
        weights,
    })
}

/// Projects feature rows into the subspace: `z~ = V (z - mu)`.
pub fn project(features: &Matrix, sub: &SubspaceStats) -> Result<Matrix> {
    let d = sub.feature_dim();
    if features.cols() != d {
        return Err(Error::Dimension(format!(
            "project: feature width {} != subspace width {}",
            features.cols(),
            d
        )));
    }
    let b = features.rows();
    let k = sub.k();
    let mut out = Matrix::zeros(b, k);
    let mut centered = vec![0.0; d];
    for i in 0..b {
        for (j, &v) in features.row(i).iter().enumerate() {
            centered[j] = v - sub.mean[j];
        }
        let orow = out.row_mut(i);
        for (r, o) in orow.iter_mut().enumerate() {
            *o = dot(sub.basis.row(r), &centered);
        }
    }
    Ok(out)
}

/// Closed-form KL divergence between two univariate Gaussians.
pub fn gaussian_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64> {
    if var1 <= 0.0 || var2 <= 0.0 {
        return Err(Error::Numerical(format!(
            "gaussian_kl: non-positive variance ({var1}, {var2})"
        )));
    }
    Ok(((var2 / var1).ln() + ((mu1 - mu2).powi(2) + var1) / var2 - 1.0) / 2.0)
}

fn check_k(len: usize, k: usize, what: &str) -> Result<()> {
    if len != k {
        return Err(Error::Dimension(format!(
            "{what}: length {len} != subspace size {k}"
        )));
    }
    Ok(())
}

/// Weighted alignment loss between per-dimension target stats `(mu, var)` and
/// reference Gaussians `N(0, lambda_d)`, together with its gradients w.r.t.
/// the target mean and variance.
///
/// Target variances are floored at `VARIANCE_FLOOR_REL * lambda_d` before any
/// division; floored dimensions get zero variance-gradient.
pub fn alignment_loss_grad(
    metric: Metric,
    mu: &[f64],
    var: &[f64],
    lambda: &[f64],
    weights: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let k = lambda.len();
    check_k(mu.len(), k, "alignment loss mean")?;
    check_k(var.len(), k, "alignment loss variance")?;
    check_k(weights.len(), k, "alignment loss weights")?;

    let mut loss = 0.0;
    let mut d_mu = vec![0.0; k];
    let mut d_var = vec![0.0; k];
    for d in 0..k {
        let l = lambda[d];
        if l <= 0.0 {
            return Err(Error::DegenerateDimension(format!(
                "reference variance {l} in dimension {d}"
            )));
        }
        let a = weights[d];
        let m = mu[d];
        let floor = VARIANCE_FLOOR_REL * l;
        let floored = var[d] < floor;
        let v = if floored { floor } else { var[d] };
        if v <= 0.0 || !v.is_finite() {
            return Err(Error::Numerical(format!(
                "target variance {v} in dimension {d}"
            )));
        }
        match metric {
            Metric::Kl => {
                loss += 0.5 * a * ((m * m + l) / v + (m * m + v) / l - 2.0);
                d_mu[d] = a * m * (1.0 / v + 1.0 / l);
                if !floored {
                    d_var[d] = 0.5 * a * (1.0 / l - (m * m + l) / (v * v));
                }
            }
            Metric::Wasserstein2 => {
                let s = v.sqrt();
                let sl = l.sqrt();
                loss += a * (m * m + (s - sl) * (s - sl));
                d_mu[d] = 2.0 * a * m;
                if !floored {
                    d_var[d] = a * (1.0 - sl / s);
                }
            }
            Metric::L1 => {
                let s = v.sqrt();
                let sl = l.sqrt();
                loss += a * (m.abs() + (s - sl).abs());
                d_mu[d] = a * m.signum();
                if !floored {
                    d_var[d] = a * (s - sl).signum() / (2.0 * s);
                }
            }
        }
    }
    Ok((loss, d_mu, d_var))
}

/// SSA loss: weighted symmetric KL between projected target batch stats and
/// the source eigen-spectrum.
pub fn ssa_loss(target_projected_stats: &FeatureStats, sub: &SubspaceStats) -> Result<f64> {
    alignment_loss_grad(
        Metric::Kl,
        &target_projected_stats.mean,
        &target_projected_stats.var,
        &sub.eigenvalues,
        &sub.weights,
    )
    .map(|(l, _, _)| l)
}

/// 2-Wasserstein variant of the subspace alignment loss.
pub fn wasserstein2_loss(target_projected_stats: &FeatureStats, sub: &SubspaceStats) -> Result<f64> {
    alignment_loss_grad(
        Metric::Wasserstein2,
        &target_projected_stats.mean,
        &target_projected_stats.var,
        &sub.eigenvalues,
        &sub.weights,
    )
    .map(|(l, _, _)| l)
}

/// L1 variant of the subspace alignment loss.
pub fn l1_loss(target_projected_stats: &FeatureStats, sub: &SubspaceStats) -> Result<f64> {
    alignment_loss_grad(
        Metric::L1,
        &target_projected_stats.mean,
        &target_projected_stats.var,
        &sub.eigenvalues,
        &sub.weights,
    )
    .map(|(l, _, _)| l)
}

/// Naive full-space alignment: unweighted symmetric KL summed over all raw
/// dimensions. A zero-variance source dimension is the documented failure of
/// this objective and is reported as such.
pub fn naive_alignment_loss(
    target_stats: &FeatureStats,
    source_stats: &FeatureStats,
) -> Result<f64> {
    let d = source_stats.dim();
    check_k(target_stats.dim(), d, "naive alignment target stats")?;
    let mut loss = 0.0;
    for j in 0..d {
        let vs = source_stats.var[j];
        if vs <= VALID_DIM_TOL {
            return Err(Error::DegenerateDimension(format!(
                "source dimension {j} has zero variance"
            )));
        }
        let vt = target_stats.var[j].max(VARIANCE_FLOOR_REL * vs);
        loss += gaussian_kl(source_stats.mean[j], vs, target_stats.mean[j], vt)?
            + gaussian_kl(target_stats.mean[j], vt, source_stats.mean[j], vs)?;
    }
    Ok(loss)
}

/// Euclidean error of reconstructing `z` from the first `n` basis vectors.
pub fn reconstruction_error(z: &[f64], sub: &SubspaceStats, n: usize) -> Result<f64> {
    let d = sub.feature_dim();
    if z.len() != d {
        return Err(Error::Dimension(format!(
            "reconstruction_error: feature length {} != {d}",
            z.len()
        )));
    }
    if n > sub.k() {
        return Err(Error::Dimension(format!(
            "reconstruction_error: n={n} > K={}",
            sub.k()
        )));
    }
    let centered: Vec<f64> = z.iter().zip(&sub.mean).map(|(a, b)| a - b).collect();
    let mut recon = sub.mean.clone();
    for r in 0..n {
        let v = sub.basis.row(r);
        let c = dot(&centered, v);
        for (rc, &vv) in recon.iter_mut().zip(v) {
            *rc += c * vv;
        }
    }
    let diff: Vec<f64> = recon.iter().zip(z).map(|(a, b)| a - b).collect();
    Ok(norm2(&diff))
}

/// Column norms of the basis: how much each original feature dimension moves
/// the projected vector.
pub fn sensitivity(sub: &SubspaceStats) -> Vec<f64> {
    let d = sub.feature_dim();
    let k = sub.k();
    (0..d)
        .map(|col| {
            (0..k)
                .map(|row| {
                    let v = sub.basis.get(row, col);
                    v * v
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

/// Sample skewness and excess kurtosis for each column.
pub fn normality_diagnostic(projected: &Matrix) -> Result<Vec<(f64, f64)>> {
    let b = projected.rows();
    if b < 8 {
        return Err(Error::BatchTooSmall { need: 8, got: b });
    }
    let stats = feature_stats(projected)?;
    let k = projected.cols();
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let v = stats.var[j];
        if v <= VALID_DIM_TOL {
            return Err(Error::UndefinedStatistic(format!(
                "normality_diagnostic: zero variance in dimension {j}"
            )));
        }
        let mut m3 = 0.0;
        let mut m4 = 0.0;
        for i in 0..b {
            let d = projected.get(i, j) - stats.mean[j];
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        m3 /= b as f64;
        m4 /= b as f64;
        out.push((m3 / v.powf(1.5), m4 / (v * v) - 3.0));
    }
    Ok(out)
}

/// Count of dimensions whose variance exceeds `abs_tol`.
pub fn count_valid_dims(stats: &FeatureStats, abs_tol: f64) -> usize {
    stats.var.iter().filter(|&&v| v > abs_tol).count()
}

/// Raw-dimension selection for the no-subspace ablation: the K raw dimensions
/// of largest source variance, weighted by `1 + |w_d|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDimSelection {
    pub dims: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn select_top_variance(
    source_stats: &FeatureStats,
    head_w: &[f64],
    k: usize,
) -> Result<RawDimSelection> {
    let d = source_stats.dim();
    if head_w.len() != d {
        return Err(Error::Dimension(format!(
            "select_top_variance: head width {} != {d}",
            head_w.len()
        )));
    }
    if k == 0 || k > d {
        return Err(Error::Dimension(format!(
            "select_top_variance: K={k} out of range 1..={d}"
        )));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        source_stats.var[b]
            .partial_cmp(&source_stats.var[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let dims: Vec<usize> = order.into_iter().take(k).collect();
    Ok(RawDimSelection {
        mean: dims.iter().map(|&j| source_stats.mean[j]).collect(),
        var: dims.iter().map(|&j| source_stats.var[j]).collect(),
        weights: dims.iter().map(|&j| 1.0 + head_w[j].abs()).collect(),
        dims,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feature_stats_symmetric_pair() {
        let m = Matrix::from_rows(&[vec![0.0], vec![2.0]]).unwrap();
        let s = feature_stats(&m).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.var, vec![1.0]);
    }

    #[test]
    fn feature_stats_identical_rows() {
        let m = Matrix::from_rows(&vec![vec![3.0, -1.0]; 5]).unwrap();
        let s = feature_stats(&m).unwrap();
        assert_eq!(s.var, vec![0.0, 0.0]);
    }

    #[test]
    fn feature_stats_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let s = feature_stats(&m).unwrap();
        for j in 0..3 {
            let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / 5.0;
            let var: f64 = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(s.mean[j], mean, epsilon = 1e-12);
            assert_abs_diff_eq!(s.var[j], var, epsilon = 1e-12);
        }
    }

    #[test]
    fn feature_stats_rejects_single_row() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            feature_stats(&m),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn covariance_hand_example() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let sigma = covariance(&m, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(sigma.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sigma.get(1, 1), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(sigma.get(0, 1), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn covariance_diagonal_matches_variances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let s = feature_stats(&m).unwrap();
        let sigma = covariance(&m, &s.mean).unwrap();
        for j in 0..4 {
            assert_abs_diff_eq!(sigma.get(j, j), s.var[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn detect_subspace_isotropic_cloud() {
        let m = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let sub = detect_subspace(&m, &[1.0, 0.0], 2).unwrap();
        assert_abs_diff_eq!(sub.eigenvalues[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(sub.eigenvalues[1], 0.5, epsilon = 1e-10);
        // one basis vector is aligned with e1 (alpha 2), the other orthogonal (alpha 1)
        let mut ws = sub.weights.clone();
        ws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_abs_diff_eq!(ws[0], 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(ws[1], 2.0, epsilon = 1e-10);
    }

    #[test]
    fn detect_subspace_rank_one_line() {
        // points on the line through (1,1) direction (3,4)/5
        let dir = [0.6, 0.8];
        let rows: Vec<Vec<f64>> = [-2.0, -1.0, 1.0, 2.0f64]
            .iter()
            .map(|&t| vec![1.0 + t * dir[0], 1.0 + t * dir[1]])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let sub = detect_subspace(&m, &[0.0, 0.0], 1).unwrap();
        assert_eq!(sub.k(), 1);
        let v = sub.basis.row(0);
        assert_abs_diff_eq!(v[0].abs(), 0.6, epsilon = 1e-10);
        assert_abs_diff_eq!(v[1].abs(), 0.8, epsilon = 1e-10);
        // K exceeding the rank is refused with the available rank named
        match detect_subspace(&m, &[0.0, 0.0], 2) {
            Err(Error::RankExceeded { requested: 2, rank: 1 }) => {}
            other => panic!("expected rank error, got {other:?}"),
        }
    }

    #[test]
    fn detect_subspace_orthogonal_head_unit_weights() {
        let rows: Vec<Vec<f64>> = [-2.0f64, -1.0, 1.0, 2.0]
            .iter()
            .map(|&t| vec![t, 0.5 * t, 0.0])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let sub = detect_subspace(&m, &[0.0, 0.0, 1.0], 1).unwrap();
        assert_abs_diff_eq!(sub.weights[0], 1.0, epsilon = 1e-10);
    }

    #[test]
    fn project_examples() {
        let sub = SubspaceStats {
            mean: vec![1.0, 1.0],
            basis: Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap(),
            eigenvalues: vec![1.0],
            weights: vec![1.0],
        };
        let m = Matrix::from_rows(&[vec![3.0, 5.0], vec![1.0, 1.0]]).unwrap();
        let p = project(&m, &sub).unwrap();
        assert_eq!(p.get(0, 0), 2.0);
        assert_eq!(p.get(1, 0), 0.0);

        // identity basis, zero mean -> projection is the identity
        let sub = SubspaceStats {
            mean: vec![0.0, 0.0],
            basis: Matrix::identity(2),
            eigenvalues: vec![1.0, 1.0],
            weights: vec![1.0, 1.0],
        };
        let p = project(&m, &sub).unwrap();
        assert_eq!(p.data(), m.data());
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_abs_diff_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert_abs_diff_eq!(gaussian_kl(1.0, 1.0, 0.0, 1.0).unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(
            gaussian_kl(0.0, 1.0, 0.0, 4.0).unwrap(),
            (4.0f64.ln() - 0.75) / 2.0,
            epsilon = 1e-12
        );
        assert!(gaussian_kl(0.0, 0.0, 0.0, 1.0).is_err());
    }

    /// Numerical quadrature of the KL integrand (Simpson's rule); independent
    /// of the closed form.
    pub(crate) fn kl_by_quadrature(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
        let s1 = var1.sqrt();
        let lo = (mu1 - 12.0 * s1).min(mu2 - 12.0 * var2.sqrt());
        let hi = (mu1 + 12.0 * s1).max(mu2 + 12.0 * var2.sqrt());
        let n = 20001; // odd number of points
        let h = (hi - lo) / (n - 1) as f64;
        let logp = |x: f64| -0.5 * ((x - mu1) * (x - mu1) / var1) - 0.5 * (2.0 * std::f64::consts::PI * var1).ln();
        let logq = |x: f64| -0.5 * ((x - mu2) * (x - mu2) / var2) - 0.5 * (2.0 * std::f64::consts::PI * var2).ln();
        let f = |x: f64| {
            let lp = logp(x);
            lp.exp() * (lp - logq(x))
        };
        let mut acc = f(lo) + f(hi);
        for i in 1..n - 1 {
            let x = lo + i as f64 * h;
            acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn gaussian_kl_matches_quadrature() {
        assert_abs_diff_eq!(
            gaussian_kl(1.0, 1.0, 0.0, 1.0).unwrap(),
            kl_by_quadrature(1.0, 1.0, 0.0, 1.0),
            epsilon = 1e-7
        );
        assert_abs_diff_eq!(
            gaussian_kl(0.0, 1.0, 0.0, 4.0).unwrap(),
            kl_by_quadrature(0.0, 1.0, 0.0, 4.0),
            epsilon = 1e-7
        );
    }

    fn sub_1d(lambda: f64, alpha: f64) -> SubspaceStats {
        SubspaceStats {
            mean: vec![0.0],
            basis: Matrix::identity(1),
            eigenvalues: vec![lambda],
            weights: vec![alpha],
        }
    }

    #[test]
    fn ssa_loss_examples() {
        let sub = sub_1d(1.0, 1.0);
        let matched = FeatureStats { mean: vec![0.0], var: vec![1.0] };
        assert_abs_diff_eq!(ssa_loss(&matched, &sub).unwrap(), 0.0, epsilon = 1e-12);

        let t = FeatureStats { mean: vec![0.0], var: vec![2.0] };
        assert_abs_diff_eq!(ssa_loss(&t, &sub).unwrap(), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(ssa_loss(&t, &sub_1d(1.0, 2.0)).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ssa_loss_equals_symmetric_kl_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let k = rng.gen_range(1..6);
            let lambda: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..5.0)).collect();
            let alpha: Vec<f64> = (0..k).map(|_| rng.gen_range(1.0..2.0)).collect();
            let mu: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..5.0)).collect();
            let (closed, _, _) =
                alignment_loss_grad(Metric::Kl, &mu, &var, &lambda, &alpha).unwrap();
            let mut kl_sum = 0.0;
            for d in 0..k {
                kl_sum += alpha[d]
                    * (gaussian_kl(0.0, lambda[d], mu[d], var[d]).unwrap()
                        + gaussian_kl(mu[d], var[d], 0.0, lambda[d]).unwrap());
            }
            assert_abs_diff_eq!(closed, kl_sum, epsilon = 1e-10);
        }
    }

    #[test]
    fn naive_alignment_examples() {
        let s = FeatureStats { mean: vec![0.0], var: vec![1.0] };
        let t = FeatureStats { mean: vec![1.0], var: vec![1.0] };
        assert_abs_diff_eq!(naive_alignment_loss(&s, &s).unwrap(), 0.0);
        assert_abs_diff_eq!(naive_alignment_loss(&t, &s).unwrap(), 1.0, epsilon = 1e-12);

        let degenerate = FeatureStats { mean: vec![0.0, 0.0], var: vec![1.0, 0.0] };
        let t2 = FeatureStats { mean: vec![0.0, 0.0], var: vec![1.0, 1.0] };
        assert!(matches!(
            naive_alignment_loss(&t2, &degenerate),
            Err(Error::DegenerateDimension(_))
        ));
    }

    #[test]
    fn wasserstein_and_l1_examples() {
        let sub = sub_1d(1.0, 1.0);
        let matched = FeatureStats { mean: vec![0.0], var: vec![1.0] };
        assert_abs_diff_eq!(wasserstein2_loss(&matched, &sub).unwrap(), 0.0);
        assert_abs_diff_eq!(l1_loss(&matched, &sub).unwrap(), 0.0);

        let t = FeatureStats { mean: vec![1.0], var: vec![1.0] };
        assert_abs_diff_eq!(wasserstein2_loss(&t, &sub).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(l1_loss(&t, &sub).unwrap(), 1.0, epsilon = 1e-12);

        let t = FeatureStats { mean: vec![1.0], var: vec![4.0] };
        assert_abs_diff_eq!(l1_loss(&t, &sub).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn reconstruction_error_examples() {
        let sub = SubspaceStats {
            mean: vec![1.0, 2.0],
            basis: Matrix::from_vec(2, 2, vec![0.6, 0.8, -0.8, 0.6]).unwrap(),
            eigenvalues: vec![2.0, 1.0],
            weights: vec![1.0, 1.0],
        };
        // z at the mean reconstructs exactly for any n
        for n in 0..=2 {
            assert_abs_diff_eq!(
                reconstruction_error(&[1.0, 2.0], &sub, n).unwrap(),
                0.0,
                epsilon = 1e-12
            );
        }
        // n=0: distance to the mean
        let z = [4.0, 6.0];
        assert_abs_diff_eq!(
            reconstruction_error(&z, &sub, 0).unwrap(),
            5.0,
            epsilon = 1e-12
        );
        // z = mean + c*v1 reconstructs exactly with n=1
        let z = [1.0 + 3.0 * 0.6, 2.0 + 3.0 * 0.8];
        assert_abs_diff_eq!(
            reconstruction_error(&z, &sub, 1).unwrap(),
            0.0,
            epsilon = 1e-10
        );
        assert!(reconstruction_error(&z, &sub, 3).is_err());
    }

    #[test]
    fn sensitivity_examples() {
        let sub = SubspaceStats {
            mean: vec![0.0, 0.0],
            basis: Matrix::identity(2),
            eigenvalues: vec![1.0, 1.0],
            weights: vec![1.0, 1.0],
        };
        assert_eq!(sensitivity(&sub), vec![1.0, 1.0]);

        let sub = SubspaceStats {
            mean: vec![0.0, 0.0],
            basis: Matrix::from_vec(1, 2, vec![0.6, 0.8]).unwrap(),
            eigenvalues: vec![1.0],
            weights: vec![1.0],
        };
        let s = sensitivity(&sub);
        assert_abs_diff_eq!(s[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s[1], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn normality_diagnostic_examples() {
        // symmetric two-point sample -> zero skewness
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let d = normality_diagnostic(&m).unwrap();
        assert_abs_diff_eq!(d[0].0, 0.0, epsilon = 1e-12);

        // large seeded standard-normal sample
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let n = 20000;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                vec![(-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()]
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let d = normality_diagnostic(&m).unwrap();
        let bound = 6.0 / (n as f64).sqrt() * 3.0;
        assert!(d[0].0.abs() < bound, "skew {}", d[0].0);
        assert!(d[0].1.abs() < bound * 2.0, "kurt {}", d[0].1);

        // constant dimension
        let m = Matrix::from_rows(&vec![vec![1.0]; 10]).unwrap();
        assert!(normality_diagnostic(&m).is_err());
    }

    #[test]
    fn count_valid_dims_examples() {
        let s = FeatureStats { mean: vec![0.0; 3], var: vec![0.0, 0.0, 0.0] };
        assert_eq!(count_valid_dims(&s, VALID_DIM_TOL), 0);
        let s = FeatureStats { mean: vec![0.0; 3], var: vec![1.0, 0.0, 2.0] };
        assert_eq!(count_valid_dims(&s, VALID_DIM_TOL), 2);
    }

    #[test]
    fn select_top_variance_orders_by_variance() {
        let s = FeatureStats {
            mean: vec![0.0; 4],
            var: vec![0.5, 3.0, 1.0, 2.0],
        };
        let sel = select_top_variance(&s, &[0.1, 0.2, 0.3, 0.4], 2).unwrap();
        assert_eq!(sel.dims, vec![1, 3]);
        assert_eq!(sel.var, vec![3.0, 2.0]);
        assert_eq!(sel.weights, vec![1.2, 1.4]);
    }

    #[test]
    fn projected_source_stats_match_spectrum() {
        // invariant: projecting the exact training features yields mean ~ 0
        // and per-dimension variance ~ eigenvalues
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 400;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let a: f64 = rng.gen_range(-3.0..3.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                vec![a + 0.5 * b + 1.0, 0.3 * a - b, a * 0.2 + 2.0 * b - 0.5]
            })
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let sub = detect_subspace(&m, &[0.1, 0.2, 0.3], 2).unwrap();
        let p = project(&m, &sub).unwrap();
        let ps = feature_stats(&p).unwrap();
        for d in 0..2 {
            assert!(ps.mean[d].abs() <= 1e-8, "projected mean {}", ps.mean[d]);
            let rel = (ps.var[d] - sub.eigenvalues[d]).abs() / sub.eigenvalues[d];
            assert!(rel <= 1e-6, "projected var rel err {rel}");
        }
    }

    proptest! {
        #[test]
        fn ssa_loss_nonnegative_and_zero_iff_matched(
            lambda in proptest::collection::vec(0.1f64..5.0, 1..5),
            mu_seed in proptest::collection::vec(-2.0f64..2.0, 1..5),
            var_seed in proptest::collection::vec(0.1f64..5.0, 1..5),
        ) {
            let k = lambda.len().min(mu_seed.len()).min(var_seed.len());
            let lambda = &lambda[..k];
            let mu = &mu_seed[..k];
            let var = &var_seed[..k];
            let weights = vec![1.0; k];
            let (loss, _, _) = alignment_loss_grad(Metric::Kl, mu, var, lambda, &weights).unwrap();
            prop_assert!(loss >= 0.0);
            let (matched, _, _) =
                alignment_loss_grad(Metric::Kl, &vec![0.0; k], lambda, lambda, &weights).unwrap();
            prop_assert!(matched.abs() <= 1e-12);
            let mismatched = (0..k).any(|d| mu[d] != 0.0 || (var[d] - lambda[d]).abs() > 1e-12);
            if mismatched {
                prop_assert!(loss > 0.0);
            }
        }

        #[test]
        fn weight_bound_holds(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.gen_range(2..8usize);
            let n = 50;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let m = Matrix::from_rows(&rows).unwrap();
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let stats = feature_stats(&m).unwrap();
            let sigma = covariance(&m, &stats.mean).unwrap();
            let eig = crate::linalg::sym_eig(&sigma).unwrap();
            let rank = crate::linalg::numeric_rank(&eig.eigenvalues, crate::linalg::RANK_REL_TOL).unwrap();
            prop_assume!(rank >= 1);
            let sub = detect_subspace(&m, &w, rank).unwrap();
            let wnorm = norm2(&w);
            for &a in &sub.weights {
                prop_assert!(a >= 1.0 - 1e-12);
                prop_assert!(a <= 1.0 + wnorm + 1e-9);
            }
        }

        #[test]
        fn reconstruction_error_monotone(seed in 0u64..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 5usize;
            let rows: Vec<Vec<f64>> = (0..60)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let m = Matrix::from_rows(&rows).unwrap();
            let stats = feature_stats(&m).unwrap();
            let sigma = covariance(&m, &stats.mean).unwrap();
            let eig = crate::linalg::sym_eig(&sigma).unwrap();
            let rank = crate::linalg::numeric_rank(&eig.eigenvalues, crate::linalg::RANK_REL_TOL).unwrap();
            prop_assume!(rank >= 2);
            let sub = detect_subspace(&m, &vec![0.0; d], rank).unwrap();
            let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut prev = f64::INFINITY;
            for n in 0..=rank {
                let e = reconstruction_error(&z, &sub, n).unwrap();
                prop_assert!(e <= prev + 1e-10);
                prev = e;
            }
        }
    }

    #[test]
    fn orthogonal_head_gives_unweighted_loss() {
        // w orthogonal to the span -> all alpha = 1 -> weighted == unweighted
        let rows: Vec<Vec<f64>> = [-2.0f64, -1.0, 1.0, 2.0]
            .iter()
            .map(|&t| vec![t, 2.0 * t, 0.0])
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let sub = detect_subspace(&m, &[0.0, 0.0, 5.0], 1).unwrap();
        assert_abs_diff_eq!(sub.weights[0], 1.0, epsilon = 1e-10);
        let t = FeatureStats { mean: vec![0.5], var: vec![2.0] };
        let weighted = ssa_loss(&t, &sub).unwrap();
        let unweighted = alignment_loss_grad(
            Metric::Kl,
            &t.mean,
            &t.var,
            &sub.eigenvalues,
            &[1.0],
        )
        .unwrap()
        .0;
        assert_abs_diff_eq!(weighted, unweighted, epsilon = 1e-12);
    }
}
