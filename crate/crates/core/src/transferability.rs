//! H-score of fused features, `tr(Σ_t⁻¹ Σ_b)`, made quadratic in the weights.
//!
//! Fusion is linear, so the covariances of `Σ_i α_i f_i` expand into
//! `Σ_ij α_i α_j C_ij` over cross-covariance blocks between sources. The
//! blocks are computed once per bundle; every later evaluation costs
//! `O(M²h² + h³)` regardless of the sample count.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{self, column_means, trace_of_product, CovariancePair, Matrix};

/// Features for one source together with the class labels of their rows.
#[derive(Debug, Clone)]
pub struct LabeledFeatures {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledFeatures {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let n = features.rows();
        if n < 2 {
            return Err(Error::InsufficientSamples { needed: 2, got: n });
        }
        if labels.len() != n {
            return Err(Error::mismatch("label count", n, labels.len()));
        }
        if class_count < 2 {
            return Err(Error::InvalidLabels(format!(
                "need at least 2 classes, got {class_count}"
            )));
        }
        let mut counts = vec![0usize; class_count];
        for (i, &y) in labels.iter().enumerate() {
            if y >= class_count {
                return Err(Error::InvalidLabels(format!(
                    "label {y} at row {i} is not below class count {class_count}"
                )));
            }
            counts[y] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidLabels(format!("class {empty} has no samples")));
        }
        Ok(LabeledFeatures {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }
}

/// Per-class feature means (`C×h`) and the empirical class priors.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    pub means: Matrix,
    pub priors: Vec<f64>,
}

pub fn class_conditional_means(lf: &LabeledFeatures) -> ClassMeans {
    let h = lf.features.cols();
    let c = lf.class_count;
    let mut sums = Matrix::zeros(c, h);
    let mut counts = vec![0usize; c];
    for (r, &y) in lf.labels.iter().enumerate() {
        counts[y] += 1;
        for (k, v) in lf.features.row(r).iter().enumerate() {
            sums[(y, k)] += v;
        }
    }
    let n = lf.labels.len() as f64;
    let means = Matrix::from_fn(c, h, |y, k| sums[(y, k)] / counts[y] as f64);
    let priors = counts.iter().map(|&k| k as f64 / n).collect();
    ClassMeans { means, priors }
}

/// Cross-covariance blocks between every pair of sources.
#[derive(Debug, Clone)]
pub struct CrossCovarianceCache {
    total_blocks: Vec<Matrix>,
    between_blocks: Vec<Matrix>,
    source_count: usize,
    feature_dim: usize,
}

impl CrossCovarianceCache {
    pub fn build(sources: &[LabeledFeatures]) -> Result<Self> {
        Self::build_with(sources, Exec::default())
    }

    pub fn build_with(sources: &[LabeledFeatures], exec: Exec) -> Result<Self> {
        let first = sources
            .first()
            .ok_or_else(|| Error::InvalidConfig("no sources".into()))?;
        let (n, h) = first.features.shape();
        for (i, s) in sources.iter().enumerate().skip(1) {
            if s.features.shape() != (n, h) {
                return Err(Error::mismatch(
                    format!("features of source {i}"),
                    format!("{n}x{h}"),
                    format!("{}x{}", s.features.rows(), s.features.cols()),
                ));
            }
            if s.labels != first.labels || s.class_count != first.class_count {
                return Err(Error::InvalidLabels(format!(
                    "source {i} does not share the labels of source 0"
                )));
            }
        }
        let m = sources.len();

        // Centered features and centered class means per source.
        let prepared: Vec<(Matrix, Matrix)> = exec.map(m, |i| {
            let f = &sources[i].features;
            let mean = column_means(f);
            let centered = Matrix::from_fn(n, h, |r, k| f[(r, k)] - mean[k]);
            let cm = class_conditional_means(&sources[i]);
            let centered_means = Matrix::from_fn(cm.means.rows(), h, |y, k| {
                cm.means[(y, k)] - mean[k]
            });
            (centered, centered_means)
        });
        let priors = class_conditional_means(first).priors;

        // Upper-triangle pairs, each computed independently with a fixed loop order.
        let pairs: Vec<(usize, usize)> = (0..m).flat_map(|i| (i..m).map(move |j| (i, j))).collect();
        let blocks: Vec<(Matrix, Matrix)> = exec.map(pairs.len(), |p| {
            let (i, j) = pairs[p];
            let mut total = cross_product(&prepared[i].0, &prepared[j].0, None);
            total = total.scaled(1.0 / n as f64);
            let mut between = cross_product(&prepared[i].1, &prepared[j].1, Some(&priors));
            if i == j {
                total.symmetrize();
                between.symmetrize();
            }
            (total, between)
        });

        let mut total_blocks = vec![Matrix::zeros(0, 0); m * m];
        let mut between_blocks = vec![Matrix::zeros(0, 0); m * m];
        for (&(i, j), (t, b)) in pairs.iter().zip(blocks) {
            if i != j {
                total_blocks[j * m + i] = t.transpose();
                between_blocks[j * m + i] = b.transpose();
            }
            total_blocks[i * m + j] = t;
            between_blocks[i * m + j] = b;
        }
        Ok(CrossCovarianceCache {
            total_blocks,
            between_blocks,
            source_count: m,
            feature_dim: h,
        })
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `C_ij`, the cross-covariance of centered sources `i` and `j`.
    pub fn total_block(&self, i: usize, j: usize) -> &Matrix {
        &self.total_blocks[i * self.source_count + j]
    }

    /// `B_ij`, the prior-weighted cross-covariance of centered class means.
    pub fn between_block(&self, i: usize, j: usize) -> &Matrix {
        &self.between_blocks[i * self.source_count + j]
    }

    fn check_len(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.source_count {
            return Err(Error::mismatch("weight count", self.source_count, alpha.len()));
        }
        Ok(())
    }

    /// `Σ_ij α_i α_j X_ij`, assembled so the result is exactly symmetric.
    fn assemble(&self, blocks: &[Matrix], alpha: &[f64]) -> Matrix {
        let m = self.source_count;
        let h = self.feature_dim;
        let mut out = Matrix::zeros(h, h);
        for i in 0..m {
            out.add_scaled(alpha[i] * alpha[i], &blocks[i * m + i]);
            for j in i + 1..m {
                let w = alpha[i] * alpha[j];
                if w != 0.0 {
                    add_scaled_symmetric(&mut out, w, &blocks[i * m + j]);
                }
            }
        }
        out
    }

    /// `∂/∂α_k Σ_ij α_i α_j X_ij = Σ_j α_j (X_kj + X_jk)`.
    fn assemble_partial(&self, blocks: &[Matrix], alpha: &[f64], k: usize) -> Matrix {
        let m = self.source_count;
        let h = self.feature_dim;
        let mut out = Matrix::zeros(h, h);
        for j in 0..m {
            if alpha[j] != 0.0 {
                add_scaled_symmetric(&mut out, alpha[j], &blocks[k * m + j]);
            }
        }
        out
    }

    /// Total and between-class covariance of the features fused with `alpha`.
    pub fn fused_covariances(&self, alpha: &[f64]) -> Result<(Matrix, Matrix)> {
        self.check_len(alpha)?;
        Ok((
            self.assemble(&self.total_blocks, alpha),
            self.assemble(&self.between_blocks, alpha),
        ))
    }
}

/// `Σ_r w_r a_r b_rᵀ` over matching rows of `a` and `b` (weights default to 1).
fn cross_product(a: &Matrix, b: &Matrix, weights: Option<&[f64]>) -> Matrix {
    let h = a.cols();
    let mut out = Matrix::zeros(h, h);
    for r in 0..a.rows() {
        let w = weights.map_or(1.0, |w| w[r]);
        let ar = a.row(r);
        let br = b.row(r);
        for (x, &av) in ar.iter().enumerate() {
            let s = w * av;
            for (y, &bv) in br.iter().enumerate() {
                out[(x, y)] += s * bv;
            }
        }
    }
    out
}

/// `out += w (x + xᵀ)`; each `(a, b)`/`(b, a)` pair receives the same value.
fn add_scaled_symmetric(out: &mut Matrix, w: f64, x: &Matrix) {
    let h = x.rows();
    for a in 0..h {
        out[(a, a)] += w * (x[(a, a)] + x[(a, a)]);
        for b in a + 1..h {
            let v = w * (x[(a, b)] + x[(b, a)]);
            out[(a, b)] += v;
            out[(b, a)] += v;
        }
    }
}

#[derive(Debug, Clone)]
pub struct HScoreReport {
    pub value: f64,
    pub covariances: CovariancePair,
}

/// Resolves the scale-adaptive ridge for a cache at uniform weights.
pub fn auto_ridge(cache: &CrossCovarianceCache) -> f64 {
    let m = cache.source_count();
    let uniform = vec![1.0 / m as f64; m];
    let total = cache.assemble(&cache.total_blocks, &uniform);
    linalg::default_ridge(&total)
}

/// `H(α) = tr((Σ_t(α) + ridge·I)⁻¹ Σ_b(α))`.
pub fn h_score(cache: &CrossCovarianceCache, alpha: &[f64], ridge: f64) -> Result<HScoreReport> {
    let (total, between) = cache.fused_covariances(alpha)?;
    let inv = linalg::ridge_cholesky_inverse(&total, ridge)?;
    let value = trace_of_product(&inv, &between)?;
    Ok(HScoreReport {
        value,
        covariances: CovariancePair {
            total,
            between,
            ridge_applied: ridge,
        },
    })
}

/// H-score and its gradient with respect to the weights, sharing one inversion.
pub fn h_score_with_gradient(
    cache: &CrossCovarianceCache,
    alpha: &[f64],
    ridge: f64,
) -> Result<(f64, Vec<f64>)> {
    let (total, between) = cache.fused_covariances(alpha)?;
    let inv = linalg::ridge_cholesky_inverse(&total, ridge)?;
    let value = trace_of_product(&inv, &between)?;
    // ∂H/∂α_k = tr(Σ̃⁻¹ S_b^k) − tr(S_t^k · Σ̃⁻¹ Σ_b Σ̃⁻¹)
    let sandwich = inv.matmul(&between)?.matmul(&inv)?;
    let mut grad = Vec::with_capacity(alpha.len());
    for k in 0..alpha.len() {
        let sb = cache.assemble_partial(&cache.between_blocks, alpha, k);
        let st = cache.assemble_partial(&cache.total_blocks, alpha, k);
        grad.push(trace_of_product(&inv, &sb)? - trace_of_product(&st, &sandwich)?);
    }
    Ok((value, grad))
}

pub fn h_score_gradient(cache: &CrossCovarianceCache, alpha: &[f64], ridge: f64) -> Result<Vec<f64>> {
    h_score_with_gradient(cache, alpha, ridge).map(|(_, g)| g)
}

/// H-score computed straight from one feature matrix, without a cache.
pub fn h_score_of_features(lf: &LabeledFeatures, ridge: f64) -> Result<f64> {
    let total = linalg::covariance(&lf.features)?;
    let cm = class_conditional_means(lf);
    let mean = column_means(&lf.features);
    let h = lf.features.cols();
    let mut between = Matrix::zeros(h, h);
    for (y, &p) in cm.priors.iter().enumerate() {
        for a in 0..h {
            for b in 0..h {
                between[(a, b)] += p * (cm.means[(y, a)] - mean[a]) * (cm.means[(y, b)] - mean[b]);
            }
        }
    }
    let inv = linalg::ridge_cholesky_inverse(&total, ridge)?;
    trace_of_product(&inv, &between)
}
