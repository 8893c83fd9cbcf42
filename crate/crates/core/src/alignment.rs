//! Normalized prompt gradients, their weighted consensus and the alignment
//! loss that penalizes sources pulling away from it.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::Matrix;

/// Default floor on gradient norms below which a direction is undefined.
pub const DEFAULT_DEGENERACY_FLOOR: f64 = 1e-8;

/// How a norm below the floor is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Fail with a vanishing or degenerate gradient error.
    Strict,
    /// Divide by the floor instead and flag the result.
    Guarded,
}

/// Batch-averaged gradient of the target loss with respect to one source prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGradient {
    pub source_id: usize,
    tensor: Matrix,
    norm: f64,
}

impl PromptGradient {
    pub fn new(source_id: usize, tensor: Matrix) -> Result<Self> {
        if tensor.rows() == 0 || tensor.cols() == 0 {
            return Err(Error::mismatch("gradient shape", "p >= 1, d >= 1", format!("{:?}", tensor.shape())));
        }
        let norm = tensor.frobenius_norm();
        Ok(PromptGradient { source_id, tensor, norm })
    }

    pub fn tensor(&self) -> &Matrix {
        &self.tensor
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tensor.shape()
    }
}

/// `g / max(‖g‖_F, floor)`.
pub fn normalize_gradient(g: &PromptGradient, floor: f64, mode: NormMode) -> Result<Matrix> {
    if g.norm < floor && mode == NormMode::Strict {
        return Err(Error::VanishingGradient {
            source_id: g.source_id,
            norm: g.norm,
            floor,
        });
    }
    Ok(g.tensor.scaled(1.0 / g.norm.max(floor)))
}

/// Unit-norm gradient directions sharing one `p×d` shape.
#[derive(Debug, Clone)]
pub struct NormalizedGradientSet {
    directions: Vec<Matrix>,
    shape: (usize, usize),
}

impl NormalizedGradientSet {
    /// Normalizes every gradient strictly: a unit direction must exist for each source.
    pub fn from_gradients(gradients: &[PromptGradient], floor: f64) -> Result<Self> {
        let first = gradients
            .first()
            .ok_or_else(|| Error::InvalidConfig("no gradients".into()))?;
        let shape = first.shape();
        let mut directions = Vec::with_capacity(gradients.len());
        for g in gradients {
            if g.shape() != shape {
                return Err(Error::mismatch(
                    format!("gradient of source {}", g.source_id),
                    format!("{shape:?}"),
                    format!("{:?}", g.shape()),
                ));
            }
            directions.push(normalize_gradient(g, floor, NormMode::Strict)?);
        }
        Ok(NormalizedGradientSet { directions, shape })
    }

    /// Builds the set from raw matrices, source ids taken from their positions.
    pub fn from_matrices(raw: &[Matrix], floor: f64) -> Result<Self> {
        let grads = raw
            .iter()
            .enumerate()
            .map(|(i, m)| PromptGradient::new(i, m.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_gradients(&grads, floor)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn directions(&self) -> &[Matrix] {
        &self.directions
    }

    fn check_len(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.directions.len() {
            return Err(Error::mismatch("weight count", self.directions.len(), alpha.len()));
        }
        Ok(())
    }
}

/// Sums after sorting, so the result does not depend on the order of the terms.
fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// `g_α = Σ α_i ĝ_i`, each entry summed independently of source order.
pub fn ensemble_gradient(set: &NormalizedGradientSet, alpha: &[f64]) -> Result<Matrix> {
    set.check_len(alpha)?;
    let (p, d) = set.shape;
    let mut terms = vec![0.0; alpha.len()];
    let data: Vec<f64> = (0..p * d)
        .map(|e| {
            for (t, (a, g)) in terms.iter_mut().zip(alpha.iter().zip(&set.directions)) {
                *t = a * g.data()[e];
            }
            ordered_sum(&mut terms)
        })
        .collect();
    Matrix::new(p, d, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub loss: f64,
    /// `⟨ĝ_i, ĝ_α⟩` per source.
    pub cosines: Vec<f64>,
    /// `‖g_α‖_F` before any floor is applied.
    pub ensemble_norm: f64,
    /// Set when the floor replaced the ensemble norm.
    pub floored: bool,
}

fn ensemble_direction(
    set: &NormalizedGradientSet,
    alpha: &[f64],
    floor: f64,
    mode: NormMode,
) -> Result<(Matrix, f64, bool)> {
    let g = ensemble_gradient(set, alpha)?;
    let norm = g.frobenius_norm();
    if norm < floor && mode == NormMode::Strict {
        return Err(Error::DegenerateEnsemble { norm, floor });
    }
    Ok((g.scaled(1.0 / norm.max(floor)), norm, norm < floor))
}

/// `(1/M) Σ_i (1 − ⟨ĝ_i, ĝ_α⟩)` with `ĝ_α = g_α / ‖g_α‖_F`.
pub fn alignment_loss(
    set: &NormalizedGradientSet,
    alpha: &[f64],
    floor: f64,
    mode: NormMode,
) -> Result<AlignmentReport> {
    let (dir, ensemble_norm, floored) = ensemble_direction(set, alpha, floor, mode)?;
    let cosines: Vec<f64> = set.directions.iter().map(|g| g.frobenius_inner(&dir)).collect();
    let mut terms: Vec<f64> = cosines.iter().map(|c| 1.0 - c).collect();
    let loss = ordered_sum(&mut terms) / set.len() as f64;
    Ok(AlignmentReport {
        loss,
        cosines,
        ensemble_norm,
        floored,
    })
}

/// The same loss written as a mean squared distance, `(1/2M) Σ_i ‖ĝ_i − ĝ_α‖²_F`.
pub fn alignment_loss_distance_form(
    set: &NormalizedGradientSet,
    alpha: &[f64],
    floor: f64,
    mode: NormMode,
) -> Result<f64> {
    let (dir, _, _) = ensemble_direction(set, alpha, floor, mode)?;
    let total: f64 = set
        .directions
        .iter()
        .map(|g| {
            g.data()
                .iter()
                .zip(dir.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(total / (2.0 * set.len() as f64))
}

/// `∂L_align/∂α_k = −(⟨m̄, ĝ_k⟩ − ⟨m̄, ĝ_α⟩⟨ĝ_α, ĝ_k⟩) / ‖g_α‖` with `m̄` the mean direction.
/// Below the floor (guarded mode) `ĝ_α` is linear in `α` and the projection term drops.
pub fn alignment_loss_gradient(
    set: &NormalizedGradientSet,
    alpha: &[f64],
    floor: f64,
    mode: NormMode,
) -> Result<Vec<f64>> {
    let (dir, norm, floored) = ensemble_direction(set, alpha, floor, mode)?;
    let m = set.len() as f64;
    let (p, d) = set.shape;
    let mean = Matrix::from_fn(p, d, |r, c| {
        set.directions.iter().map(|g| g[(r, c)]).sum::<f64>() / m
    });
    let mean_dir = mean.frobenius_inner(&dir);
    Ok(set
        .directions
        .iter()
        .map(|g| {
            let along = if floored { 0.0 } else { mean_dir * dir.frobenius_inner(g) };
            -(mean.frobenius_inner(g) - along) / norm.max(floor)
        })
        .collect())
}

/// Matrix of pairwise cosines `⟨ĝ_i, ĝ_j⟩_F`.
pub fn cosine_similarity_matrix(set: &NormalizedGradientSet, exec: Exec) -> Matrix {
    let m = set.len();
    let rows = exec.map(m, |i| {
        (i..m)
            .map(|j| set.directions[i].frobenius_inner(&set.directions[j]))
            .collect::<Vec<f64>>()
    });
    let mut out = Matrix::zeros(m, m);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            out[(i, i + off)] = v;
            out[(i + off, i)] = v;
        }
    }
    out
}

/// Gram matrix of the unit directions. Everything the alignment loss needs is
/// a quadratic form in it: `⟨ĝ_i, g_α⟩ = (Gα)_i` and `‖g_α‖² = αᵀGα`.
#[derive(Debug, Clone)]
pub struct AlignmentGram {
    gram: Matrix,
    column_means: Vec<f64>,
}

impl AlignmentGram {
    pub fn new(set: &NormalizedGradientSet) -> Self {
        let gram = cosine_similarity_matrix(set, Exec::Sequential);
        let m = gram.rows();
        let column_means = (0..m)
            .map(|k| (0..m).map(|i| gram[(i, k)]).sum::<f64>() / m as f64)
            .collect();
        AlignmentGram { gram, column_means }
    }

    pub fn len(&self) -> usize {
        self.gram.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.rows() == 0
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// Loss and its gradient, sharing one pass over the Gram matrix.
    pub fn loss_and_gradient(&self, alpha: &[f64], floor: f64, mode: NormMode) -> Result<(f64, Vec<f64>)> {
        let m = self.len();
        if alpha.len() != m {
            return Err(Error::mismatch("weight count", m, alpha.len()));
        }
        let projections = self.gram.matvec(alpha)?;
        let sq: f64 = alpha.iter().zip(&projections).map(|(a, g)| a * g).sum();
        let norm = sq.max(0.0).sqrt();
        if norm < floor && mode == NormMode::Strict {
            return Err(Error::DegenerateEnsemble { norm, floor });
        }
        let scale = norm.max(floor);
        let floored = norm < floor;
        let mean_proj = projections.iter().sum::<f64>() / m as f64;
        let loss = 1.0 - mean_proj / scale;
        let grad = (0..m)
            .map(|k| {
                let along = if floored {
                    0.0
                } else {
                    (mean_proj / scale) * (projections[k] / scale)
                };
                -(self.column_means[k] - along) / scale
            })
            .collect();
        Ok((loss, grad))
    }
}

/// Traces of the per-coordinate population variance of compound gradients,
/// over all coordinates and over the prompt coordinates only.
pub fn compound_variance_trace(compound: &[(Matrix, Matrix)]) -> Result<(f64, f64)> {
    if compound.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: compound.len(),
        });
    }
    let theta_shape = compound[0].0.shape();
    let prompt_shape = compound[0].1.shape();
    for (i, (t, p)) in compound.iter().enumerate() {
        if t.shape() != theta_shape {
            return Err(Error::mismatch(
                format!("theta block {i}"),
                format!("{theta_shape:?}"),
                format!("{:?}", t.shape()),
            ));
        }
        if p.shape() != prompt_shape {
            return Err(Error::mismatch(
                format!("prompt block {i}"),
                format!("{prompt_shape:?}"),
                format!("{:?}", p.shape()),
            ));
        }
    }
    let n = compound.len() as f64;
    let coord_variance = |value: &dyn Fn(usize) -> f64| {
        // shifted by the first sample so identical coordinates give exactly 0
        let base = value(0);
        let shifted: Vec<f64> = (0..compound.len()).map(|s| value(s) - base).collect();
        let mean = shifted.iter().sum::<f64>() / n;
        shifted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
    };
    let theta_len = theta_shape.0 * theta_shape.1;
    let prompt_len = prompt_shape.0 * prompt_shape.1;
    let theta_trace: f64 = (0..theta_len)
        .map(|e| coord_variance(&|s| compound[s].0.data()[e]))
        .sum();
    let prompt_trace: f64 = (0..prompt_len)
        .map(|e| coord_variance(&|s| compound[s].1.data()[e]))
        .sum();
    Ok((theta_trace + prompt_trace, prompt_trace))
}
