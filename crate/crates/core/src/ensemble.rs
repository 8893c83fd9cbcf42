//! Convex combinations over sources: the weight vector, feature fusion,
//! target-prompt construction and Euclidean projection onto the simplex.

use std::fmt;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Entries this close below zero are treated as rounding and clamped.
pub const CLAMP_TOL: f64 = 1e-12;
/// Allowed deviation of the sum from one.
pub const SUM_TOL: f64 = 1e-10;

/// A point on the probability simplex: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidWeights("empty weight vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidWeights(format!("non-finite weight {v}")));
        }
        if let Some(v) = values.iter().find(|&&v| v < -CLAMP_TOL) {
            return Err(Error::InvalidWeights(format!("negative weight {v}")));
        }
        let values: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(SimplexWeights(values))
    }

    pub fn uniform(m: usize) -> Self {
        assert!(m > 0, "uniform weights need at least one source");
        SimplexWeights(vec![1.0 / m as f64; m])
    }

    pub fn vertex(m: usize, i: usize) -> Self {
        assert!(i < m);
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        SimplexWeights(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn max_abs_diff(&self, other: &SimplexWeights) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Deref for SimplexWeights {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptRole {
    Source(usize),
    Target,
}

impl fmt::Display for PromptRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptRole::Source(i) => write!(f, "source {i}"),
            PromptRole::Target => write!(f, "target"),
        }
    }
}

/// A `p×d` block of prompt token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTensor {
    pub tokens: Matrix,
    pub role: PromptRole,
}

impl PromptTensor {
    pub fn new(tokens: Matrix, role: PromptRole) -> Result<Self> {
        if tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::mismatch("prompt shape", "p >= 1, d >= 1", format!("{:?}", tokens.shape())));
        }
        Ok(PromptTensor { tokens, role })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tokens.shape()
    }
}

/// `Σ_i α_i X_i` over equally shaped matrices. Zero weights are skipped, so a
/// simplex vertex reproduces its matrix bit for bit.
pub fn convex_combination(parts: &[&Matrix], alpha: &[f64]) -> Result<Matrix> {
    if parts.len() != alpha.len() {
        return Err(Error::mismatch("number of weights", parts.len(), alpha.len()));
    }
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidWeights("no sources to combine".into()))?;
    let shape = first.shape();
    if let Some((i, m)) = parts.iter().enumerate().find(|(_, m)| m.shape() != shape) {
        return Err(Error::mismatch(
            format!("shape of source {i}"),
            format!("{shape:?}"),
            format!("{:?}", m.shape()),
        ));
    }
    let mut out: Option<Matrix> = None;
    for (m, &a) in parts.iter().zip(alpha) {
        if a == 0.0 {
            continue;
        }
        match out.as_mut() {
            None => out = Some(if a == 1.0 { (*m).clone() } else { m.scaled(a) }),
            Some(acc) => acc.add_scaled(a, m),
        }
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros(shape.0, shape.1)))
}

/// Rowwise convex combination of per-source `N×h` feature matrices.
pub fn fuse_features(per_source: &[Matrix], alpha: &SimplexWeights) -> Result<Matrix> {
    let refs: Vec<&Matrix> = per_source.iter().collect();
    convex_combination(&refs, alpha)
}

/// `P_T = Σ α_i P_i`, flagged as the target prompt.
pub fn build_target_prompt(prompts: &[PromptTensor], alpha: &SimplexWeights) -> Result<PromptTensor> {
    let refs: Vec<&Matrix> = prompts.iter().map(|p| &p.tokens).collect();
    Ok(PromptTensor {
        tokens: convex_combination(&refs, alpha)?,
        role: PromptRole::Target,
    })
}

/// Euclidean projection onto `{α : Σα = 1, α ≥ 0}` by sort-and-threshold.
pub fn project_to_simplex(v: &[f64]) -> Result<SimplexWeights> {
    if v.is_empty() {
        return Err(Error::InvalidWeights("cannot project an empty vector".into()));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidWeights(format!("non-finite entry {x}")));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumulative += u;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            theta = t;
        }
    }
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| {
            let y = x - theta;
            if y <= CLAMP_TOL {
                0.0
            } else {
                y
            }
        })
        .collect();
    let sum: f64 = out.iter().sum();
    if sum <= 0.0 {
        // every coordinate clamped: only possible when all entries tie near theta
        let n = out.len();
        out.iter_mut().for_each(|x| *x = 1.0 / n as f64);
    } else if sum != 1.0 {
        out.iter_mut().for_each(|x| *x /= sum);
    }
    Ok(SimplexWeights(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn weights_validate() {
        assert!(SimplexWeights::new(vec![0.5, 0.5]).is_ok());
        assert!(SimplexWeights::new(vec![0.5, 0.6]).is_err());
        assert!(SimplexWeights::new(vec![1.1, -0.1]).is_err());
        assert!(SimplexWeights::new(vec![f64::NAN]).is_err());
        assert!(SimplexWeights::new(vec![]).is_err());
        let w = SimplexWeights::new(vec![1.0 + 1e-13, -1e-13]).unwrap();
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn fuse_single_source_is_identity() {
        let f = m(&[vec![1.0, 2.0], vec![3.0, -4.0]]);
        let out = fuse_features(&[f.clone()], &SimplexWeights::uniform(1)).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn fuse_identical_sources() {
        let f = m(&[vec![0.25, 2.0], vec![3.0, -4.0]]);
        let alpha = SimplexWeights::new(vec![0.2, 0.3, 0.5]).unwrap();
        let out = fuse_features(&[f.clone(), f.clone(), f.clone()], &alpha).unwrap();
        assert!(out.max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn fuse_forced_arithmetic() {
        let alpha = SimplexWeights::new(vec![0.3, 0.7]).unwrap();
        let out = fuse_features(&[m(&[vec![1.0, 0.0]]), m(&[vec![0.0, 1.0]])], &alpha).unwrap();
        assert_eq!(out.row(0), &[0.3, 0.7]);
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let alpha = SimplexWeights::uniform(2);
        assert!(fuse_features(&[m(&[vec![1.0, 0.0]]), m(&[vec![0.0]])], &alpha).is_err());
        assert!(fuse_features(&[m(&[vec![1.0]])], &alpha).is_err());
    }

    #[test]
    fn target_prompt_at_vertex_copies_source() {
        let prompts: Vec<PromptTensor> = (0..3)
            .map(|i| {
                PromptTensor::new(
                    Matrix::from_fn(2, 3, |r, c| (i * 7 + r * 3 + c) as f64 * -0.37),
                    PromptRole::Source(i),
                )
                .unwrap()
            })
            .collect();
        for i in 0..3 {
            let t = build_target_prompt(&prompts, &SimplexWeights::vertex(3, i)).unwrap();
            assert_eq!(t.role, PromptRole::Target);
            let same = t
                .tokens
                .data()
                .iter()
                .zip(prompts[i].tokens.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn target_prompt_uniform_is_mean() {
        let prompts: Vec<PromptTensor> = (0..3)
            .map(|i| {
                PromptTensor::new(
                    Matrix::from_fn(2, 2, |r, c| ((i + 1) * (r + 2) * (c + 3)) as f64 / 7.0),
                    PromptRole::Source(i),
                )
                .unwrap()
            })
            .collect();
        let t = build_target_prompt(&prompts, &SimplexWeights::uniform(3)).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                let mean = prompts.iter().map(|p| p.tokens[(r, c)]).sum::<f64>() / 3.0;
                assert!((t.tokens[(r, c)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let on = project_to_simplex(&[0.2, 0.3, 0.5]).unwrap();
        assert!(on.max_abs_diff(&SimplexWeights::new(vec![0.2, 0.3, 0.5]).unwrap()) < 1e-12);
        assert_eq!(project_to_simplex(&[0.6, 0.6]).unwrap().as_slice(), &[0.5, 0.5]);
        assert_eq!(project_to_simplex(&[1.2, -0.2]).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(project_to_simplex(&[-3.0]).unwrap().as_slice(), &[1.0]);
        assert!(project_to_simplex(&[f64::INFINITY, 0.0]).is_err());
        assert!(project_to_simplex(&[]).is_err());
    }

    #[test]
    fn projection_matches_grid_minimizer() {
        // brute force over a 1e-4 grid of the 1-simplex
        for v in [[1.2, -0.2], [0.3, 0.1], [-0.4, 2.0], [0.55, 0.75]] {
            let mut best = (f64::INFINITY, 0.0);
            for k in 0..=10_000 {
                let x = k as f64 / 10_000.0;
                let d = (x - v[0]).powi(2) + (1.0 - x - v[1]).powi(2);
                if d < best.0 {
                    best = (d, x);
                }
            }
            let p = project_to_simplex(&v).unwrap();
            assert!((p[0] - best.1).abs() <= 1e-4, "{v:?}: {p:?} vs {}", best.1);
        }
    }
}
