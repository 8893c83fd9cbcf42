//! Projected gradient descent on `L(α) = −H(α) + λ·L_align(α)` over the simplex.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::alignment::{AlignmentGram, NormMode, NormalizedGradientSet, DEFAULT_DEGENERACY_FLOOR};
use crate::bundle::PromptBundle;
use crate::ensemble::{project_to_simplex, SimplexWeights};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::transferability::{auto_ridge, h_score_with_gradient, CrossCovarianceCache};

/// Step halvings tried before an epoch gives up on moving.
pub const MAX_HALVINGS: usize = 20;

/// Final losses this close (relative) count as tied; the lowest restart wins.
pub const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `1e-4·tr(Σ_t)/h` of the uniformly fused features, fixed for the whole run.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub ridge: Ridge,
    pub restarts: usize,
    pub seed: u64,
    pub degeneracy_floor: f64,
    pub convergence_tol: f64,
    pub exec: Exec,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            lambda: 1.0,
            epochs: 200,
            ridge: Ridge::Auto,
            restarts: 5,
            seed: 0,
            degeneracy_floor: DEFAULT_DEGENERACY_FLOOR,
            convergence_tol: 1e-7,
            exec: Exec::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be at least 1".into());
        }
        if let Ridge::Fixed(r) = self.ridge {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("ridge must be nonnegative, got {r}"));
            }
        }
        if !(self.degeneracy_floor > 0.0) || !(self.convergence_tol >= 0.0) {
            return bad("floor must be positive and tolerance nonnegative".into());
        }
        Ok(())
    }
}

/// The two loss terms of a bundle, precomputed for repeated evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    cache: CrossCovarianceCache,
    gram: AlignmentGram,
    ridge: f64,
    lambda: f64,
    floor: f64,
}

/// One evaluation of the objective and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    pub h_score: f64,
    pub alignment: f64,
    pub total: f64,
}

impl Objective {
    pub fn new(cache: CrossCovarianceCache, set: &NormalizedGradientSet, cfg: &OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        if cache.source_count() != set.len() {
            return Err(Error::mismatch("gradient count", cache.source_count(), set.len()));
        }
        let ridge = match cfg.ridge {
            Ridge::Auto => auto_ridge(&cache),
            Ridge::Fixed(r) => r,
        };
        Ok(Objective {
            gram: AlignmentGram::new(set),
            cache,
            ridge,
            lambda: cfg.lambda,
            floor: cfg.degeneracy_floor,
        })
    }

    pub fn from_bundle(bundle: &PromptBundle, cfg: &OptimizerConfig) -> Result<Self> {
        let cache = CrossCovarianceCache::build_with(&bundle.labeled_features()?, cfg.exec)?;
        let set = bundle.gradient_set(cfg.degeneracy_floor)?;
        Objective::new(cache, &set, cfg)
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn source_count(&self) -> usize {
        self.cache.source_count()
    }

    pub fn cache(&self) -> &CrossCovarianceCache {
        &self.cache
    }

    /// Same terms with a different trade-off weight.
    pub fn with_lambda(&self, lambda: f64) -> Objective {
        Objective {
            lambda,
            ..self.clone()
        }
    }

    pub fn evaluate(&self, alpha: &[f64]) -> Result<(LossTerms, Vec<f64>)> {
        let (h, h_grad) = h_score_with_gradient(&self.cache, alpha, self.ridge)?;
        let (align, align_grad) = self.gram.loss_and_gradient(alpha, self.floor, NormMode::Guarded)?;
        let total = -h + self.lambda * align;
        let grad = h_grad
            .iter()
            .zip(&align_grad)
            .map(|(gh, ga)| -gh + self.lambda * ga)
            .collect();
        Ok((
            LossTerms {
                h_score: h,
                alignment: align,
                total,
            },
            grad,
        ))
    }

    pub fn loss(&self, alpha: &[f64]) -> Result<LossTerms> {
        self.evaluate(alpha).map(|(t, _)| t)
    }
}

/// `−H(α) + λ·L_align(α)`.
pub fn total_loss(cache: &CrossCovarianceCache, set: &NormalizedGradientSet, alpha: &[f64], cfg: &OptimizerConfig) -> Result<f64> {
    Objective::new(cache.clone(), set, cfg)?.loss(alpha).map(|t| t.total)
}

/// `−∇H(α) + λ·∇L_align(α)`.
pub fn total_loss_gradient(
    cache: &CrossCovarianceCache,
    set: &NormalizedGradientSet,
    alpha: &[f64],
    cfg: &OptimizerConfig,
) -> Result<Vec<f64>> {
    Objective::new(cache.clone(), set, cfg)?.evaluate(alpha).map(|(_, g)| g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: SimplexWeights,
    pub h_score: f64,
    pub alignment: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxEpochs,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxEpochs => "max-epochs",
        }
    }
}

/// Epoch-by-epoch history of one restart. Epoch 0 is the initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartTrace {
    pub restart: usize,
    pub records: Vec<EpochRecord>,
    pub termination: Termination,
}

impl RestartTrace {
    pub fn last(&self) -> &EpochRecord {
        self.records.last().expect("a trace always holds its initial record")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub lambda: f64,
    pub ridge: f64,
    pub chosen: usize,
    /// Every restart, in index order; failed restarts are absent.
    pub restarts: Vec<RestartTrace>,
    pub failed_restarts: Vec<usize>,
}

impl OptimizationTrace {
    pub fn best(&self) -> &RestartTrace {
        self.restarts
            .iter()
            .find(|r| r.restart == self.chosen)
            .expect("chosen restart is recorded")
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.best().records
    }

    pub fn final_alpha(&self) -> &SimplexWeights {
        &self.best().last().alpha
    }

    pub fn final_loss(&self) -> f64 {
        self.best().last().loss
    }

    pub fn termination(&self) -> Termination {
        self.best().termination
    }
}

/// Starting point of a restart: uniform for restart 0, Dirichlet(1) otherwise.
pub fn initial_weights(m: usize, seed: u64, restart: usize) -> SimplexWeights {
    if restart == 0 {
        return SimplexWeights::uniform(m);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    let draws: Vec<f64> = (0..m).map(|_| Exp1.sample(&mut rng)).collect();
    let sum: f64 = draws.iter().sum();
    project_to_simplex(&draws.iter().map(|x| x / sum).collect::<Vec<_>>()).expect("finite draws")
}

/// Runs one restart from `start`.
pub fn descend(obj: &Objective, start: SimplexWeights, cfg: &OptimizerConfig, restart: usize) -> Result<RestartTrace> {
    let (mut terms, mut grad) = obj.evaluate(&start)?;
    let mut alpha = start;
    let record = |epoch, alpha: &SimplexWeights, t: &LossTerms| EpochRecord {
        epoch,
        alpha: alpha.clone(),
        h_score: t.h_score,
        alignment: t.alignment,
        loss: t.total,
    };
    let mut records = vec![record(0, &alpha, &terms)];
    let mut termination = Termination::MaxEpochs;
    for epoch in 1..=cfg.epochs {
        let mut step = cfg.learning_rate;
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let moved: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
            let candidate = project_to_simplex(&moved)?;
            match obj.evaluate(&candidate) {
                Ok((t, g)) if t.total <= terms.total => {
                    accepted = Some((candidate, t, g));
                    break;
                }
                // an ill-conditioned or worse candidate: try a shorter step
                Ok(_) | Err(_) => step *= 0.5,
            }
        }
        let change = match accepted {
            Some((candidate, t, g)) => {
                let change = candidate.max_abs_diff(&alpha);
                alpha = candidate;
                terms = t;
                grad = g;
                change
            }
            None => 0.0,
        };
        records.push(record(epoch, &alpha, &terms));
        if change <= cfg.convergence_tol {
            termination = Termination::Converged;
            break;
        }
    }
    Ok(RestartTrace {
        restart,
        records,
        termination,
    })
}

pub fn optimize_objective(obj: &Objective, cfg: &OptimizerConfig) -> Result<OptimizationTrace> {
    cfg.validate()?;
    let m = obj.source_count();
    let outcomes = cfg.exec.map(cfg.restarts, |r| {
        descend(obj, initial_weights(m, cfg.seed, r), cfg, r)
    });
    let mut restarts = Vec::new();
    let mut failed = Vec::new();
    let mut last_err = None;
    for (r, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(t) => restarts.push(t),
            Err(e) => {
                failed.push(r);
                last_err = Some(e);
            }
        }
    }
    let best = restarts.iter().map(|t| t.last().loss).fold(f64::INFINITY, f64::min);
    let tie = TIE_TOL * best.abs().max(1.0);
    let Some(chosen) = restarts.iter().find(|t| t.last().loss <= best + tie).map(|t| t.restart) else {
        return Err(Error::AllRestartsFailed {
            restarts: cfg.restarts,
            last: Box::new(last_err.expect("at least one restart ran")),
        });
    };
    Ok(OptimizationTrace {
        lambda: obj.lambda(),
        ridge: obj.ridge(),
        chosen,
        restarts,
        failed_restarts: failed,
    })
}

pub fn optimize_weights(bundle: &PromptBundle, cfg: &OptimizerConfig) -> Result<OptimizationTrace> {
    optimize_objective(&Objective::from_bundle(bundle, cfg)?, cfg)
}

/// One independent optimization per `λ`, in input order. A failing entry does
/// not stop the others.
pub fn sweep_lambda(bundle: &PromptBundle, cfg: &OptimizerConfig, lambdas: &[f64]) -> Result<Vec<(f64, Result<OptimizationTrace>)>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidConfig("empty lambda list".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidConfig(format!("lambda must be nonnegative, got {l}")));
    }
    let base = Objective::from_bundle(bundle, cfg)?;
    // restarts inside an entry run sequentially; entries are the parallel unit
    let inner = OptimizerConfig {
        exec: Exec::Sequential,
        ..cfg.clone()
    };
    let traces = cfg.exec.map(lambdas.len(), |i| {
        let entry_cfg = OptimizerConfig {
            lambda: lambdas[i],
            ..inner.clone()
        };
        optimize_objective(&base.with_lambda(lambdas[i]), &entry_cfg)
    });
    Ok(lambdas.iter().copied().zip(traces).collect())
}
