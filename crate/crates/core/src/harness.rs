//! A small, fully differentiable prompted encoder and Gaussian-cluster tasks,
//! enough to run the whole pipeline end to end: train source prompts, export
//! a bundle, optimize the weights and score the fused target prompt.
//!
//! The encoder is `tanh(W_b · [x ⊙ σ(W_g·vec P); vec P])` followed by a softmax
//! head. Every weight is frozen; only the prompt `P` is trained. The gate lets
//! a prompt choose which input coordinates reach the backbone.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::alignment::PromptGradient;
use crate::bundle::PromptBundle;
use crate::ensemble::{build_target_prompt, PromptRole, PromptTensor, SimplexWeights};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::{cholesky, cholesky_solve, Matrix};
use crate::optimizer::{optimize_weights, OptimizationTrace, OptimizerConfig};

/// Samples drawn per task when training a source prompt or building a bundle.
pub const DEFAULT_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub prompt_rows: usize,
    pub prompt_cols: usize,
    pub feature: usize,
    pub classes: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            input: 16,
            prompt_rows: 4,
            prompt_cols: 8,
            feature: 12,
            classes: 4,
        }
    }
}

impl EncoderDims {
    pub fn prompt_len(&self) -> usize {
        self.prompt_rows * self.prompt_cols
    }
}

/// A frozen encoder and classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyEncoder {
    dims: EncoderDims,
    /// `h × (d_in + p·d)`: input columns first, then prompt columns.
    backbone: Matrix,
    /// `d_in × p·d`.
    gate: Matrix,
    head: Matrix,
    head_bias: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ToyEncoder {
    /// Seeded standard-normal weights; backbone and head scaled by `1/√fan-in`.
    pub fn random(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fan_in = (dims.input + dims.prompt_len()) as f64;
        let backbone = Matrix::from_fn(dims.feature, dims.input + dims.prompt_len(), |_, _| {
            gaussian(&mut rng) / fan_in.sqrt()
        });
        let gate = Matrix::from_fn(dims.input, dims.prompt_len(), |_, _| gaussian(&mut rng));
        let head = Matrix::from_fn(dims.classes, dims.feature, |_, _| {
            gaussian(&mut rng) / (dims.feature as f64).sqrt()
        });
        ToyEncoder {
            dims,
            backbone,
            gate,
            head,
            head_bias: vec![0.0; dims.classes],
        }
    }

    pub fn from_parts(backbone: Matrix, gate: Matrix, head: Matrix, head_bias: Vec<f64>) -> Result<Self> {
        let (h, cols) = backbone.shape();
        let (input, prompt_len) = gate.shape();
        if cols != input + prompt_len {
            return Err(Error::mismatch("backbone columns", input + prompt_len, cols));
        }
        if head.cols() != h {
            return Err(Error::mismatch("head columns", h, head.cols()));
        }
        if head_bias.len() != head.rows() {
            return Err(Error::mismatch("head bias", head.rows(), head_bias.len()));
        }
        if let Some(v) = head_bias.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(format!("non-finite head bias {v}")));
        }
        Ok(ToyEncoder {
            dims: EncoderDims {
                input,
                prompt_rows: 1,
                prompt_cols: prompt_len,
                feature: h,
                classes: head.rows(),
            },
            backbone,
            gate,
            head,
            head_bias,
        })
    }

    /// Declares the prompt as `rows × cols` instead of a single row.
    pub fn with_prompt_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.dims.prompt_len() {
            return Err(Error::mismatch("prompt size", self.dims.prompt_len(), rows * cols));
        }
        self.dims.prompt_rows = rows;
        self.dims.prompt_cols = cols;
        Ok(self)
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn backbone(&self) -> &Matrix {
        &self.backbone
    }

    pub fn head(&self) -> &Matrix {
        &self.head
    }

    fn check_prompt(&self, prompt: &Matrix) -> Result<()> {
        let want = (self.dims.prompt_rows, self.dims.prompt_cols);
        if prompt.shape() != want {
            return Err(Error::mismatch("prompt shape", format!("{want:?}"), format!("{:?}", prompt.shape())));
        }
        Ok(())
    }

    fn gates(&self, prompt: &Matrix) -> Vec<f64> {
        self.gate
            .matvec(prompt.data())
            .expect("gate columns match prompt size")
            .into_iter()
            .map(sigmoid)
            .collect()
    }

    /// The prompt's contribution to every pre-activation, `W_p · vec P`.
    fn prompt_drive(&self, prompt: &Matrix) -> Vec<f64> {
        let d_in = self.dims.input;
        (0..self.dims.feature)
            .map(|k| {
                let row = &self.backbone.row(k)[d_in..];
                row.iter().zip(prompt.data()).map(|(w, v)| w * v).sum()
            })
            .collect()
    }

    fn features_with(&self, gates: &[f64], drive: &[f64], x: &[f64]) -> Vec<f64> {
        let d_in = self.dims.input;
        (0..self.dims.feature)
            .map(|k| {
                let row = &self.backbone.row(k)[..d_in];
                let z: f64 = drive[k] + row.iter().zip(x).zip(gates).map(|((w, x), s)| w * x * s).sum::<f64>();
                z.tanh()
            })
            .collect()
    }

    fn logits(&self, feature: &[f64]) -> Vec<f64> {
        (0..self.dims.classes)
            .map(|c| self.head_bias[c] + self.head.row(c).iter().zip(feature).map(|(w, f)| w * f).sum::<f64>())
            .collect()
    }
}

pub fn encode(enc: &ToyEncoder, prompt: &PromptTensor, x: &[f64]) -> Result<Vec<f64>> {
    enc.check_prompt(&prompt.tokens)?;
    if x.len() != enc.dims.input {
        return Err(Error::mismatch("input length", enc.dims.input, x.len()));
    }
    Ok(enc.features_with(&enc.gates(&prompt.tokens), &enc.prompt_drive(&prompt.tokens), x))
}

/// Features of every row of `inputs`, as an `n×h` matrix.
pub fn encode_batch(enc: &ToyEncoder, prompt: &PromptTensor, inputs: &Matrix) -> Result<Matrix> {
    enc.check_prompt(&prompt.tokens)?;
    if inputs.cols() != enc.dims.input {
        return Err(Error::mismatch("input length", enc.dims.input, inputs.cols()));
    }
    let gates = enc.gates(&prompt.tokens);
    let drive = enc.prompt_drive(&prompt.tokens);
    let mut data = Vec::with_capacity(inputs.rows() * enc.dims.feature);
    for r in 0..inputs.rows() {
        data.extend(enc.features_with(&gates, &drive, inputs.row(r)));
    }
    Matrix::new(inputs.rows(), enc.dims.feature, data)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Class probabilities `softmax(W_c·f + b_c)`.
pub fn classify(enc: &ToyEncoder, feature: &[f64]) -> Result<Vec<f64>> {
    if feature.len() != enc.dims.feature {
        return Err(Error::mismatch("feature length", enc.dims.feature, feature.len()));
    }
    Ok(softmax(&enc.logits(feature)))
}

/// Inputs with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InsufficientSamples { needed: 1, got: 0 });
        }
        if labels.len() != inputs.rows() {
            return Err(Error::mismatch("label count", inputs.rows(), labels.len()));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_batch(enc: &ToyEncoder, batch: &Batch) -> Result<()> {
    if batch.inputs.cols() != enc.dims.input {
        return Err(Error::mismatch("input length", enc.dims.input, batch.inputs.cols()));
    }
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= enc.dims.classes) {
        return Err(Error::InvalidLabels(format!("label {y} not below {}", enc.dims.classes)));
    }
    Ok(())
}

/// Mean cross-entropy of the batch.
pub fn cross_entropy(enc: &ToyEncoder, prompt: &Matrix, batch: &Batch) -> Result<f64> {
    enc.check_prompt(prompt)?;
    check_batch(enc, batch)?;
    let gates = enc.gates(prompt);
    let drive = enc.prompt_drive(prompt);
    let mut total = 0.0;
    for (r, &y) in batch.labels.iter().enumerate() {
        let logits = enc.logits(&enc.features_with(&gates, &drive, batch.inputs.row(r)));
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - logits[y];
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the prompt entries.
pub fn loss_and_prompt_gradient(enc: &ToyEncoder, prompt: &Matrix, batch: &Batch) -> Result<(f64, Matrix)> {
    enc.check_prompt(prompt)?;
    check_batch(enc, batch)?;
    let EncoderDims { input, feature, .. } = enc.dims;
    let plen = enc.dims.prompt_len();
    let n = batch.len() as f64;
    let gates = enc.gates(prompt);
    let drive = enc.prompt_drive(prompt);

    let mut loss = 0.0;
    // summed over the batch: ∂/∂z and ∂/∂(gate) contributions
    let mut dz_sum = vec![0.0; feature];
    let mut dgate = vec![0.0; input];
    for (r, &y) in batch.labels.iter().enumerate() {
        let x = batch.inputs.row(r);
        let f = enc.features_with(&gates, &drive, x);
        let logits = enc.logits(&f);
        let probs = softmax(&logits);
        loss -= probs[y].ln();
        let dlogit: Vec<f64> = (0..probs.len())
            .map(|c| (probs[c] - if c == y { 1.0 } else { 0.0 }) / n)
            .collect();
        for k in 0..feature {
            let df: f64 = (0..dlogit.len()).map(|c| enc.head[(c, k)] * dlogit[c]).sum();
            let dz = df * (1.0 - f[k] * f[k]);
            dz_sum[k] += dz;
            let row = &enc.backbone.row(k)[..input];
            for j in 0..input {
                dgate[j] += dz * row[j] * x[j];
            }
        }
    }

    let mut grad = vec![0.0; plen];
    for (k, dz) in dz_sum.iter().enumerate() {
        for (g, w) in grad.iter_mut().zip(&enc.backbone.row(k)[input..]) {
            *g += w * dz;
        }
    }
    for j in 0..input {
        let dpre = dgate[j] * gates[j] * (1.0 - gates[j]);
        for (g, w) in grad.iter_mut().zip(enc.gate.row(j)) {
            *g += w * dpre;
        }
    }
    let grad = Matrix::new(enc.dims.prompt_rows, enc.dims.prompt_cols, grad)?;
    Ok((loss / n, grad))
}

/// Gradient of the batch-mean cross-entropy with respect to one source prompt.
pub fn prompt_gradient(enc: &ToyEncoder, prompt: &PromptTensor, batch: &Batch) -> Result<PromptGradient> {
    let (_, g) = loss_and_prompt_gradient(enc, &prompt.tokens, batch)?;
    let id = match prompt.role {
        PromptRole::Source(i) => i,
        PromptRole::Target => 0,
    };
    PromptGradient::new(id, g)
}

pub fn accuracy(enc: &ToyEncoder, prompt: &PromptTensor, batch: &Batch) -> Result<f64> {
    check_batch(enc, batch)?;
    let feats = encode_batch(enc, prompt, &batch.inputs)?;
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let logits = enc.logits(feats.row(r));
            let best = (0..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
            best == y
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Gaussian class clusters in input space. Class means live on `signal_dims`;
/// every other coordinate is label-independent noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub id: usize,
    pub class_means: Matrix,
    pub within_std: f64,
    pub nuisance_std: f64,
    pub signal_dims: Vec<usize>,
}

impl SyntheticTask {
    pub fn new(id: usize, class_means: Matrix, within_std: f64, nuisance_std: f64, signal_dims: Vec<usize>) -> Result<Self> {
        let (c, d_in) = class_means.shape();
        if c < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {c}")));
        }
        if !(within_std > 0.0 && nuisance_std > 0.0) {
            return Err(Error::InvalidConfig("standard deviations must be positive".into()));
        }
        if let Some(&s) = signal_dims.iter().find(|&&s| s >= d_in) {
            return Err(Error::InvalidConfig(format!("signal dimension {s} out of range")));
        }
        for a in 0..c {
            for b in a + 1..c {
                if class_means.row(a) == class_means.row(b) {
                    return Err(Error::InvalidConfig(format!("classes {a} and {b} share a mean")));
                }
            }
        }
        Ok(SyntheticTask {
            id,
            class_means,
            within_std,
            nuisance_std,
            signal_dims,
        })
    }

    /// Class means on `signal_dims` chosen so that the encoder, with that
    /// subspace open, pushes class `y` toward head unit `y`. Means are the
    /// least-squares solutions of `W_x[:,S] m ≈ w_y − w̄`, scaled to length
    /// `separation`.
    pub fn anchored(
        enc: &ToyEncoder,
        id: usize,
        signal_dims: Vec<usize>,
        separation: f64,
        within_std: f64,
        nuisance_std: f64,
    ) -> Result<Self> {
        let EncoderDims { input, feature, classes, .. } = enc.dims;
        if signal_dims.is_empty() {
            return Err(Error::InvalidConfig("no signal dimensions".into()));
        }
        if let Some(&s) = signal_dims.iter().find(|&&s| s >= input) {
            return Err(Error::InvalidConfig(format!("signal dimension {s} out of range")));
        }
        let a = Matrix::from_fn(feature, signal_dims.len(), |k, j| enc.backbone[(k, signal_dims[j])]);
        let normal = a.transpose().matmul(&a)?;
        let chol = cholesky(&normal, 1e-12 * normal.trace())?;
        let mut means = Matrix::zeros(classes, input);
        for y in 0..classes {
            let target: Vec<f64> = (0..feature)
                .map(|k| enc.head[(y, k)] - (0..classes).map(|c| enc.head[(c, k)]).sum::<f64>() / classes as f64)
                .collect();
            let rhs = a.transpose().matvec(&target)?;
            let m = cholesky_solve(&chol, &rhs);
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, &s) in signal_dims.iter().enumerate() {
                means[(y, s)] = separation * m[j] / norm;
            }
        }
        SyntheticTask::new(id, means, within_std, nuisance_std, signal_dims)
    }

    /// A related task: the same means with Gaussian jitter on the signal dims.
    pub fn jittered(&self, id: usize, jitter: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = self.class_means.clone();
        for y in 0..means.rows() {
            for &s in &self.signal_dims {
                means[(y, s)] += jitter * gaussian(&mut rng);
            }
        }
        SyntheticTask::new(id, means, self.within_std, self.nuisance_std, self.signal_dims.clone())
    }

    pub fn class_count(&self) -> usize {
        self.class_means.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.class_means.cols()
    }

    /// `n` draws with balanced labels `i mod C`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Batch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = self.input_dim();
        let mut std = vec![self.nuisance_std; d_in];
        for &s in &self.signal_dims {
            std[s] = self.within_std;
        }
        let labels: Vec<usize> = (0..n).map(|i| i % self.class_count()).collect();
        let inputs = Matrix::from_fn(n, d_in, |r, j| self.class_means[(labels[r], j)] + std[j] * gaussian(&mut rng));
        Batch::new(inputs, labels)
    }
}

/// Prompt tuning with the encoder frozen: full-batch gradient descent on the
/// cross-entropy of `DEFAULT_SAMPLES` draws. A step that would raise the loss
/// is halved, up to 20 times, and skipped if it still does.
pub fn train_source_prompt(enc: &ToyEncoder, task: &SyntheticTask, epochs: usize, lr: f64, seed: u64) -> Result<PromptTensor> {
    train_source_prompt_as(enc, task, epochs, lr, seed, 0)
}

pub fn train_source_prompt_as(
    enc: &ToyEncoder,
    task: &SyntheticTask,
    epochs: usize,
    lr: f64,
    seed: u64,
    source_id: usize,
) -> Result<PromptTensor> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }
    let batch = task.sample(DEFAULT_SAMPLES, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, 1));
    let mut prompt = Matrix::from_fn(enc.dims.prompt_rows, enc.dims.prompt_cols, |_, _| 0.1 * gaussian(&mut rng));
    let (mut loss, mut grad) = loss_and_prompt_gradient(enc, &prompt, &batch)?;
    for _ in 0..epochs {
        let mut step = lr;
        for _ in 0..=20 {
            let mut candidate = prompt.clone();
            candidate.add_scaled(-step, &grad);
            let (l, g) = loss_and_prompt_gradient(enc, &candidate, &batch)?;
            if l <= loss {
                prompt = candidate;
                loss = l;
                grad = g;
                break;
            }
            step *= 0.5;
        }
    }
    PromptTensor::new(prompt, PromptRole::Source(source_id))
}

/// Encodes `n_samples` target draws with every source prompt and packages the
/// features, gradients and prompts.
pub fn make_bundle(
    enc: &ToyEncoder,
    source_prompts: &[PromptTensor],
    target: &SyntheticTask,
    n_samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<PromptBundle> {
    let batch = target.sample(n_samples, seed)?;
    let per_source = exec.map(source_prompts.len(), |i| -> Result<(Matrix, Matrix)> {
        let feats = encode_batch(enc, &source_prompts[i], &batch.inputs)?;
        let (_, grad) = loss_and_prompt_gradient(enc, &source_prompts[i].tokens, &batch)?;
        Ok((feats, grad))
    });
    let mut features = Vec::new();
    let mut gradients = Vec::new();
    for r in per_source {
        let (f, g) = r?;
        features.push(f);
        gradients.push(g);
    }
    Ok(PromptBundle {
        labels: batch.labels.iter().map(|&y| y as i64).collect(),
        class_count: target.class_count(),
        features,
        gradients,
        prompts: Some(source_prompts.iter().map(|p| p.tokens.clone()).collect()),
        provenance: format!("synthetic target {}", target.id),
        seed: Some(seed),
    })
}

/// Accuracy of `classify ∘ encode` on `n_eval` fresh draws.
pub fn evaluate_target_prompt(enc: &ToyEncoder, prompt: &PromptTensor, task: &SyntheticTask, n_eval: usize, seed: u64) -> Result<f64> {
    if n_eval == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    accuracy(enc, prompt, &task.sample(n_eval, seed)?)
}

/// Independent stream `stream` derived from `seed`.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Every source shares the target's signal subspace.
    Related,
    /// No source sees the target's signal subspace.
    Unrelated,
    /// Source 0 shares the target's subspace; the others do not.
    OneInformative,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Preset> {
        match s {
            "related" => Some(Preset::Related),
            "unrelated" => Some(Preset::Unrelated),
            "one-informative" => Some(Preset::OneInformative),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Related => "related",
            Preset::Unrelated => "unrelated",
            Preset::OneInformative => "one-informative",
        }
    }
}

/// Knobs of a preset scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub dims: EncoderDims,
    pub sources: usize,
    pub samples: usize,
    /// Input coordinates carrying the target's class signal.
    pub target_signal: usize,
    pub separation: f64,
    pub within_std: f64,
    pub nuisance_std: f64,
    pub jitter: f64,
    pub train_epochs: usize,
    pub train_lr: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            dims: EncoderDims::default(),
            sources: 3,
            samples: DEFAULT_SAMPLES,
            target_signal: 4,
            separation: 5.0,
            within_std: 1.0,
            nuisance_std: 8.0,
            jitter: 0.3,
            train_epochs: 200,
            train_lr: 5.0,
        }
    }
}

/// Everything generated for one preset and seed.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub preset: Preset,
    pub seed: u64,
    pub encoder: ToyEncoder,
    pub sources: Vec<SyntheticTask>,
    pub target: SyntheticTask,
    pub prompts: Vec<PromptTensor>,
    pub bundle: PromptBundle,
}

/// Splits `dims` into `parts` contiguous, nearly equal chunks.
fn partition(dims: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = dims.len() / parts;
    let extra = dims.len() % parts;
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..parts {
        let len = base + usize::from(i < extra);
        out.push(dims[start..start + len].to_vec());
        start += len;
    }
    out
}

impl Scenario {
    pub fn build(preset: Preset, seed: u64, cfg: &ScenarioConfig, exec: Exec) -> Result<Scenario> {
        let m = cfg.sources;
        let d_in = cfg.dims.input;
        if m == 0 {
            return Err(Error::InvalidConfig("need at least one source".into()));
        }
        if cfg.target_signal == 0 || cfg.target_signal >= d_in {
            return Err(Error::InvalidConfig("target signal must leave some nuisance dimensions".into()));
        }
        let signal: Vec<usize> = (0..cfg.target_signal).collect();
        let nuisance: Vec<usize> = (cfg.target_signal..d_in).collect();
        let unrelated = match preset {
            Preset::Related => 0,
            Preset::Unrelated => m,
            Preset::OneInformative => m - 1,
        };
        if unrelated > nuisance.len() {
            return Err(Error::InvalidConfig(format!(
                "{unrelated} unrelated sources need as many nuisance dimensions, have {}",
                nuisance.len()
            )));
        }

        let encoder = ToyEncoder::random(cfg.dims, sub_seed(seed, 0));
        let anchor = |id, dims: Vec<usize>| {
            SyntheticTask::anchored(&encoder, id, dims, cfg.separation, cfg.within_std, cfg.nuisance_std)
        };
        let base = anchor(0, signal)?;
        let target = base.jittered(m, cfg.jitter, sub_seed(seed, 1))?;

        let chunks = if unrelated > 0 { partition(&nuisance, unrelated) } else { Vec::new() };
        let mut sources = Vec::with_capacity(m);
        for i in 0..m {
            let related = match preset {
                Preset::Related => true,
                Preset::Unrelated => false,
                Preset::OneInformative => i == 0,
            };
            let task = if !related {
                let k = if preset == Preset::OneInformative { i - 1 } else { i };
                anchor(i, chunks[k].clone())?
            } else if i == 0 && preset == Preset::OneInformative {
                SyntheticTask { id: i, ..base.clone() }
            } else {
                base.jittered(i, cfg.jitter, sub_seed(seed, 10 + i as u64))?
            };
            sources.push(task);
        }

        let trained = exec.map(m, |i| {
            train_source_prompt_as(&encoder, &sources[i], cfg.train_epochs, cfg.train_lr, sub_seed(seed, 100 + i as u64), i)
        });
        let prompts = trained.into_iter().collect::<Result<Vec<_>>>()?;
        let mut bundle = make_bundle(&encoder, &prompts, &target, cfg.samples, sub_seed(seed, 2), exec)?;
        bundle.provenance = format!("synth preset={} seed={seed}", preset.name());
        bundle.seed = Some(seed);
        Ok(Scenario {
            preset,
            seed,
            encoder,
            sources,
            target,
            prompts,
            bundle,
        })
    }

    /// Target-task accuracy of the prompt fused with `alpha`.
    pub fn accuracy_at(&self, alpha: &SimplexWeights, n_eval: usize) -> Result<f64> {
        let prompt = build_target_prompt(&self.prompts, alpha)?;
        evaluate_target_prompt(&self.encoder, &prompt, &self.target, n_eval, sub_seed(self.seed, 3))
    }

    pub fn optimize(&self, cfg: &OptimizerConfig) -> Result<OptimizationTrace> {
        optimize_weights(&self.bundle, cfg)
    }
}
