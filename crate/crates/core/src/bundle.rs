//! HGPB v1: a single-file, little-endian container holding everything the
//! weight optimizer consumes.
//!
//! ```text
//! "HGPB" | u32 version | u32 manifest_len | manifest (key=value lines)
//! u32 tensor_count, then per tensor:
//!   u16 name_len | name | u8 dtype | u8 ndim | ndim × u64 dims | payload
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = i64. Payloads are row-major and packed.
//! f32 tensors are widened to f64 on read; writers always emit f64.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::alignment::NormalizedGradientSet;
use crate::error::Result;
use crate::linalg::Matrix;
use crate::transferability::LabeledFeatures;

pub const MAGIC: [u8; 4] = *b"HGPB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    I64 = 3,
}

impl Dtype {
    fn from_code(code: u8) -> Option<Dtype> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            3 => Some(Dtype::I64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 | Dtype::I64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Dtype::F32 | Dtype::F64)
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
            Dtype::I64 => "i64",
        })
    }
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic {0:?}, expected \"HGPB\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0} (supported: {VERSION})")]
    UnsupportedVersion(u32),

    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: String,
        expected: u64,
        actual: u64,
    },

    #[error("malformed bundle: {0}")]
    Malformed(String),

    #[error("cannot serialize: {0}")]
    Unserializable(String),

    #[error("{}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

fn join_violations(v: &[Violation]) -> String {
    let lines: Vec<String> = v.iter().map(|x| x.to_string()).collect();
    format!("invalid bundle: {}", lines.join("; "))
}

/// One broken bundle invariant. Violations are data, reported in tensor order.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoSources,
    TooFewSamples(usize),
    TooFewClasses(usize),
    MissingTensor(String),
    UnexpectedTensor(String),
    DuplicateTensor(String),
    WrongDtype {
        tensor: String,
        expected: &'static str,
        actual: Dtype,
    },
    WrongShape {
        tensor: String,
        expected: Vec<u64>,
        actual: Vec<u64>,
    },
    /// Two members of a group (`features`, `gradients`, `prompts`) disagree in shape.
    ShapeMismatch {
        group: &'static str,
        reference: usize,
        reference_shape: (usize, usize),
        source: usize,
        shape: (usize, usize),
    },
    NonFinite {
        tensor: String,
        index: usize,
    },
    LabelOutOfRange {
        index: usize,
        value: i64,
        class_count: usize,
    },
    EmptyClass(usize),
    PromptCount {
        expected: usize,
        actual: usize,
    },
    ManifestMissing(&'static str),
    ManifestMismatch {
        key: &'static str,
        manifest: u64,
        actual: u64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSources => write!(f, "bundle has no sources"),
            Violation::TooFewSamples(n) => write!(f, "labels: need at least 2 samples, got {n}"),
            Violation::TooFewClasses(c) => write!(f, "manifest: need at least 2 classes, got {c}"),
            Violation::MissingTensor(n) => write!(f, "{n}: required tensor missing"),
            Violation::UnexpectedTensor(n) => write!(f, "{n}: unexpected tensor"),
            Violation::DuplicateTensor(n) => write!(f, "{n}: duplicate tensor"),
            Violation::WrongDtype {
                tensor,
                expected,
                actual,
            } => write!(f, "{tensor}: dtype {actual}, expected {expected}"),
            Violation::WrongShape {
                tensor,
                expected,
                actual,
            } => write!(f, "{tensor}: shape {actual:?}, expected {expected:?}"),
            Violation::ShapeMismatch {
                group,
                reference,
                reference_shape,
                source,
                shape,
            } => write!(
                f,
                "{group}/{source}: shape {}x{} differs from {group}/{reference} ({}x{})",
                shape.0, shape.1, reference_shape.0, reference_shape.1
            ),
            Violation::NonFinite { tensor, index } => {
                write!(f, "{tensor}: non-finite value at flat index {index}")
            }
            Violation::LabelOutOfRange {
                index,
                value,
                class_count,
            } => write!(f, "labels: value {value} at index {index} outside 0..{class_count}"),
            Violation::EmptyClass(c) => write!(f, "labels: class {c} has no samples"),
            Violation::PromptCount { expected, actual } => {
                write!(f, "prompts: {actual} present, expected all {expected} or none")
            }
            Violation::ManifestMissing(k) => write!(f, "manifest: key {k} missing"),
            Violation::ManifestMismatch {
                key,
                manifest,
                actual,
            } => write!(f, "manifest: {key}={manifest} but tensors give {actual}"),
        }
    }
}

/// Everything the optimizer needs about one target task and `M` sources.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub labels: Vec<i64>,
    pub class_count: usize,
    /// Per source, `N×h` features of the target samples.
    pub features: Vec<Matrix>,
    /// Per source, raw `p×d` gradient of the target loss.
    pub gradients: Vec<Matrix>,
    /// Per source, the `p×d` prompt itself.
    pub prompts: Option<Vec<Matrix>>,
    pub provenance: String,
    pub seed: Option<u64>,
}

impl PromptBundle {
    pub fn source_count(&self) -> usize {
        self.features.len()
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, |f| f.cols())
    }

    pub fn prompt_shape(&self) -> (usize, usize) {
        self.gradients.first().map_or((0, 0), |g| g.shape())
    }

    pub fn manifest(&self) -> BundleManifest {
        let (p, d) = self.prompt_shape();
        BundleManifest {
            version: VERSION,
            sources: self.source_count(),
            samples: self.sample_count(),
            feature_dim: self.feature_dim(),
            prompt_rows: p,
            prompt_cols: d,
            classes: self.class_count,
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }

    /// Labels as class indices; only meaningful on a valid bundle.
    pub fn class_labels(&self) -> Vec<usize> {
        self.labels.iter().map(|&y| y as usize).collect()
    }

    pub fn labeled_features(&self) -> Result<Vec<LabeledFeatures>> {
        let labels = self.class_labels();
        self.features
            .iter()
            .map(|f| LabeledFeatures::new(f.clone(), labels.clone(), self.class_count))
            .collect()
    }

    pub fn gradient_set(&self, floor: f64) -> Result<NormalizedGradientSet> {
        NormalizedGradientSet::from_matrices(&self.gradients, floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleManifest {
    pub version: u32,
    pub sources: usize,
    pub samples: usize,
    pub feature_dim: usize,
    pub prompt_rows: usize,
    pub prompt_cols: usize,
    pub classes: usize,
    pub provenance: String,
    pub seed: Option<u64>,
}

impl BundleManifest {
    fn to_text(&self) -> String {
        let mut s = format!(
            "M={}\nN={}\nh={}\np={}\nd={}\nC={}\nprovenance={}\n",
            self.sources,
            self.samples,
            self.feature_dim,
            self.prompt_rows,
            self.prompt_cols,
            self.classes,
            self.provenance
        );
        if let Some(seed) = self.seed {
            s.push_str(&format!("seed={seed}\n"));
        }
        s
    }
}

/// Checks every bundle invariant that the types do not already guarantee.
pub fn validate_bundle(b: &PromptBundle) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = b.labels.len();
    if n < 2 {
        out.push(Violation::TooFewSamples(n));
    }
    if b.class_count < 2 {
        out.push(Violation::TooFewClasses(b.class_count));
    }
    let mut counts = vec![0usize; b.class_count];
    for (i, &y) in b.labels.iter().enumerate() {
        if y < 0 || y as u64 >= b.class_count as u64 {
            out.push(Violation::LabelOutOfRange {
                index: i,
                value: y,
                class_count: b.class_count,
            });
        } else {
            counts[y as usize] += 1;
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        if k == 0 {
            out.push(Violation::EmptyClass(c));
        }
    }

    if b.features.is_empty() {
        out.push(Violation::NoSources);
    }
    if let Some(f0) = b.features.first() {
        if f0.rows() != n {
            out.push(Violation::WrongShape {
                tensor: "features/0".into(),
                expected: vec![n as u64, f0.cols() as u64],
                actual: vec![f0.rows() as u64, f0.cols() as u64],
            });
        }
    }
    group_shapes(&mut out, "features", &b.features);

    if b.gradients.len() != b.features.len() {
        for i in b.gradients.len()..b.features.len() {
            out.push(Violation::MissingTensor(format!("gradients/{i}")));
        }
        for i in b.features.len()..b.gradients.len() {
            out.push(Violation::UnexpectedTensor(format!("gradients/{i}")));
        }
    }
    group_shapes(&mut out, "gradients", &b.gradients);

    if let Some(prompts) = &b.prompts {
        if prompts.len() != b.features.len() {
            out.push(Violation::PromptCount {
                expected: b.features.len(),
                actual: prompts.len(),
            });
        }
        if let (Some(g0), Some(p0)) = (b.gradients.first(), prompts.first()) {
            if g0.shape() != p0.shape() {
                out.push(Violation::WrongShape {
                    tensor: "prompts/0".into(),
                    expected: vec![g0.rows() as u64, g0.cols() as u64],
                    actual: vec![p0.rows() as u64, p0.cols() as u64],
                });
            }
        }
        group_shapes(&mut out, "prompts", prompts);
    }
    out
}

fn group_shapes(out: &mut Vec<Violation>, group: &'static str, members: &[Matrix]) {
    let Some(first) = members.first() else { return };
    for (i, m) in members.iter().enumerate().skip(1) {
        if m.shape() != first.shape() {
            out.push(Violation::ShapeMismatch {
                group,
                reference: 0,
                reference_shape: first.shape(),
                source: i,
                shape: m.shape(),
            });
        }
    }
}

/// Float payload width used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

pub fn encode_bundle(b: &PromptBundle) -> Result<Vec<u8>, BundleError> {
    encode_bundle_as(b, FloatWidth::F64)
}

/// Serializes a valid bundle; `F32` narrows every float tensor.
pub fn encode_bundle_as(b: &PromptBundle, width: FloatWidth) -> Result<Vec<u8>, BundleError> {
    let violations = validate_bundle(b);
    if !violations.is_empty() {
        return Err(BundleError::Invalid(violations));
    }
    if b.provenance.contains('\n') {
        return Err(BundleError::Unserializable("provenance contains a newline".into()));
    }
    let manifest = b.manifest().to_text();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(manifest.len(), "manifest")?.to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());

    let prompts = b.prompts.as_deref().unwrap_or(&[]);
    let count = 1 + b.features.len() + b.gradients.len() + prompts.len();
    out.extend_from_slice(&len_u32(count, "tensor count")?.to_le_bytes());

    write_header(&mut out, "labels", Dtype::I64, &[b.labels.len()])?;
    for y in &b.labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    let groups = [("features", &b.features[..]), ("gradients", &b.gradients[..]), ("prompts", prompts)];
    for (group, members) in groups {
        for (i, m) in members.iter().enumerate() {
            let dtype = match width {
                FloatWidth::F32 => Dtype::F32,
                FloatWidth::F64 => Dtype::F64,
            };
            write_header(&mut out, &format!("{group}/{i}"), dtype, &[m.rows(), m.cols()])?;
            for &v in m.data() {
                match width {
                    FloatWidth::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    FloatWidth::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32, BundleError> {
    u32::try_from(n).map_err(|_| BundleError::Unserializable(format!("{what} {n} exceeds u32")))
}

fn write_header(out: &mut Vec<u8>, name: &str, dtype: Dtype, dims: &[usize]) -> Result<(), BundleError> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| BundleError::Unserializable(format!("tensor name {name} too long")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        len_u32(d, &format!("dimension of {name}"))?;
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    Ok(())
}

pub fn write_bundle(b: &PromptBundle, path: impl AsRef<Path>) -> Result<(), BundleError> {
    let bytes = encode_bundle(b)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

enum Payload {
    Float(Vec<f64>),
    Int(Vec<i64>),
}

struct RawTensor {
    name: String,
    dtype: Dtype,
    dims: Vec<u64>,
    payload: Payload,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: u64, section: &str) -> Result<&'a [u8], BundleError> {
        let remaining = (self.bytes.len() - self.pos) as u64;
        if n > remaining {
            return Err(BundleError::Truncated {
                section: section.to_string(),
                expected: n,
                actual: remaining,
            });
        }
        let n = n as usize;
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str) -> Result<u8, BundleError> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &str) -> Result<u16, BundleError> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().unwrap()))
    }

    fn u32(&mut self, section: &str) -> Result<u32, BundleError> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64, BundleError> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>, BundleError> {
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| BundleError::Malformed(format!("manifest line without '=': {line:?}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn read_tensor(cur: &mut Cursor<'_>, index: u32) -> Result<RawTensor, BundleError> {
    let section = format!("header of tensor {index}");
    let name_len = cur.u16(&section)?;
    let name = std::str::from_utf8(cur.take(name_len as u64, &section)?)
        .map_err(|_| BundleError::Malformed(format!("tensor {index} name is not UTF-8")))?
        .to_string();
    let section = format!("header of {name}");
    let code = cur.u8(&section)?;
    let dtype = Dtype::from_code(code)
        .ok_or_else(|| BundleError::Malformed(format!("{name}: unknown dtype code {code}")))?;
    let ndim = cur.u8(&section)?;
    let dims = (0..ndim).map(|_| cur.u64(&section)).collect::<Result<Vec<u64>, _>>()?;
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| BundleError::Malformed(format!("{name}: element count overflows")))?;
    let bytes = count
        .checked_mul(dtype.width() as u64)
        .ok_or_else(|| BundleError::Malformed(format!("{name}: byte count overflows")))?;
    let raw = cur.take(bytes, &format!("payload of {name}"))?;
    let payload = match dtype {
        Dtype::F32 => Payload::Float(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        ),
        Dtype::F64 => Payload::Float(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I64 => Payload::Int(
            raw.chunks_exact(8)
                .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(RawTensor {
        name,
        dtype,
        dims,
        payload,
    })
}

/// Outcome of decoding: the bundle when one could be assembled, plus every
/// violation found. A bundle is usable only when `violations` is empty.
#[derive(Debug)]
pub struct Inspection {
    pub bundle: Option<PromptBundle>,
    pub violations: Vec<Violation>,
}

impl Inspection {
    pub fn into_valid(self) -> Result<PromptBundle, BundleError> {
        match (self.bundle, self.violations.is_empty()) {
            (Some(b), true) => Ok(b),
            (_, _) => Err(BundleError::Invalid(self.violations)),
        }
    }
}

/// Decodes a bundle without rejecting it on invariant violations. Structural
/// damage (magic, version, truncation, malformed headers) is still an error.
pub fn inspect_bytes(bytes: &[u8]) -> Result<Inspection, BundleError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = cur.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(BundleError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(BundleError::UnsupportedVersion(version));
    }
    let manifest_len = cur.u32("manifest length")?;
    let manifest_text = std::str::from_utf8(cur.take(manifest_len as u64, "manifest")?)
        .map_err(|_| BundleError::Malformed("manifest is not UTF-8".into()))?;
    let manifest = parse_manifest(manifest_text)?;
    let count = cur.u32("tensor count")?;
    let mut tensors = Vec::new();
    for i in 0..count {
        tensors.push(read_tensor(&mut cur, i)?);
    }
    if cur.pos != bytes.len() {
        return Err(BundleError::Malformed(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cur.pos
        )));
    }
    assemble(manifest, tensors)
}

fn manifest_usize(
    manifest: &BTreeMap<String, String>,
    key: &'static str,
    violations: &mut Vec<Violation>,
) -> Result<Option<usize>, BundleError> {
    match manifest.get(key) {
        None => {
            violations.push(Violation::ManifestMissing(key));
            Ok(None)
        }
        Some(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| BundleError::Malformed(format!("manifest {key}={v:?} is not a count"))),
    }
}

fn assemble(manifest: BTreeMap<String, String>, tensors: Vec<RawTensor>) -> Result<Inspection, BundleError> {
    let mut violations = Vec::new();
    let mut keys = BTreeMap::new();
    for key in ["M", "N", "h", "p", "d", "C"] {
        keys.insert(key, manifest_usize(&manifest, key, &mut violations)?);
    }
    let seed = match manifest.get("seed") {
        None => None,
        Some(v) => Some(
            v.trim()
                .parse::<u64>()
                .map_err(|_| BundleError::Malformed(format!("manifest seed={v:?} is not an integer")))?,
        ),
    };
    let provenance = manifest.get("provenance").cloned().unwrap_or_default();

    let mut by_name: BTreeMap<String, RawTensor> = BTreeMap::new();
    let mut order = Vec::new();
    for t in tensors {
        if by_name.contains_key(&t.name) {
            violations.push(Violation::DuplicateTensor(t.name.clone()));
            continue;
        }
        order.push(t.name.clone());
        by_name.insert(t.name.clone(), t);
    }

    let labels = match by_name.remove("labels") {
        None => {
            violations.push(Violation::MissingTensor("labels".into()));
            None
        }
        Some(t) => match t.payload {
            Payload::Int(v) if t.dims.len() == 1 => Some(v),
            Payload::Int(_) => {
                violations.push(Violation::WrongShape {
                    tensor: t.name,
                    expected: vec![t.dims.iter().product()],
                    actual: t.dims,
                });
                None
            }
            Payload::Float(_) => {
                violations.push(Violation::WrongDtype {
                    tensor: t.name,
                    expected: "i64",
                    actual: t.dtype,
                });
                None
            }
        },
    };

    let mut group = |prefix: &str, required: bool, violations: &mut Vec<Violation>| -> Option<Vec<Matrix>> {
        let mut members = Vec::new();
        let mut complete = true;
        for i in 0.. {
            let name = format!("{prefix}/{i}");
            match by_name.remove(&name) {
                None => break,
                Some(t) => match to_matrix(t, violations) {
                    Some(m) => members.push(m),
                    None => complete = false,
                },
            }
        }
        if members.is_empty() && complete && required {
            violations.push(Violation::MissingTensor(format!("{prefix}/0")));
            return None;
        }
        complete.then_some(members)
    };
    let features = group("features", true, &mut violations);
    let gradients = group("gradients", true, &mut violations);
    let prompts = group("prompts", false, &mut violations);
    for name in order.iter().filter(|n| by_name.contains_key(*n)) {
        violations.push(Violation::UnexpectedTensor(name.clone()));
    }

    let (Some(labels), Some(features), Some(gradients), Some(prompts)) = (labels, features, gradients, prompts) else {
        return Ok(Inspection {
            bundle: None,
            violations,
        });
    };
    let bundle = PromptBundle {
        labels,
        class_count: keys["C"].unwrap_or(0),
        features,
        gradients,
        prompts: (!prompts.is_empty()).then_some(prompts),
        provenance,
        seed,
    };
    violations.extend(validate_bundle(&bundle));
    let (p, d) = bundle.prompt_shape();
    let actual = [
        ("M", bundle.source_count()),
        ("N", bundle.sample_count()),
        ("h", bundle.feature_dim()),
        ("p", p),
        ("d", d),
    ];
    for (key, value) in actual {
        if let Some(m) = keys[key] {
            if m != value {
                violations.push(Violation::ManifestMismatch {
                    key,
                    manifest: m as u64,
                    actual: value as u64,
                });
            }
        }
    }
    Ok(Inspection {
        bundle: Some(bundle),
        violations,
    })
}

fn to_matrix(t: RawTensor, violations: &mut Vec<Violation>) -> Option<Matrix> {
    if !t.dtype.is_float() {
        violations.push(Violation::WrongDtype {
            tensor: t.name,
            expected: "f32 or f64",
            actual: t.dtype,
        });
        return None;
    }
    if t.dims.len() != 2 {
        violations.push(Violation::WrongShape {
            expected: vec![t.dims.iter().product::<u64>(), 1],
            tensor: t.name,
            actual: t.dims,
        });
        return None;
    }
    let Payload::Float(data) = t.payload else { unreachable!() };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        violations.push(Violation::NonFinite { tensor: t.name, index });
        return None;
    }
    Some(Matrix::new(t.dims[0] as usize, t.dims[1] as usize, data).expect("finite payload of matching size"))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<PromptBundle, BundleError> {
    inspect_bytes(bytes)?.into_valid()
}

pub fn inspect_bundle(path: impl AsRef<Path>) -> Result<Inspection, BundleError> {
    inspect_bytes(&std::fs::read(path)?)
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<PromptBundle, BundleError> {
    decode_bundle(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, f: impl FnMut(usize, usize) -> f64) -> Matrix {
        Matrix::from_fn(r, c, f)
    }

    fn minimal() -> PromptBundle {
        PromptBundle {
            labels: vec![0, 1],
            class_count: 2,
            features: vec![m(2, 1, |r, _| r as f64 - 0.5)],
            gradients: vec![m(1, 1, |_, _| 0.25)],
            prompts: Some(vec![m(1, 1, |_, _| -3.0)]),
            provenance: "unit test".into(),
            seed: Some(17),
        }
    }

    fn sample(seed: u64) -> PromptBundle {
        let s = seed as f64;
        PromptBundle {
            labels: (0..9).map(|i| i % 3).collect(),
            class_count: 3,
            features: (0..3)
                .map(|k| m(9, 4, |r, c| ((r * 7 + c * 3 + k) as f64 * 0.37 + s).sin()))
                .collect(),
            gradients: (0..3).map(|k| m(2, 5, |r, c| ((r + c + k) as f64 - s).cos())).collect(),
            prompts: None,
            provenance: format!("sample {seed}"),
            seed: Some(seed),
        }
    }

    fn bits(m: &Matrix) -> Vec<u64> {
        m.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn minimal_round_trip_is_bit_exact() {
        let b = minimal();
        let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
        assert_eq!(back, b);
        assert_eq!(bits(&back.features[0]), bits(&b.features[0]));
    }

    #[test]
    fn round_trip_without_prompts() {
        let b = sample(3);
        let back = decode_bundle(&encode_bundle(&b).unwrap()).unwrap();
        assert!(back.prompts.is_none());
        for (x, y) in back.features.iter().zip(&b.features).chain(back.gradients.iter().zip(&b.gradients)) {
            assert_eq!(bits(x), bits(y));
        }
        assert_eq!(back, b);
    }

    #[test]
    fn round_trip_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.hgpb");
        write_bundle(&sample(5), &path).unwrap();
        assert_eq!(read_bundle(&path).unwrap(), sample(5));
    }

    #[test]
    fn f32_payloads_widen() {
        let b = sample(1);
        let back = decode_bundle(&encode_bundle_as(&b, FloatWidth::F32).unwrap()).unwrap();
        for (x, y) in back.features.iter().zip(&b.features) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert_eq!(*u, *v as f32 as f64);
            }
        }
    }

    #[test]
    fn manifest_records_dimensions() {
        let bytes = encode_bundle(&sample(2)).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        assert_eq!(text, "M=3\nN=9\nh=4\np=2\nd=5\nC=3\nprovenance=sample 2\nseed=2\n");
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_bundle(&minimal()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_bundle(&bytes), Err(BundleError::BadMagic(_))));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_bundle(&minimal()).unwrap();
        bytes[4] = 2;
        assert!(matches!(decode_bundle(&bytes), Err(BundleError::UnsupportedVersion(2))));
    }

    #[test]
    fn truncated_payload_names_tensor() {
        let bytes = encode_bundle(&minimal()).unwrap();
        // the last tensor is prompts/0 with a single f64
        let cut = &bytes[..bytes.len() - 3];
        match decode_bundle(cut) {
            Err(BundleError::Truncated {
                section,
                expected,
                actual,
            }) => {
                assert_eq!(section, "payload of prompts/0");
                assert_eq!((expected, actual), (8, 5));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nan_is_a_violation_naming_the_tensor() {
        let mut b = sample(4);
        b.features[1] = m(9, 4, |r, c| if (r, c) == (2, 1) { 1234.5 } else { 0.5 });
        let mut bytes = encode_bundle(&b).unwrap();
        let needle = 1234.5f64.to_le_bytes();
        let at = bytes.windows(8).position(|w| w == needle).unwrap();
        bytes[at..at + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        match decode_bundle(&bytes) {
            Err(BundleError::Invalid(v)) => {
                assert_eq!(
                    v,
                    vec![Violation::NonFinite {
                        tensor: "features/1".into(),
                        index: 9
                    }]
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn valid_bundle_has_no_violations() {
        assert!(validate_bundle(&minimal()).is_empty());
        assert!(validate_bundle(&sample(8)).is_empty());
    }

    #[test]
    fn label_equal_to_class_count() {
        let mut b = sample(1);
        b.labels[4] = 3;
        assert_eq!(
            validate_bundle(&b),
            vec![Violation::LabelOutOfRange {
                index: 4,
                value: 3,
                class_count: 3
            }]
        );
        assert!(validate_bundle(&b)[0].to_string().starts_with("labels"));
    }

    #[test]
    fn gradient_shape_mismatch_names_both_sources() {
        let mut b = sample(1);
        b.gradients[2] = m(2, 4, |_, _| 1.0);
        let v = validate_bundle(&b);
        assert_eq!(v.len(), 1);
        let text = v[0].to_string();
        assert!(text.contains("gradients/2") && text.contains("gradients/0"), "{text}");
    }

    #[test]
    fn other_invariants_are_checked() {
        let mut b = sample(1);
        b.labels = vec![0, 0, 0, 1, 1, 1, 0, 1, 0];
        assert_eq!(validate_bundle(&b), vec![Violation::EmptyClass(2)]);

        let mut b = sample(1);
        b.labels.push(0);
        assert!(matches!(validate_bundle(&b)[0], Violation::WrongShape { .. }));

        let mut b = sample(1);
        b.features[1] = m(9, 3, |_, _| 0.0);
        assert!(matches!(validate_bundle(&b)[0], Violation::ShapeMismatch { group: "features", .. }));

        let mut b = sample(1);
        b.prompts = Some(vec![m(2, 5, |_, _| 0.0); 2]);
        assert_eq!(
            validate_bundle(&b),
            vec![Violation::PromptCount {
                expected: 3,
                actual: 2
            }]
        );

        let mut b = sample(1);
        b.gradients.pop();
        assert_eq!(validate_bundle(&b), vec![Violation::MissingTensor("gradients/2".into())]);

        let mut b = minimal();
        b.class_count = 1;
        b.labels = vec![0, 0];
        assert_eq!(validate_bundle(&b), vec![Violation::TooFewClasses(1)]);
    }

    #[test]
    fn writing_an_invalid_bundle_fails() {
        let mut b = minimal();
        b.labels[0] = -1;
        assert!(matches!(encode_bundle(&b), Err(BundleError::Invalid(_))));
        let mut b = minimal();
        b.provenance = "a\nb".into();
        assert!(matches!(encode_bundle(&b), Err(BundleError::Unserializable(_))));
    }

    #[test]
    fn partial_prompts_are_rejected_on_read() {
        let mut b = sample(1);
        b.prompts = Some(vec![m(2, 5, |_, _| 0.0); 3]);
        let full = encode_bundle(&b).unwrap();
        b.prompts = None;
        let bare = encode_bundle(&b).unwrap();
        // splice a single prompts/0 record onto the prompt-free file
        let record_len = 2 + 9 + 2 + 16 + 80;
        let tail = &full[full.len() - 3 * record_len..full.len() - 2 * record_len];
        let mut bytes = bare.clone();
        let count_at = 12 + u32::from_le_bytes(bare[8..12].try_into().unwrap()) as usize;
        bytes[count_at..count_at + 4].copy_from_slice(&8u32.to_le_bytes());
        bytes.extend_from_slice(tail);
        let ins = inspect_bytes(&bytes).unwrap();
        assert_eq!(
            ins.violations,
            vec![Violation::PromptCount {
                expected: 3,
                actual: 1
            }]
        );
    }

    #[test]
    fn manifest_must_match_tensors() {
        let bytes = encode_bundle(&sample(2)).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let text = std::str::from_utf8(&bytes[12..12 + len]).unwrap().replace("h=4", "h=5");
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        let v = inspect_bytes(&out).unwrap().violations;
        assert_eq!(
            v,
            vec![Violation::ManifestMismatch {
                key: "h",
                manifest: 5,
                actual: 4
            }]
        );
    }

    #[test]
    fn missing_required_tensor() {
        let mut b = minimal();
        b.prompts = None;
        let bytes = encode_bundle(&b).unwrap();
        // drop gradients/0, the last record: 2 + 11 + 2 + 16 + 8 bytes
        let mut cut = bytes[..bytes.len() - 39].to_vec();
        let count_at = 12 + u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        cut[count_at..count_at + 4].copy_from_slice(&2u32.to_le_bytes());
        let ins = inspect_bytes(&cut).unwrap();
        assert!(ins.bundle.is_none());
        assert_eq!(ins.violations, vec![Violation::MissingTensor("gradients/0".into())]);
    }

    #[test]
    fn trailing_bytes_are_malformed() {
        let mut bytes = encode_bundle(&minimal()).unwrap();
        bytes.push(0);
        assert!(matches!(decode_bundle(&bytes), Err(BundleError::Malformed(_))));
    }
}
