//! On-disk formats: binary tensor files, task manifests and model files.
//!
//! Tensor file layout (all integers little-endian):
//!
//! ```text
//! offset  size      field
//! 0       4         magic "SEMB"
//! 4       1         version (1)
//! 5       1         dtype (0 = f32, 1 = f64)
//! 6       2         reserved, zero
//! 8       4         ndim
//! 12      4         reserved, zero
//! 16      8 * ndim  dims
//! ...               row-major payload
//! ```
//!
//! Manifests are JSON with file paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{projection_fingerprint, BridgeModel, EosNormEstimate, PromptTokens};
use crate::error::{Error, Result};
use crate::inference::BlendConfig;
use crate::task::{FewShotTask, LabeledEmbeddings, TaskParts};
use crate::tensor::{EmbeddingMatrix, DEFAULT_RANK_TOLERANCE};
use crate::training::TrainConfig;

pub const MAGIC: &[u8; 4] = b"SEMB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

/// An n-dimensional tensor as stored on disk. `f32` payloads are kept as
/// `f32` so that round trips are bit-exact; use [`Tensor::to_f64`] for math.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let expected = element_count(&dims).ok_or_else(|| Error::DimOverflow(PathBuf::new()))?;
        let len = match &data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        };
        if len != expected {
            return Err(Error::ShapeMismatch(format!(
                "tensor dims {dims:?} need {expected} values, got {len}"
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &EmbeddingMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: TensorData::F64(m.data().to_vec()),
        }
    }

    /// Narrows to 32-bit floats.
    pub fn from_matrix_f32(m: &EmbeddingMatrix) -> Self {
        Self {
            dims: vec![m.rows(), m.cols()],
            data: TensorData::F32(m.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_labels(labels: &[usize]) -> Self {
        Self {
            dims: vec![labels.len()],
            data: TensorData::F64(labels.iter().map(|&l| l as f64).collect()),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self.data {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn with_dtype(self, dtype: Dtype) -> Self {
        let data = match (self.data, dtype) {
            (TensorData::F64(v), Dtype::F32) => TensorData::F32(v.into_iter().map(|x| x as f32).collect()),
            (TensorData::F32(v), Dtype::F64) => TensorData::F64(v.into_iter().map(f64::from).collect()),
            (d, _) => d,
        };
        Self { dims: self.dims, data }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Views a 2-D tensor as a matrix.
    pub fn to_matrix(&self) -> Result<EmbeddingMatrix> {
        match self.dims.as_slice() {
            &[r, c] => EmbeddingMatrix::new(r, c, self.to_f64()),
            dims => Err(Error::ShapeMismatch(format!("expected a 2-D tensor, got dims {dims:?}"))),
        }
    }

    /// Reads a 1-D tensor of non-negative integral values.
    pub fn to_labels(&self) -> Result<Vec<usize>> {
        if self.dims.len() != 1 {
            return Err(Error::ShapeMismatch(format!("labels must be 1-D, got dims {:?}", self.dims)));
        }
        self.to_f64()
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::ShapeMismatch(format!("label {v} is not a class index")))
                }
            })
            .collect()
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dtype = t.dtype();
    let n = element_count(&t.dims).unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.dims.len() + n * dtype.size());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Parses tensor bytes; `path` is only used in error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let truncated = |expected: usize| Error::TruncatedPayload {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let version = bytes[4];
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        dtype => {
            return Err(Error::UnsupportedDtype {
                path: path.to_path_buf(),
                dtype,
            })
        }
    };
    let ndim = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    let dims_end = ndim
        .checked_mul(8)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::DimOverflow(path.to_path_buf()))?;
    if bytes.len() < dims_end {
        return Err(truncated(dims_end));
    }
    let mut dims = Vec::with_capacity(ndim);
    for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
        let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        dims.push(usize::try_from(d).map_err(|_| Error::DimOverflow(path.to_path_buf()))?);
    }
    let total = element_count(&dims)
        .and_then(|n| n.checked_mul(dtype.size()))
        .and_then(|n| n.checked_add(dims_end))
        .ok_or_else(|| Error::DimOverflow(path.to_path_buf()))?;
    if bytes.len() != total {
        return Err(truncated(total));
    }
    let payload = &bytes[dims_end..];
    let data = match dtype {
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect(),
        ),
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Tensor file names referenced by a task manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFiles {
    pub support: String,
    pub support_labels: String,
    pub validation: String,
    pub validation_labels: String,
    pub test: String,
    pub test_labels: String,
    /// `C x P x d_t` EOS tokens.
    pub prompts: String,
    /// `C x d` projected class text embeddings.
    pub text: String,
    /// `d_t x d`.
    pub text_projection: String,
}

impl Default for TaskFiles {
    fn default() -> Self {
        Self {
            support: "support.semb".into(),
            support_labels: "support_labels.semb".into(),
            validation: "validation.semb".into(),
            validation_labels: "validation_labels.semb".into(),
            test: "test.semb".into(),
            test_labels: "test_labels.semb".into(),
            prompts: "prompts.semb".into(),
            text: "text.semb".into(),
            text_projection: "text_projection.semb".into(),
        }
    }
}

impl TaskFiles {
    fn all(&self) -> [&str; 9] {
        [
            &self.support,
            &self.support_labels,
            &self.validation,
            &self.validation_labels,
            &self.test,
            &self.test_labels,
            &self.prompts,
            &self.text,
            &self.text_projection,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub schema_version: u32,
    pub name: String,
    pub encoder: String,
    pub embed_dim: usize,
    pub eos_dim: usize,
    pub temperature: f64,
    pub class_names: Vec<String>,
    pub shots: usize,
    pub seed: u64,
    pub files: TaskFiles,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Writes `task` into `dir` and returns the manifest path. Tensors are
/// written with `dtype`.
pub fn save_task(task: &FewShotTask, dir: &Path, dtype: Dtype) -> Result<PathBuf> {
    create_dir(dir)?;
    let files = TaskFiles::default();
    let (c, p, dt) = (task.classes(), task.prompts.prompts_per_class, task.eos_dim());
    let prompts = Tensor::new(vec![c, p, dt], TensorData::F64(task.prompts.tokens.data().to_vec()))?;
    let matrices: [(&str, Tensor); 6] = [
        (&files.support, Tensor::from_matrix(&task.support.embeddings)),
        (&files.validation, Tensor::from_matrix(&task.validation.embeddings)),
        (&files.test, Tensor::from_matrix(&task.test.embeddings)),
        (&files.prompts, prompts),
        (&files.text, Tensor::from_matrix(&task.text)),
        (&files.text_projection, Tensor::from_matrix(&task.projection.forward)),
    ];
    for (name, t) in matrices {
        write_tensor(&dir.join(name), &t.with_dtype(dtype))?;
    }
    for (name, labels) in [
        (&files.support_labels, &task.support.labels),
        (&files.validation_labels, &task.validation.labels),
        (&files.test_labels, &task.test.labels),
    ] {
        write_tensor(&dir.join(name), &Tensor::from_labels(labels))?;
    }
    let manifest = TaskManifest {
        schema_version: SCHEMA_VERSION,
        name: task.name.clone(),
        encoder: task.encoder.clone(),
        embed_dim: task.embed_dim(),
        eos_dim: task.eos_dim(),
        temperature: task.temperature,
        class_names: task.class_names.clone(),
        shots: task.shots_per_class,
        seed: task.seed,
        files,
        provenance: task.provenance.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Accepts either a manifest file or the directory holding `manifest.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<TaskManifest> {
    let path = manifest_path(path);
    let manifest: TaskManifest = read_json(&path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidManifest {
            path,
            reason: format!("unsupported schema_version {}", manifest.schema_version),
        });
    }
    Ok(manifest)
}

fn load_matrix(dir: &Path, name: &str, what: &str, cols: usize) -> Result<EmbeddingMatrix> {
    let m = read_tensor(&dir.join(name))?.to_matrix()?;
    if m.cols() != cols {
        return Err(Error::ShapeMismatch(format!(
            "{what} tensor is {}x{}, manifest declares dim {cols}",
            m.rows(),
            m.cols()
        )));
    }
    Ok(m)
}

fn load_split(dir: &Path, rows: &str, labels: &str, what: &str, d: usize, classes: usize) -> Result<LabeledEmbeddings> {
    let embeddings = load_matrix(dir, rows, what, d)?;
    let labels = read_tensor(&dir.join(labels))?.to_labels()?;
    LabeledEmbeddings::new(embeddings, labels, classes)
}

/// Loads and fully validates a task.
pub fn load_task(path: &Path) -> Result<FewShotTask> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let (d, dt, classes) = (manifest.embed_dim, manifest.eos_dim, manifest.class_names.len());
    let f = &manifest.files;

    let support = load_split(dir, &f.support, &f.support_labels, "support", d, classes)?;
    let validation = load_split(dir, &f.validation, &f.validation_labels, "validation", d, classes)?;
    let test = load_split(dir, &f.test, &f.test_labels, "test", d, classes)?;

    let prompts = read_tensor(&dir.join(&f.prompts))?;
    let (pc, pp, pd) = match prompts.dims.as_slice() {
        &[c, p, t] => (c, p, t),
        dims => {
            return Err(Error::ShapeMismatch(format!(
                "prompt tensor must be classes x prompts x d_t, got {dims:?}"
            )))
        }
    };
    if pc != classes || pd != dt {
        return Err(Error::ShapeMismatch(format!(
            "prompt tensor is {pc}x{pp}x{pd}, manifest declares {classes} classes and d_t {dt}"
        )));
    }
    let prompts = PromptTokens::new(EmbeddingMatrix::new(pc * pp, pd, prompts.to_f64())?, pp)?;
    let text = load_matrix(dir, &f.text, "text", d)?;
    let text_projection = load_matrix(dir, &f.text_projection, "text projection", d)?;
    if text_projection.rows() != dt {
        return Err(Error::ShapeMismatch(format!(
            "text projection has {} rows, manifest declares d_t {dt}",
            text_projection.rows()
        )));
    }

    FewShotTask::new(
        TaskParts {
            name: manifest.name,
            encoder: manifest.encoder,
            class_names: manifest.class_names,
            shots_per_class: manifest.shots,
            support,
            validation,
            test,
            prompts,
            text,
            text_projection,
            temperature: manifest.temperature,
            seed: manifest.seed,
            provenance: manifest.provenance,
        },
        DEFAULT_RANK_TOLERANCE,
    )
}

/// SHA-256 over the manifest bytes and every referenced tensor file, so a
/// model cannot silently be paired with edited task data.
pub fn task_hash(path: &Path) -> Result<String> {
    let path = manifest_path(path);
    let manifest = read_manifest(&path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut hasher = Sha256::new();
    hasher.update(fs::read(&path).map_err(|e| Error::io(&path, e))?);
    for name in manifest.files.all() {
        let p = dir.join(name);
        hasher.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Training summary stored next to a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingInfo {
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Epoch whose parameters were saved.
    pub saved_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFiles {
    pub inverse_projection: String,
    pub class_bias: String,
}

impl Default for ModelFiles {
    fn default() -> Self {
        Self {
            inverse_projection: "inverse_projection.semb".into(),
            class_bias: "class_bias.semb".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub task_hash: String,
    pub projection_fingerprint: String,
    pub eos_norm: EosNormEstimate,
    pub blend: Option<BlendConfig>,
    pub training: Option<TrainingInfo>,
    pub files: ModelFiles,
}

/// A bridge model together with its on-disk metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub model: BridgeModel,
    pub task_hash: String,
    pub blend: Option<BlendConfig>,
    pub training: Option<TrainingInfo>,
}

pub fn save_model(dir: &Path, record: &ModelRecord) -> Result<PathBuf> {
    create_dir(dir)?;
    let files = ModelFiles::default();
    write_tensor(
        &dir.join(&files.inverse_projection),
        &Tensor::from_matrix(&record.model.inverse_projection),
    )?;
    write_tensor(&dir.join(&files.class_bias), &Tensor::from_matrix(&record.model.class_bias))?;
    let manifest = ModelManifest {
        schema_version: SCHEMA_VERSION,
        task_hash: record.task_hash.clone(),
        projection_fingerprint: record.model.forward_projection_ref.clone(),
        eos_norm: record.model.eos_norm.clone(),
        blend: record.blend,
        training: record.training.clone(),
        files,
    };
    let path = dir.join(MODEL_FILE);
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a model from a directory or `model.json` path. When
/// `expected_task_hash` is given, the stored hash must match it.
pub fn load_model(path: &Path, expected_task_hash: Option<&str>) -> Result<ModelRecord> {
    let path = if path.is_dir() { path.join(MODEL_FILE) } else { path.to_path_buf() };
    let manifest: ModelManifest = read_json(&path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidManifest {
            path,
            reason: format!("unsupported schema_version {}", manifest.schema_version),
        });
    }
    if let Some(expected) = expected_task_hash {
        if manifest.task_hash != expected {
            return Err(Error::ManifestHashMismatch {
                expected: manifest.task_hash,
                found: expected.to_string(),
            });
        }
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let model = BridgeModel {
        inverse_projection: read_tensor(&dir.join(&manifest.files.inverse_projection))?.to_matrix()?,
        class_bias: read_tensor(&dir.join(&manifest.files.class_bias))?.to_matrix()?,
        eos_norm: manifest.eos_norm,
        forward_projection_ref: manifest.projection_fingerprint,
    };
    Ok(ModelRecord {
        model,
        task_hash: manifest.task_hash,
        blend: manifest.blend,
        training: manifest.training,
    })
}

/// Loads a model for `task` and checks it was built against the task's
/// projection.
pub fn load_model_for_task(path: &Path, task_manifest: &Path, task: &FewShotTask) -> Result<ModelRecord> {
    let record = load_model(path, Some(&task_hash(task_manifest)?))?;
    let fingerprint = projection_fingerprint(&task.projection.forward);
    if record.model.forward_projection_ref != fingerprint {
        return Err(Error::ShapeMismatch("model was built for a different text projection".into()));
    }
    record.model.validate_against(&task.projection.forward)?;
    if record.model.classes() != task.classes() {
        return Err(Error::ShapeMismatch(format!(
            "model has {} classes, task has {}",
            record.model.classes(),
            task.classes()
        )));
    }
    Ok(record)
}

pub fn write_blend(path: &Path, blend: &BlendConfig) -> Result<()> {
    write_json(path, blend)
}

pub fn read_blend(path: &Path) -> Result<BlendConfig> {
    let blend: BlendConfig = read_json(path)?;
    blend.validate()?;
    Ok(blend)
}
