//! The in-memory few-shot task: support shots, evaluation splits, class
//! prompts and the frozen text projection.

use crate::bridge::{estimate_eos_norm, EosNormEstimate, PromptTokens};
use crate::error::{Error, Result};
use crate::tensor::{EmbeddingMatrix, ProjectionPair};

/// Embedding rows with one class id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<usize>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: EmbeddingMatrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if embeddings.rows() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} embedding rows but {} labels",
                embeddings.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            embeddings: EmbeddingMatrix::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Raw pieces of a task before validation.
#[derive(Debug, Clone)]
pub struct TaskParts {
    pub name: String,
    pub encoder: String,
    pub class_names: Vec<String>,
    pub shots_per_class: usize,
    pub support: LabeledEmbeddings,
    pub validation: LabeledEmbeddings,
    pub test: LabeledEmbeddings,
    pub prompts: PromptTokens,
    /// Projected class text embeddings (`classes x d`).
    pub text: EmbeddingMatrix,
    /// `W_txt`, stored `d_t x d`.
    pub text_projection: EmbeddingMatrix,
    pub temperature: f64,
    pub seed: u64,
    pub provenance: serde_json::Value,
}

/// A validated few-shot classification task.
#[derive(Debug, Clone)]
pub struct FewShotTask {
    pub name: String,
    pub encoder: String,
    pub class_names: Vec<String>,
    pub shots_per_class: usize,
    pub support: LabeledEmbeddings,
    pub validation: LabeledEmbeddings,
    pub test: LabeledEmbeddings,
    pub prompts: PromptTokens,
    /// Prompt-averaged EOS token per class (`classes x d_t`).
    pub class_eos: EmbeddingMatrix,
    pub text: EmbeddingMatrix,
    pub projection: ProjectionPair,
    pub eos_norm: EosNormEstimate,
    pub temperature: f64,
    pub seed: u64,
    pub provenance: serde_json::Value,
}

impl FewShotTask {
    pub fn new(parts: TaskParts, rank_tolerance: f64) -> Result<Self> {
        let classes = parts.class_names.len();
        if classes < 2 {
            return Err(Error::ShapeMismatch(format!("need at least 2 classes, got {classes}")));
        }
        let (dt, d) = parts.text_projection.shape();
        if d == 0 || dt == 0 {
            return Err(Error::ShapeMismatch("text projection is empty".into()));
        }
        for (split, set) in [
            ("support", &parts.support),
            ("validation", &parts.validation),
            ("test", &parts.test),
        ] {
            if set.embeddings.cols() != d {
                return Err(Error::ShapeMismatch(format!(
                    "{split} embeddings have dim {}, expected {d}",
                    set.embeddings.cols()
                )));
            }
            if let Some(&label) = set.labels.iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        let counts = parts.support.class_counts(classes);
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        if parts.shots_per_class == 0 || parts.support.len() != classes * parts.shots_per_class {
            return Err(Error::ShapeMismatch(format!(
                "support has {} rows, expected {} classes x {} shots",
                parts.support.len(),
                classes,
                parts.shots_per_class
            )));
        }
        if parts.prompts.classes() != classes || parts.prompts.tokens.cols() != dt {
            return Err(Error::ShapeMismatch(format!(
                "prompt tokens are {}x{} for {} prompts per class, expected {classes} classes of dim {dt}",
                parts.prompts.tokens.rows(),
                parts.prompts.tokens.cols(),
                parts.prompts.prompts_per_class
            )));
        }
        if parts.text.shape() != (classes, d) {
            return Err(Error::ShapeMismatch(format!(
                "text embeddings are {:?}, expected {:?}",
                parts.text.shape(),
                (classes, d)
            )));
        }
        if !(parts.temperature > 0.0) {
            return Err(Error::NonPositiveTemperature(parts.temperature));
        }
        let eos_norm = estimate_eos_norm(&parts.prompts)?;
        let class_eos = parts.prompts.class_means();
        let projection = ProjectionPair::new(parts.text_projection, rank_tolerance)?;
        Ok(Self {
            name: parts.name,
            encoder: parts.encoder,
            class_names: parts.class_names,
            shots_per_class: parts.shots_per_class,
            support: parts.support,
            validation: parts.validation,
            test: parts.test,
            prompts: parts.prompts,
            class_eos,
            text: parts.text,
            projection,
            eos_norm,
            temperature: parts.temperature,
            seed: parts.seed,
            provenance: parts.provenance,
        })
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.embed_dim()
    }

    pub fn eos_dim(&self) -> usize {
        self.projection.eos_dim()
    }
}

/// Class-wise mean of labeled rows (`classes x cols`). Classes without rows
/// stay zero.
pub fn classwise_mean(rows: &EmbeddingMatrix, labels: &[usize], classes: usize) -> EmbeddingMatrix {
    let mut out = EmbeddingMatrix::zeros(classes, rows.cols());
    let mut counts = vec![0usize; classes];
    for (r, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (o, v) in out.row_mut(c).iter_mut().zip(rows.row(r)) {
            *o += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            out.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    out
}
