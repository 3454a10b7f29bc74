//! Training-free (and trained) classification: class centroids, the three
//! sharpened similarity logits, the KL-based label refinement and their
//! blend.
//!
//! ```text
//! z1 = φ(cos(f, T_txt), α)
//! z2 = φ(cos(f̂_txt, F'_img), γ) ⊙ w
//! z3 = φ(cos(f, F̂'_txt), β) ⊙ w
//! z  = λ1·z1 + λ2·z2 + λ3·z3
//! ```
//!
//! where `φ(z, s) = exp(-s(1 - z))` and `w_c = L̃[c, c] = exp(θ · KL(p_c ‖ e_c))`
//! reweights the one-hot label of class `c` by how well its image centroid's
//! text-similarity distribution `p_c` agrees with that label.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bridge::{bridge_trained, BridgeModel};
use crate::error::{Error, Result};
use crate::tensor::{
    cosine_matrix, kl_divergence, normalize_rows_strict, softmax_rows, EmbeddingMatrix,
    DEFAULT_KL_EPSILON,
};
use crate::task::{classwise_mean, FewShotTask, LabeledEmbeddings};

/// Logit blending and sharpening parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub theta: f64,
    /// Logit scale of the soft-label softmax.
    pub temperature: f64,
    pub epsilon_kl: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            theta: 0.0,
            temperature: 100.0,
            epsilon_kl: DEFAULT_KL_EPSILON,
        }
    }
}

impl BlendConfig {
    /// Only `z1`: the zero-shot prior.
    pub fn zero_shot() -> Self {
        Self {
            lambda2: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    /// Only `z2`, no label refinement.
    pub fn bridged_query_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda3: 0.0,
            ..Self::default()
        }
    }

    /// Only `z3`, no label refinement. Used to rank training epochs.
    pub fn bridged_shots_only() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.alpha,
            self.beta,
            self.gamma,
            self.theta,
            self.temperature,
            self.epsilon_kl,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBlend("non-finite parameter".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::InvalidBlend("blend weights must be non-negative".into()));
        }
        if self.lambda1 + self.lambda2 + self.lambda3 <= 0.0 {
            return Err(Error::InvalidBlend("at least one blend weight must be positive".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidBlend("sharpening strengths must be non-negative".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidBlend("temperature must be positive".into()));
        }
        if self.epsilon_kl < 0.0 {
            return Err(Error::InvalidBlend("epsilon_kl must be non-negative".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides such as `l1=1,l2=0,theta=-2`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidBlend(format!("expected key=value, got '{part}'")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidBlend(format!("bad number in '{part}'")))?;
            let slot = match key.trim() {
                "l1" | "lambda1" => &mut self.lambda1,
                "l2" | "lambda2" => &mut self.lambda2,
                "l3" | "lambda3" => &mut self.lambda3,
                "alpha" => &mut self.alpha,
                "beta" => &mut self.beta,
                "gamma" => &mut self.gamma,
                "theta" => &mut self.theta,
                "temperature" => &mut self.temperature,
                "epsilon_kl" => &mut self.epsilon_kl,
                other => return Err(Error::InvalidBlend(format!("unknown blend key '{other}'"))),
            };
            *slot = value;
        }
        self.validate()?;
        Ok(self)
    }
}

/// Logit sharpening `exp(-strength · (1 - z))`; inputs are clamped to `[-1, 1]`.
pub fn sharpen_value(z: f64, strength: f64) -> f64 {
    (-strength * (1.0 - z.clamp(-1.0, 1.0))).exp()
}

pub fn sharpen(z: &EmbeddingMatrix, strength: f64) -> EmbeddingMatrix {
    let mut out = z.clone();
    out.data_mut().iter_mut().for_each(|v| *v = sharpen_value(*v, strength));
    out
}

/// `KL(p_i ‖ smooth(e_j))` for every pair of classes, where
/// `p_i = softmax(temperature · centroid_i · T_txtᵀ)`.
pub fn kl_table(
    centroids_img: &EmbeddingMatrix,
    text_embeddings: &EmbeddingMatrix,
    temperature: f64,
    epsilon: f64,
) -> Result<EmbeddingMatrix> {
    let classes = centroids_img.rows();
    if text_embeddings.rows() != classes {
        return Err(Error::ShapeMismatch(format!(
            "{classes} centroids but {} text embeddings",
            text_embeddings.rows()
        )));
    }
    let sims = centroids_img.matmul_transposed(text_embeddings)?;
    let probs = softmax_rows(&sims, temperature)?;
    let mut out = EmbeddingMatrix::zeros(classes, classes);
    let mut one_hot = vec![0.0; classes];
    for j in 0..classes {
        one_hot.iter_mut().for_each(|v| *v = 0.0);
        one_hot[j] = 1.0;
        for i in 0..classes {
            let p = probs.row(i);
            // renormalize after rounding
            let sum: f64 = p.iter().sum();
            let p: Vec<f64> = p.iter().map(|v| v / sum).collect();
            out.set(i, j, kl_divergence(&p, &one_hot, epsilon)?);
        }
    }
    Ok(out)
}

/// Soft label matrix `L̃[i, j] = exp(θ · KL(p_i ‖ smooth(e_j)))`.
pub fn soft_label_matrix(
    centroids_img: &EmbeddingMatrix,
    text_embeddings: &EmbeddingMatrix,
    theta: f64,
    temperature: f64,
    epsilon: f64,
) -> Result<EmbeddingMatrix> {
    let kl = kl_table(centroids_img, text_embeddings, temperature, epsilon)?;
    Ok(soft_labels_from_kl(&kl, theta))
}

fn soft_labels_from_kl(kl: &EmbeddingMatrix, theta: f64) -> EmbeddingMatrix {
    let mut out = kl.clone();
    out.data_mut().iter_mut().for_each(|v| {
        *v = if theta == 0.0 { 1.0 } else { (theta * *v).exp() };
    });
    out
}

/// Everything needed to classify queries against a support set.
#[derive(Debug, Clone)]
pub struct ClassifierState {
    /// Normalized class means of the support image embeddings (`F'_img`).
    pub centroids_img: EmbeddingMatrix,
    /// Normalized class means of the bridged support embeddings (`F̂'_txt`).
    pub bridged_centroids_txt: EmbeddingMatrix,
    /// Normalized class text embeddings (`T_txt`).
    pub text_embeddings: EmbeddingMatrix,
    pub kl_table: EmbeddingMatrix,
    pub soft_labels: EmbeddingMatrix,
    pub blend: BlendConfig,
    pub model: BridgeModel,
    text_projection: EmbeddingMatrix,
}

impl ClassifierState {
    /// Builds centroids from the support set, bridging shots with the model's
    /// class bias.
    pub fn build(
        support: &LabeledEmbeddings,
        text: &EmbeddingMatrix,
        model: &BridgeModel,
        text_projection: &EmbeddingMatrix,
        blend: BlendConfig,
    ) -> Result<Self> {
        blend.validate()?;
        model.validate_against(text_projection)?;
        let classes = model.classes();
        if text.rows() != classes {
            return Err(Error::ShapeMismatch(format!(
                "{} text embeddings for {classes} classes",
                text.rows()
            )));
        }
        let counts = support.class_counts(classes);
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        let centroids_img = normalize_rows_strict(
            &classwise_mean(&support.embeddings, &support.labels, classes),
            "image centroids",
        )?;
        let bridged = bridge_trained(&support.embeddings, Some(&support.labels), model, text_projection)?;
        let bridged_centroids_txt = normalize_rows_strict(
            &classwise_mean(&bridged.txt, &support.labels, classes),
            "bridged centroids",
        )?;
        let text_embeddings = normalize_rows_strict(text, "text embeddings")?;
        let kl_table = kl_table(&centroids_img, &text_embeddings, blend.temperature, blend.epsilon_kl)?;
        let soft_labels = soft_labels_from_kl(&kl_table, blend.theta);
        Ok(Self {
            centroids_img,
            bridged_centroids_txt,
            text_embeddings,
            kl_table,
            soft_labels,
            blend,
            model: model.clone(),
            text_projection: text_projection.clone(),
        })
    }

    /// Convenience: state for a task's support set.
    pub fn for_task(task: &FewShotTask, model: &BridgeModel, blend: BlendConfig) -> Result<Self> {
        Self::build(&task.support, &task.text, model, &task.projection.forward, blend)
    }

    pub fn classes(&self) -> usize {
        self.centroids_img.rows()
    }

    /// Same support statistics with a different blend.
    pub fn with_blend(&self, blend: BlendConfig) -> Result<Self> {
        blend.validate()?;
        let mut next = self.clone();
        if blend.temperature != self.blend.temperature || blend.epsilon_kl != self.blend.epsilon_kl {
            next.kl_table = kl_table(
                &self.centroids_img,
                &self.text_embeddings,
                blend.temperature,
                blend.epsilon_kl,
            )?;
        }
        next.soft_labels = soft_labels_from_kl(&next.kl_table, blend.theta);
        next.blend = blend;
        Ok(next)
    }

    /// Per-class label weights `L̃[c, c]` for a given `θ`.
    pub fn label_weights(&self, theta: f64) -> Vec<f64> {
        (0..self.classes())
            .map(|c| if theta == 0.0 { 1.0 } else { (theta * self.kl_table.get(c, c)).exp() })
            .collect()
    }

    /// Raw cosine tables for a batch of queries; independent of the blend.
    pub fn similarities(&self, queries: &EmbeddingMatrix) -> Result<QuerySimilarities> {
        if queries.rows() == 0 {
            return Err(Error::EmptyInput("inference::similarities"));
        }
        let bridged = bridge_trained(queries, None, &self.model, &self.text_projection)?;
        Ok(QuerySimilarities {
            image_text: cosine_matrix(queries, &self.text_embeddings)?,
            bridged_query_image: cosine_matrix(&bridged.txt, &self.centroids_img)?,
            image_bridged: cosine_matrix(queries, &self.bridged_centroids_txt)?,
        })
    }

    pub fn predict(&self, query: &[f64]) -> Result<Prediction> {
        let q = EmbeddingMatrix::new(1, query.len(), query.to_vec())?;
        let sims = self.similarities(&q)?;
        Ok(sims.prediction(0, &self.blend, &self.label_weights(self.blend.theta)))
    }

    pub fn evaluate(&self, queries: &EmbeddingMatrix, labels: &[usize]) -> Result<Evaluation> {
        if labels.len() != queries.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} queries but {} labels",
                queries.rows(),
                labels.len()
            )));
        }
        let sims = self.similarities(queries)?;
        sims.evaluate(labels, &self.blend, &self.label_weights(self.blend.theta))
    }
}

/// The three blend logits of one query and their weighted sum.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub z3: Vec<f64>,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Cosine tables of a query batch against the three class-level references.
#[derive(Debug, Clone)]
pub struct QuerySimilarities {
    /// `cos(f, T_txt)` feeding `z1`.
    pub image_text: EmbeddingMatrix,
    /// `cos(f̂_txt, F'_img)` feeding `z2`.
    pub bridged_query_image: EmbeddingMatrix,
    /// `cos(f, F̂'_txt)` feeding `z3`.
    pub image_bridged: EmbeddingMatrix,
}

impl QuerySimilarities {
    pub fn len(&self) -> usize {
        self.image_text.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prediction(&self, q: usize, blend: &BlendConfig, label_weights: &[f64]) -> Prediction {
        let z1: Vec<f64> = self.image_text.row(q).iter().map(|&s| sharpen_value(s, blend.alpha)).collect();
        let z2: Vec<f64> = self
            .bridged_query_image
            .row(q)
            .iter()
            .zip(label_weights)
            .map(|(&s, w)| sharpen_value(s, blend.gamma) * w)
            .collect();
        let z3: Vec<f64> = self
            .image_bridged
            .row(q)
            .iter()
            .zip(label_weights)
            .map(|(&s, w)| sharpen_value(s, blend.beta) * w)
            .collect();
        let logits = (0..z1.len())
            .map(|c| blend.lambda1 * z1[c] + blend.lambda2 * z2[c] + blend.lambda3 * z3[c])
            .collect();
        Prediction { logits, z1, z2, z3 }
    }

    pub fn predicted_classes(&self, blend: &BlendConfig, label_weights: &[f64]) -> Vec<usize> {
        (0..self.len())
            .into_par_iter()
            .map(|q| self.prediction(q, blend, label_weights).class())
            .collect()
    }

    pub fn evaluate(&self, labels: &[usize], blend: &BlendConfig, label_weights: &[f64]) -> Result<Evaluation> {
        let classes = self.image_text.cols();
        if self.is_empty() {
            return Err(Error::EmptyInput("inference::evaluate"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let predictions = self.predicted_classes(blend, label_weights);
        Ok(Evaluation::from_predictions(predictions, labels, classes))
    }
}

/// Accuracy and confusion counts (rows are true classes).
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

impl Evaluation {
    pub fn from_predictions(predictions: Vec<usize>, labels: &[usize], classes: usize) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        let mut correct = 0;
        for (&p, &l) in predictions.iter().zip(labels) {
            confusion[l][p] += 1;
            correct += usize::from(p == l);
        }
        Self {
            accuracy: correct as f64 / labels.len().max(1) as f64,
            predictions,
            confusion,
        }
    }

    /// Row-normalized confusion matrix; rows without samples stay zero.
    pub fn confusion_normalized(&self) -> Vec<Vec<f64>> {
        self.confusion
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|&v| if n == 0 { 0.0 } else { v as f64 / n as f64 }).collect()
            })
            .collect()
    }

    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                if n == 0 { 0.0 } else { row[c] as f64 / n as f64 }
            })
            .collect()
    }

    /// CSV with header `true_class,predicted_class,count,fraction`.
    pub fn write_confusion_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "true_class,predicted_class,count,fraction")?;
        let norm = self.confusion_normalized();
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, &count) in row.iter().enumerate() {
                writeln!(out, "{t},{p},{count},{}", norm[t][p])?;
            }
        }
        Ok(())
    }
}

/// Paired (same class) vs unpaired (different class) cosine histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHistogram {
    pub edges: Vec<f64>,
    pub paired: Vec<u64>,
    pub unpaired: Vec<u64>,
}

pub const HISTOGRAM_BINS: usize = 100;

impl SimilarityHistogram {
    /// Histograms every cosine between `queries` and `references` over
    /// `bins` uniform bins on `[-1, 1]`.
    pub fn compute(
        queries: &EmbeddingMatrix,
        query_labels: &[usize],
        references: &EmbeddingMatrix,
        reference_labels: &[usize],
        bins: usize,
    ) -> Result<Self> {
        let cos = cosine_matrix(queries, references)?;
        Self::from_cosines(&cos, query_labels, reference_labels, bins, false)
    }

    /// Histograms the cosines between distinct rows of one labeled set.
    pub fn within(rows: &EmbeddingMatrix, labels: &[usize], bins: usize) -> Result<Self> {
        let cos = cosine_matrix(rows, rows)?;
        Self::from_cosines(&cos, labels, labels, bins, true)
    }

    fn from_cosines(
        cos: &EmbeddingMatrix,
        row_labels: &[usize],
        col_labels: &[usize],
        bins: usize,
        skip_diagonal: bool,
    ) -> Result<Self> {
        if bins == 0 {
            return Err(Error::EmptyInput("inference::histogram bins"));
        }
        if cos.shape() != (row_labels.len(), col_labels.len()) {
            return Err(Error::ShapeMismatch("one label per histogram row and column".into()));
        }
        let mut paired = vec![0u64; bins];
        let mut unpaired = vec![0u64; bins];
        for (i, &li) in row_labels.iter().enumerate() {
            for (j, &lj) in col_labels.iter().enumerate() {
                if skip_diagonal && i == j {
                    continue;
                }
                let b = (((cos.get(i, j) + 1.0) / 2.0 * bins as f64).floor() as usize).min(bins - 1);
                if li == lj {
                    paired[b] += 1;
                } else {
                    unpaired[b] += 1;
                }
            }
        }
        let edges = (0..=bins).map(|k| -1.0 + 2.0 * k as f64 / bins as f64).collect();
        Ok(Self {
            edges,
            paired,
            unpaired,
        })
    }

    /// Shared area of the two normalized histograms (`Σ min(p_b, u_b)`), in `[0, 1]`.
    pub fn overlap(&self) -> f64 {
        let np: u64 = self.paired.iter().sum();
        let nu: u64 = self.unpaired.iter().sum();
        if np == 0 || nu == 0 {
            return 0.0;
        }
        self.paired
            .iter()
            .zip(&self.unpaired)
            .map(|(&p, &u)| (p as f64 / np as f64).min(u as f64 / nu as f64))
            .sum()
    }

    /// CSV with header `bin_lo,bin_hi,paired_count,unpaired_count`.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "bin_lo,bin_hi,paired_count,unpaired_count")?;
        for b in 0..self.paired.len() {
            writeln!(
                out,
                "{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.paired[b],
                self.unpaired[b]
            )?;
        }
        Ok(())
    }
}

/// Paired/unpaired cosine distributions over a few-shot set for three
/// comparison methods.
#[derive(Debug, Clone)]
pub struct ModalityReport {
    /// Image shot vs every other image shot.
    pub intra_modal: SimilarityHistogram,
    /// Image shot vs class text embeddings.
    pub cross_modal: SimilarityHistogram,
    /// Bridged shot (class bias applied, as in `z3`) vs class text embeddings.
    pub bridged: SimilarityHistogram,
}

impl ModalityReport {
    pub fn histograms(&self) -> [(&'static str, &SimilarityHistogram); 3] {
        [
            ("intra_modal", &self.intra_modal),
            ("cross_modal", &self.cross_modal),
            ("bridged", &self.bridged),
        ]
    }
}

/// Builds the three histograms for `support` against class `text`
/// embeddings, bridging through `model`.
pub fn modality_report(
    support: &LabeledEmbeddings,
    text: &EmbeddingMatrix,
    model: &BridgeModel,
    text_projection: &EmbeddingMatrix,
) -> Result<ModalityReport> {
    if support.is_empty() {
        return Err(Error::EmptyInput("inference::modality_report"));
    }
    let class_ids: Vec<usize> = (0..text.rows()).collect();
    let bridged = bridge_trained(&support.embeddings, Some(&support.labels), model, text_projection)?;
    Ok(ModalityReport {
        intra_modal: SimilarityHistogram::within(&support.embeddings, &support.labels, HISTOGRAM_BINS)?,
        cross_modal: SimilarityHistogram::compute(
            &support.embeddings,
            &support.labels,
            text,
            &class_ids,
            HISTOGRAM_BINS,
        )?,
        bridged: SimilarityHistogram::compute(&bridged.txt, &support.labels, text, &class_ids, HISTOGRAM_BINS)?,
    })
}

/// Writes a CSV to `path`, mapping IO errors into the crate error.
pub(crate) fn write_csv_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
