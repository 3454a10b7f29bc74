//! Synthetic contrastive embeddings with a modality gap.
//!
//! Each class has a unit direction `u_c` in the shared space. Image
//! embeddings are `u_c + g_img + n_img` where `g_img` is a constant modality
//! offset and `n_img` is anisotropic noise stretched along a few fixed axes.
//! Text embeddings are `u_c + g_txt + n_txt`; their EOS tokens are drawn as
//! pre-images under a random full-column-rank `W_txt` (plus a random
//! component in the projection's null space), so projecting them lands back
//! on the text embeddings.
//!
//! Image noise that shares axes across every image is what makes
//! image-to-image similarity less reliable than image-to-text similarity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bridge::PromptTokens;
use crate::error::{Error, Result};
use crate::task::{FewShotTask, LabeledEmbeddings, TaskParts};
use crate::tensor::{pseudo_inverse, EmbeddingMatrix, DEFAULT_RANK_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub classes: usize,
    pub shots: usize,
    pub queries_per_class: usize,
    pub validation_per_class: usize,
    pub prompts_per_class: usize,
    pub embed_dim: usize,
    pub eos_dim: usize,
    pub gap_magnitude: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Ratio of the noise scale along the stretched axes to the base scale.
    pub noise_anisotropy: f64,
    /// Number of stretched image-noise axes.
    pub noise_axes: usize,
    pub inter_class_separation: f64,
    /// Scale of the random null-space component added to EOS tokens.
    pub eos_null_scale: f64,
    /// Entry scale of `W_txt` relative to `1/sqrt(d_t)`.
    pub projection_scale: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            shots: 16,
            queries_per_class: 100,
            validation_per_class: 50,
            prompts_per_class: 4,
            embed_dim: 32,
            eos_dim: 48,
            gap_magnitude: 0.8,
            image_noise: 0.6,
            text_noise: 0.1,
            noise_anisotropy: 3.0,
            noise_axes: 8,
            inter_class_separation: 1.0,
            eos_null_scale: 0.5,
            projection_scale: 1.0,
            temperature: 100.0,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.shots == 0 || self.prompts_per_class == 0 {
            return bad("shots and prompts per class must be at least 1".into());
        }
        if self.embed_dim == 0 || self.embed_dim > self.eos_dim {
            return bad(format!(
                "need 0 < embed_dim <= eos_dim, got {} and {}",
                self.embed_dim, self.eos_dim
            ));
        }
        if self.noise_axes > self.embed_dim {
            return bad("noise_axes cannot exceed embed_dim".into());
        }
        let scales = [
            self.gap_magnitude,
            self.image_noise,
            self.text_noise,
            self.noise_anisotropy,
            self.inter_class_separation,
            self.eos_null_scale,
        ];
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("all scales must be finite and non-negative".into());
        }
        if !(self.projection_scale > 0.0) || !(self.temperature > 0.0) {
            return bad("projection_scale and temperature must be positive".into());
        }
        Ok(())
    }
}

/// Generator-side truth, useful for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub class_directions: EmbeddingMatrix,
    pub image_offset: Vec<f64>,
    pub text_offset: Vec<f64>,
    /// Orthonormal axes along which image noise is stretched (`axes x d`).
    pub noise_axes: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
pub struct SynthTask {
    pub task: FewShotTask,
    pub truth: GroundTruth,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Unit vector along the part of `v` orthogonal to the span of `against`.
fn orthogonal_to(mut v: Vec<f64>, against: &[Vec<f64>]) -> Vec<f64> {
    for b in orthonormal_basis(against) {
        let p: f64 = v.iter().zip(&b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(&b).for_each(|(x, y)| *x -= p * y);
    }
    unit(v)
}

fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut v = v.clone();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Gram–Schmidt on `count` random Gaussian vectors.
fn random_orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

struct Sampler<'a> {
    spec: &'a SynthSpec,
    directions: Vec<Vec<f64>>,
    image_offset: Vec<f64>,
    axes: Vec<Vec<f64>>,
}

impl Sampler<'_> {
    fn image(&self, rng: &mut ChaCha8Rng, class: usize) -> Vec<f64> {
        let d = self.spec.embed_dim;
        let base = self.spec.image_noise / (d as f64).sqrt();
        let z = gaussian(rng, d);
        let mut noise: Vec<f64> = z.iter().map(|v| v * base).collect();
        for a in &self.axes {
            let p: f64 = z.iter().zip(a).map(|(x, y)| x * y).sum();
            let stretch = (self.spec.noise_anisotropy - 1.0) * base * p;
            noise.iter_mut().zip(a).for_each(|(n, av)| *n += stretch * av);
        }
        (0..d)
            .map(|i| self.directions[class][i] + self.image_offset[i] + noise[i])
            .collect()
    }

    fn split(&self, rng: &mut ChaCha8Rng, per_class: usize) -> Result<LabeledEmbeddings> {
        let c = self.spec.classes;
        let mut rows = Vec::with_capacity(c * per_class);
        let mut labels = Vec::with_capacity(c * per_class);
        for class in 0..c {
            for _ in 0..per_class {
                rows.push(self.image(rng, class));
                labels.push(class);
            }
        }
        let m = if rows.is_empty() {
            EmbeddingMatrix::zeros(0, self.spec.embed_dim)
        } else {
            EmbeddingMatrix::from_rows(&rows)?
        };
        LabeledEmbeddings::new(m, labels, c)
    }
}

/// Generates a task deterministically from `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<SynthTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d, dt) = (spec.classes, spec.embed_dim, spec.eos_dim);

    let common = unit(gaussian(&mut rng, d));
    let directions: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            let r = gaussian(&mut rng, d);
            unit(
                common
                    .iter()
                    .zip(&r)
                    .map(|(a, b)| a + spec.inter_class_separation * b / (d as f64).sqrt())
                    .collect(),
            )
        })
        .collect();
    // gap direction orthogonal to every class direction
    let gap_dir = orthogonal_to(gaussian(&mut rng, d), &directions);
    let image_offset: Vec<f64> = gap_dir.iter().map(|v| v * spec.gap_magnitude).collect();
    let text_offset: Vec<f64> = gap_dir.iter().map(|v| -v * spec.gap_magnitude).collect();
    let axes = random_orthonormal(&mut rng, spec.noise_axes, d);

    // W_txt: d_t x d with i.i.d. Gaussian entries has full column rank almost surely
    let w_scale = spec.projection_scale / (dt as f64).sqrt();
    let w_txt = EmbeddingMatrix::new(dt, d, gaussian(&mut rng, dt * d).iter().map(|v| v * w_scale).collect())?;
    let w_pinv = pseudo_inverse(&w_txt, DEFAULT_RANK_TOLERANCE)?;
    // I - W W⁺ projects onto vectors e with e · W = 0
    let range_proj = w_txt.matmul(&w_pinv)?;

    let p = spec.prompts_per_class;
    let text_sigma = spec.text_noise / (d as f64).sqrt();
    let mut eos_rows = Vec::with_capacity(c * p);
    for class in 0..c {
        for _ in 0..p {
            let noise = gaussian(&mut rng, d);
            let target: Vec<f64> = (0..d)
                .map(|i| directions[class][i] + text_offset[i] + text_sigma * noise[i])
                .collect();
            let target = EmbeddingMatrix::new(1, d, target)?;
            let pre_image = target.matmul(&w_pinv)?;
            let z = EmbeddingMatrix::new(1, dt, gaussian(&mut rng, dt))?;
            let z_range = z.matmul(&range_proj)?;
            let null_scale = spec.eos_null_scale * pre_image.frobenius_norm() / (dt as f64).sqrt();
            let row: Vec<f64> = (0..dt)
                .map(|i| pre_image.get(0, i) + null_scale * (z.get(0, i) - z_range.get(0, i)))
                .collect();
            eos_rows.push(row);
        }
    }
    let prompts = PromptTokens::new(EmbeddingMatrix::from_rows(&eos_rows)?, p)?;
    let text = prompts.class_means().matmul(&w_txt)?;

    let sampler = Sampler {
        spec,
        directions: directions.clone(),
        image_offset: image_offset.clone(),
        axes: axes.clone(),
    };
    let support = sampler.split(&mut rng, spec.shots)?;
    let validation = sampler.split(&mut rng, spec.validation_per_class)?;
    let test = sampler.split(&mut rng, spec.queries_per_class)?;

    let provenance = serde_json::json!({ "synthetic": spec });
    let task = FewShotTask::new(
        TaskParts {
            name: format!("synthetic-seed{}", spec.seed),
            encoder: "synthetic".into(),
            class_names: (0..c).map(|i| format!("class_{i:02}")).collect(),
            shots_per_class: spec.shots,
            support,
            validation,
            test,
            prompts,
            text,
            text_projection: w_txt,
            temperature: spec.temperature,
            seed: spec.seed,
            provenance,
        },
        DEFAULT_RANK_TOLERANCE,
    )?;
    Ok(SynthTask {
        task,
        truth: GroundTruth {
            class_directions: EmbeddingMatrix::from_rows(&directions)?,
            image_offset,
            text_offset,
            noise_axes: if axes.is_empty() {
                EmbeddingMatrix::zeros(0, d)
            } else {
                EmbeddingMatrix::from_rows(&axes)?
            },
        },
    })
}

/// Random label permutation helper for null-hypothesis checks.
pub fn shuffled_labels(labels: &[usize], seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = labels.to_vec();
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Independent nearest-centroid oracle.
///
/// Written with plain loops and no shared code with the inference module so
/// it can serve as a reference for it.
pub mod oracle {
    use crate::error::{Error, Result};
    use crate::tensor::EmbeddingMatrix;

    /// Class means computed with explicit loops.
    pub fn class_means(rows: &EmbeddingMatrix, labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
        let d = rows.cols();
        let mut sums = vec![vec![0.0; d]; classes];
        let mut counts = vec![0usize; classes];
        for i in 0..rows.rows() {
            let c = labels[i];
            counts[c] += 1;
            for j in 0..d {
                sums[c][j] += rows.get(i, j);
            }
        }
        for c in 0..classes {
            if counts[c] > 0 {
                for j in 0..d {
                    sums[c][j] /= counts[c] as f64;
                }
            }
        }
        sums
    }

    /// Brute-force cosine argmax per query; ties go to the lowest index.
    pub fn nearest_centroid_predictions(queries: &EmbeddingMatrix, centroids: &[Vec<f64>]) -> Result<Vec<usize>> {
        let d = queries.cols();
        if centroids.iter().any(|c| c.len() != d) {
            return Err(Error::ShapeMismatch("centroid and query dims differ".into()));
        }
        let mut out = Vec::with_capacity(queries.rows());
        for i in 0..queries.rows() {
            let mut q_norm = 0.0;
            for j in 0..d {
                q_norm += queries.get(i, j) * queries.get(i, j);
            }
            let q_norm = q_norm.sqrt();
            let mut best = 0;
            let mut best_cos = f64::NEG_INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let mut dot = 0.0;
                let mut c_norm = 0.0;
                for j in 0..d {
                    dot += queries.get(i, j) * centroid[j];
                    c_norm += centroid[j] * centroid[j];
                }
                let cos = dot / (q_norm * c_norm.sqrt());
                if cos > best_cos {
                    best_cos = cos;
                    best = c;
                }
            }
            out.push(best);
        }
        Ok(out)
    }

    pub fn nearest_centroid(queries: &EmbeddingMatrix, centroids: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if labels.len() != queries.rows() {
            return Err(Error::ShapeMismatch("one label per query required".into()));
        }
        if labels.is_empty() {
            return Err(Error::EmptyInput("oracle::nearest_centroid"));
        }
        let preds = nearest_centroid_predictions(queries, centroids)?;
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Rows of a matrix as owned vectors (for passing text embeddings as centroids).
    pub fn rows(m: &EmbeddingMatrix) -> Vec<Vec<f64>> {
        (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect()
    }
}
