//! Image-to-text bridging.
//!
//! An image embedding `f` (length `d`) is pulled back through the
//! pseudo-inverse of the text projection into EOS-token space, rescaled to
//! the average norm of genuine EOS tokens, and pushed forward through the
//! text projection again:
//!
//! ```text
//! u     = f · W⁺            (+ τ_c for trained few-shot bridging)
//! f_eos = ‖T_eos‖ / ‖u‖ · u
//! f_txt = f_eos · W_txt
//! ```
//!
//! With the untrained pseudo-inverse and a full-column-rank `W_txt`,
//! `f_txt` is a positive multiple of `f`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{norm, EmbeddingMatrix, ProjectionPair};

/// Rows whose inverse image is shorter than this are rejected.
pub const ZERO_NORM_GUARD: f64 = 1e-12;

/// Average EOS-token norm used to rescale pseudo-EOS tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EosNormEstimate {
    pub value: f64,
    pub per_class: Vec<f64>,
}

/// EOS tokens of every prompt of every class, flattened class-major to
/// `(classes * prompts_per_class) x d_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTokens {
    pub tokens: EmbeddingMatrix,
    pub prompts_per_class: usize,
}

impl PromptTokens {
    pub fn new(tokens: EmbeddingMatrix, prompts_per_class: usize) -> Result<Self> {
        if prompts_per_class == 0 {
            return Err(Error::EmptyClass(0));
        }
        if tokens.rows() % prompts_per_class != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} prompt tokens is not a multiple of {} prompts per class",
                tokens.rows(),
                prompts_per_class
            )));
        }
        Ok(Self {
            tokens,
            prompts_per_class,
        })
    }

    pub fn classes(&self) -> usize {
        self.tokens.rows() / self.prompts_per_class
    }

    /// Per-class mean token (`classes x d_t`).
    pub fn class_means(&self) -> EmbeddingMatrix {
        let p = self.prompts_per_class;
        let dt = self.tokens.cols();
        let mut out = EmbeddingMatrix::zeros(self.classes(), dt);
        for c in 0..self.classes() {
            let row = out.row_mut(c);
            for k in 0..p {
                for (o, v) in row.iter_mut().zip(self.tokens.row(c * p + k)) {
                    *o += v / p as f64;
                }
            }
        }
        out
    }
}

/// Mean EOS norm over every (class, prompt) pair, plus the per-class means.
pub fn estimate_eos_norm(prompts: &PromptTokens) -> Result<EosNormEstimate> {
    let classes = prompts.classes();
    if classes == 0 {
        return Err(Error::EmptyClass(0));
    }
    let p = prompts.prompts_per_class;
    let norms = prompts.tokens.row_norms();
    let per_class: Vec<f64> = norms
        .chunks(p)
        .map(|chunk| chunk.iter().sum::<f64>() / p as f64)
        .collect();
    let value = norms.iter().sum::<f64>() / norms.len() as f64;
    if !(value > 0.0) {
        return Err(Error::EmptyClass(
            per_class.iter().position(|v| *v == 0.0).unwrap_or(0),
        ));
    }
    Ok(EosNormEstimate { value, per_class })
}

/// Bridged rows: pseudo-EOS tokens (`n x d_t`) and their projections (`n x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Bridged {
    pub eos: EmbeddingMatrix,
    pub txt: EmbeddingMatrix,
}

/// Stable identifier for a projection matrix, used to pair models with the
/// `W_txt` they were trained against.
pub fn projection_fingerprint(w: &EmbeddingMatrix) -> String {
    let mut hasher = Sha256::new();
    hasher.update((w.rows() as u64).to_le_bytes());
    hasher.update((w.cols() as u64).to_le_bytes());
    for v in w.data() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Trainable bridge parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeModel {
    /// `d x d_t`, initialised to the pseudo-inverse of `W_txt`.
    pub inverse_projection: EmbeddingMatrix,
    /// One bias row per class in EOS space (`classes x d_t`).
    pub class_bias: EmbeddingMatrix,
    pub eos_norm: EosNormEstimate,
    pub forward_projection_ref: String,
}

impl BridgeModel {
    /// The training-free bridge: `Ŵ⁺ = W⁺`, `τ̂ = 0`.
    pub fn training_free(proj: &ProjectionPair, eos_norm: EosNormEstimate, classes: usize) -> Self {
        Self {
            inverse_projection: proj.inverse.clone(),
            class_bias: EmbeddingMatrix::zeros(classes, proj.eos_dim()),
            eos_norm,
            forward_projection_ref: projection_fingerprint(&proj.forward),
        }
    }

    pub fn classes(&self) -> usize {
        self.class_bias.rows()
    }

    pub fn validate_against(&self, w_txt: &EmbeddingMatrix) -> Result<()> {
        let (dt, d) = w_txt.shape();
        if self.inverse_projection.shape() != (d, dt) {
            return Err(Error::ShapeMismatch(format!(
                "inverse projection is {:?}, expected {:?}",
                self.inverse_projection.shape(),
                (d, dt)
            )));
        }
        if self.class_bias.cols() != dt {
            return Err(Error::ShapeMismatch(format!(
                "class bias has {} columns, expected {dt}",
                self.class_bias.cols()
            )));
        }
        if !self.class_bias.all_finite() || !self.inverse_projection.all_finite() {
            return Err(Error::NonFinite("bridge model"));
        }
        Ok(())
    }

    /// Per-class L2 norm of the bias rows.
    pub fn bias_norms(&self) -> Vec<f64> {
        self.class_bias.row_norms()
    }

    /// Number of trainable scalars (`d·d_t + C·d_t`).
    pub fn parameter_count(&self) -> usize {
        self.inverse_projection.data().len() + self.class_bias.data().len()
    }
}

fn check_eos_norm(eos_norm: f64) -> Result<()> {
    if eos_norm > 0.0 && eos_norm.is_finite() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!("eos norm must be positive, got {eos_norm}")))
    }
}

fn bridge_rows(
    images: &EmbeddingMatrix,
    inverse: &EmbeddingMatrix,
    bias: Option<(&EmbeddingMatrix, &[usize])>,
    forward: &EmbeddingMatrix,
    eos_norm: f64,
) -> Result<Bridged> {
    check_eos_norm(eos_norm)?;
    if images.cols() != inverse.rows() {
        return Err(Error::DimensionMismatch {
            op: "bridge",
            left: images.shape(),
            right: inverse.shape(),
        });
    }
    let mut eos = images.matmul(inverse)?;
    if let Some((bias, classes)) = bias {
        if classes.len() != images.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} class ids for {} rows",
                classes.len(),
                images.rows()
            )));
        }
        for (r, &c) in classes.iter().enumerate() {
            if c >= bias.rows() {
                return Err(Error::UnknownClass {
                    class: c,
                    classes: bias.rows(),
                });
            }
            for (u, b) in eos.row_mut(r).iter_mut().zip(bias.row(c)) {
                *u += b;
            }
        }
    }
    for r in 0..eos.rows() {
        let row = eos.row_mut(r);
        let n = norm(row);
        if n < ZERO_NORM_GUARD {
            return Err(Error::ZeroInverseImage(r));
        }
        let scale = eos_norm / n;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    let txt = eos.matmul(forward)?;
    Ok(Bridged { eos, txt })
}

/// Training-free bridging with the exact pseudo-inverse.
pub fn bridge_free(images: &EmbeddingMatrix, proj: &ProjectionPair, eos_norm: f64) -> Result<Bridged> {
    bridge_rows(images, &proj.inverse, None, &proj.forward, eos_norm)
}

/// Bridging with trained parameters.
///
/// `class_ids` adds the class-specific bias of each row before rescaling;
/// pass `None` for query images, whose class is unknown.
pub fn bridge_trained(
    images: &EmbeddingMatrix,
    class_ids: Option<&[usize]>,
    model: &BridgeModel,
    w_txt: &EmbeddingMatrix,
) -> Result<Bridged> {
    let bias = class_ids.map(|ids| (&model.class_bias, ids));
    bridge_rows(
        images,
        &model.inverse_projection,
        bias,
        w_txt,
        model.eos_norm.value,
    )
}
