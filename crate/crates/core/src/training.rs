//! Supervised refinement of the bridge.
//!
//! The trainable parameters are the inverse projection `Ŵ⁺` (`d x d_t`) and
//! one bias row per class `τ̂` (`C x d_t`). Few-shot images are bridged with
//! their class bias and the objective is
//!
//! ```text
//! L = λ_it·L_img + (1 - λ_it)·(L_txte + L_txtp)/2 + λ_c·L_cons + λ_b·L_bias
//! ```
//!
//! Gradients are derived by hand through the fixed computation graph; the
//! unit tests check them against central finite differences.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeModel, ZERO_NORM_GUARD};
use crate::error::{Error, Result};
use crate::inference::{BlendConfig, ClassifierState};
use crate::task::{classwise_mean, FewShotTask};
use crate::tensor::{dot, log_softmax, normalize_rows_strict, EmbeddingMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub lambda_it: f64,
    pub lambda_c: f64,
    pub lambda_b: f64,
    /// Logit scale applied to every cosine table before cross-entropy.
    pub temperature: f64,
    pub seed: u64,
    pub adamw_beta1: f64,
    pub adamw_beta2: f64,
    pub adamw_eps: f64,
    /// Decoupled decay, applied to the inverse projection only.
    pub weight_decay: f64,
    pub eval_interval: usize,
    /// Blend used to rank epochs on the validation split.
    pub validation_blend: BlendConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            learning_rate: 0.15e-4,
            warmup_epochs: 500,
            lambda_it: 0.5,
            lambda_c: 0.1,
            lambda_b: 0.1,
            temperature: 100.0,
            seed: 0,
            adamw_beta1: 0.9,
            adamw_beta2: 0.999,
            adamw_eps: 1e-8,
            weight_decay: 0.01,
            eval_interval: 25,
            validation_blend: BlendConfig::bridged_shots_only(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidTrainConfig(msg.to_string()));
        if !(0.0..=1.0).contains(&self.lambda_it) {
            return bad("lambda_it must be in [0, 1]");
        }
        if !(self.lambda_c >= 0.0 && self.lambda_b >= 0.0) {
            return bad("lambda_c and lambda_b must be non-negative");
        }
        if self.warmup_epochs > self.epochs {
            return bad("warmup_epochs must not exceed epochs");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.adamw_beta1) || !(0.0..1.0).contains(&self.adamw_beta2) {
            return bad("AdamW betas must be in [0, 1)");
        }
        if !(self.adamw_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adamw_eps must be positive and weight_decay non-negative");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1");
        }
        self.validation_blend.validate()
    }

    /// Learning rate used at `epoch` (0-based): linear ramp over the warmup,
    /// constant afterwards.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.learning_rate * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_img: f64,
    pub l_txte: f64,
    pub l_txtp: f64,
    pub l_cons: f64,
    pub l_bias: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(
        l_img: f64,
        l_txte: f64,
        l_txtp: f64,
        l_cons: f64,
        l_bias: f64,
        cfg: &TrainConfig,
    ) -> Self {
        let total = cfg.lambda_it * l_img
            + (1.0 - cfg.lambda_it) * (l_txte + l_txtp) / 2.0
            + cfg.lambda_c * l_cons
            + cfg.lambda_b * l_bias;
        Self {
            l_img,
            l_txte,
            l_txtp,
            l_cons,
            l_bias,
            total,
        }
    }
}

/// Gradients of the total loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub inverse_projection: EmbeddingMatrix,
    pub class_bias: EmbeddingMatrix,
}

/// `(1/C) Σ_c (‖τ_c‖ - mean)²`.
pub fn bias_variance(bias: &EmbeddingMatrix) -> f64 {
    let norms = bias.row_norms();
    if norms.is_empty() {
        return 0.0;
    }
    let c = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / c;
    norms.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / c
}

/// Inputs of the loss that stay fixed during training.
#[derive(Debug, Clone)]
pub struct LossProblem {
    shots: EmbeddingMatrix,
    labels: Vec<usize>,
    counts: Vec<usize>,
    text_projection: EmbeddingMatrix,
    eos_norm: f64,
    centroids_img: EmbeddingMatrix,
    class_eos: EmbeddingMatrix,
    text: EmbeddingMatrix,
}

/// Cross-entropy of `temperature · logits` against integer targets, plus
/// `∂/∂logits` scaled by `weight`.
fn ce_with_grad(
    logits: &EmbeddingMatrix,
    targets: &[usize],
    temperature: f64,
    weight: f64,
    grad: bool,
) -> (f64, Option<EmbeddingMatrix>) {
    let rows = logits.rows();
    let mut loss = 0.0;
    let mut g = grad.then(|| EmbeddingMatrix::zeros(rows, logits.cols()));
    for (r, &t) in targets.iter().enumerate() {
        let ls = log_softmax(logits.row(r), temperature);
        loss -= ls[t];
        if let Some(g) = g.as_mut() {
            let scale = weight * temperature / rows as f64;
            for (j, (gv, l)) in g.row_mut(r).iter_mut().zip(&ls).enumerate() {
                let y = if j == t { 1.0 } else { 0.0 };
                *gv = scale * (l.exp() - y);
            }
        }
    }
    (loss / rows as f64, g)
}

/// Backward pass of `y = x / ‖x‖` row by row: `dx = (dy - y (y·dy)) / ‖x‖`.
fn normalize_backward(normalized: &EmbeddingMatrix, norms: &[f64], d_normalized: &EmbeddingMatrix) -> EmbeddingMatrix {
    let mut out = d_normalized.clone();
    for r in 0..out.rows() {
        let y = normalized.row(r);
        let proj = dot(y, d_normalized.row(r));
        for (o, yv) in out.row_mut(r).iter_mut().zip(y) {
            *o = (*o - yv * proj) / norms[r];
        }
    }
    out
}

fn add_assign(a: &mut EmbeddingMatrix, b: &EmbeddingMatrix) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

impl LossProblem {
    pub fn new(
        shots: EmbeddingMatrix,
        labels: Vec<usize>,
        text_projection: EmbeddingMatrix,
        class_eos: &EmbeddingMatrix,
        text: &EmbeddingMatrix,
        eos_norm: f64,
    ) -> Result<Self> {
        let classes = class_eos.rows();
        if text.rows() != classes {
            return Err(Error::ShapeMismatch(format!(
                "{} EOS rows but {} text rows",
                classes,
                text.rows()
            )));
        }
        if labels.len() != shots.rows() {
            return Err(Error::ShapeMismatch("one label per shot required".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let (dt, d) = text_projection.shape();
        if shots.cols() != d || class_eos.cols() != dt || text.cols() != d {
            return Err(Error::ShapeMismatch("shots, EOS tokens and text must match W_txt".into()));
        }
        let mut counts = vec![0; classes];
        for &l in &labels {
            counts[l] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        for m in [&shots, class_eos, text, &text_projection] {
            if !m.all_finite() {
                return Err(Error::NonFinite("training inputs"));
            }
        }
        let centroids_img = normalize_rows_strict(&classwise_mean(&shots, &labels, classes), "image centroids")?;
        Ok(Self {
            centroids_img,
            class_eos: normalize_rows_strict(class_eos, "class EOS tokens")?,
            text: normalize_rows_strict(text, "class text embeddings")?,
            shots,
            labels,
            counts,
            text_projection,
            eos_norm,
        })
    }

    pub fn for_task(task: &FewShotTask) -> Result<Self> {
        Self::new(
            task.support.embeddings.clone(),
            task.support.labels.clone(),
            task.projection.forward.clone(),
            &task.class_eos,
            &task.text,
            task.eos_norm.value,
        )
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    fn class_mean(&self, rows: &EmbeddingMatrix) -> EmbeddingMatrix {
        classwise_mean(rows, &self.labels, self.classes())
    }

    pub fn losses(&self, inverse: &EmbeddingMatrix, bias: &EmbeddingMatrix, cfg: &TrainConfig) -> Result<LossBreakdown> {
        Ok(self.run(inverse, bias, cfg, false)?.0)
    }

    pub fn losses_and_gradients(
        &self,
        inverse: &EmbeddingMatrix,
        bias: &EmbeddingMatrix,
        cfg: &TrainConfig,
    ) -> Result<(LossBreakdown, Gradients)> {
        let (losses, grads) = self.run(inverse, bias, cfg, true)?;
        Ok((losses, grads.expect("gradients requested")))
    }

    fn run(
        &self,
        inverse: &EmbeddingMatrix,
        bias: &EmbeddingMatrix,
        cfg: &TrainConfig,
        want_grad: bool,
    ) -> Result<(LossBreakdown, Option<Gradients>)> {
        let (dt, d) = self.text_projection.shape();
        if inverse.shape() != (d, dt) || bias.shape() != (self.classes(), dt) {
            return Err(Error::ShapeMismatch(format!(
                "parameters {:?}/{:?} do not match d={d}, d_t={dt}, C={}",
                inverse.shape(),
                bias.shape(),
                self.classes()
            )));
        }
        let t = cfg.temperature;
        let eta = self.eos_norm;

        // bridge every shot with its class bias
        let mut u = self.shots.matmul(inverse)?;
        for (r, &c) in self.labels.iter().enumerate() {
            for (x, b) in u.row_mut(r).iter_mut().zip(bias.row(c)) {
                *x += b;
            }
        }
        let u_norms = u.row_norms();
        if let Some(r) = u_norms.iter().position(|&n| !(n >= ZERO_NORM_GUARD)) {
            return Err(Error::ZeroInverseImage(r));
        }
        let mut eos = u.clone();
        for r in 0..eos.rows() {
            let s = eta / u_norms[r];
            eos.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        let txt = eos.matmul(&self.text_projection)?;

        let mean_txt = self.class_mean(&txt);
        let mean_eos = self.class_mean(&eos);
        let mean_txt_norms = mean_txt.row_norms();
        let mean_eos_norms = mean_eos.row_norms();
        let n_mean_txt = normalize_rows_strict(&mean_txt, "bridged text centroids")?;
        let n_mean_eos = normalize_rows_strict(&mean_eos, "bridged EOS centroids")?;
        let txt_norms = txt.row_norms();
        let n_txt = normalize_rows_strict(&txt, "bridged shots")?;

        let class_ids: Vec<usize> = (0..self.classes()).collect();
        let z_img = self.centroids_img.matmul_transposed(&n_mean_txt)?;
        let z_txte = n_mean_eos.matmul_transposed(&self.class_eos)?;
        let z_txtp = n_mean_txt.matmul_transposed(&self.text)?;
        let z_cons = n_txt.matmul_transposed(&self.centroids_img)?;

        let half_text = (1.0 - cfg.lambda_it) / 2.0;
        let (l_img, g_img) = ce_with_grad(&z_img, &class_ids, t, cfg.lambda_it, want_grad);
        let (l_txte, g_txte) = ce_with_grad(&z_txte, &class_ids, t, half_text, want_grad);
        let (l_txtp, g_txtp) = ce_with_grad(&z_txtp, &class_ids, t, half_text, want_grad);
        let (l_cons, g_cons) = ce_with_grad(&z_cons, &self.labels, t, cfg.lambda_c, want_grad);
        let l_bias = bias_variance(bias);

        let losses = LossBreakdown::compose(l_img, l_txte, l_txtp, l_cons, l_bias, cfg);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        if !want_grad {
            return Ok((losses, None));
        }
        let (g_img, g_txte, g_txtp, g_cons) = (
            g_img.unwrap(),
            g_txte.unwrap(),
            g_txtp.unwrap(),
            g_cons.unwrap(),
        );

        // z_img[i, j] = c_i · m̂_j  and  z_txtp[i, j] = m̂_i · t_j
        let mut d_n_mean_txt = g_img.transposed_matmul(&self.centroids_img)?;
        add_assign(&mut d_n_mean_txt, &g_txtp.matmul(&self.text)?);
        let d_n_mean_eos = g_txte.matmul(&self.class_eos)?;
        let d_n_txt = g_cons.matmul(&self.centroids_img)?;

        let d_mean_txt = normalize_backward(&n_mean_txt, &mean_txt_norms, &d_n_mean_txt);
        let d_mean_eos = normalize_backward(&n_mean_eos, &mean_eos_norms, &d_n_mean_eos);
        let mut d_txt = normalize_backward(&n_txt, &txt_norms, &d_n_txt);
        for (r, &c) in self.labels.iter().enumerate() {
            let k = self.counts[c] as f64;
            for (g, m) in d_txt.row_mut(r).iter_mut().zip(d_mean_txt.row(c)) {
                *g += m / k;
            }
        }
        let mut d_eos = d_txt.matmul_transposed(&self.text_projection)?;
        for (r, &c) in self.labels.iter().enumerate() {
            let k = self.counts[c] as f64;
            for (g, m) in d_eos.row_mut(r).iter_mut().zip(d_mean_eos.row(c)) {
                *g += m / k;
            }
        }
        // eos = η · u/‖u‖, so du = η · normalize_backward(û, ‖u‖, d_eos)
        let mut u_hat = eos.clone();
        u_hat.data_mut().iter_mut().for_each(|v| *v /= eta);
        let mut d_u = normalize_backward(&u_hat, &u_norms, &d_eos);
        d_u.data_mut().iter_mut().for_each(|v| *v *= eta);

        let d_inverse = self.shots.transposed_matmul(&d_u)?;
        let mut d_bias = EmbeddingMatrix::zeros(self.classes(), dt);
        for (r, &c) in self.labels.iter().enumerate() {
            for (g, v) in d_bias.row_mut(c).iter_mut().zip(d_u.row(r)) {
                *g += v;
            }
        }
        if cfg.lambda_b != 0.0 {
            let norms = bias.row_norms();
            let classes = norms.len() as f64;
            let mean = norms.iter().sum::<f64>() / classes;
            for (c, &r) in norms.iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let coeff = cfg.lambda_b * 2.0 / classes * (r - mean) / r;
                for (g, b) in d_bias.row_mut(c).iter_mut().zip(bias.row(c)) {
                    *g += coeff * b;
                }
            }
        }
        Ok((
            losses,
            Some(Gradients {
                inverse_projection: d_inverse,
                class_bias: d_bias,
            }),
        ))
    }
}

/// Loss breakdown of `model` on the task's support set.
pub fn compute_losses(task: &FewShotTask, model: &BridgeModel, cfg: &TrainConfig) -> Result<LossBreakdown> {
    LossProblem::for_task(task)?.losses(&model.inverse_projection, &model.class_bias, cfg)
}

/// Exact gradients of the total loss with respect to `Ŵ⁺` and `τ̂`.
pub fn gradients(task: &FewShotTask, model: &BridgeModel, cfg: &TrainConfig) -> Result<Gradients> {
    Ok(LossProblem::for_task(task)?
        .losses_and_gradients(&model.inverse_projection, &model.class_bias, cfg)?
        .1)
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, param_sizes: &[usize]) -> Self {
        Self {
            beta1: cfg.adamw_beta1,
            beta2: cfg.adamw_beta2,
            eps: cfg.adamw_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            moments: param_sizes.iter().map(|&n| (vec![0.0; n], vec![0.0; n])).collect(),
        }
    }

    /// Advances the step counter; call once per optimisation step before
    /// updating the parameter groups.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates parameter group `group` in place.
    pub fn update(&mut self, group: usize, params: &mut [f64], grads: &[f64], lr: f64, decay: bool) {
        let (m, v) = &mut self.moments[group];
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            if decay {
                params[i] -= lr * self.weight_decay * params[i];
            }
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossBreakdown,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch.
    pub model: BridgeModel,
    /// Parameters after the last epoch.
    pub final_model: BridgeModel,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub history: Vec<EpochRecord>,
}

/// Writes `epoch,l_img,l_txte,l_txtp,l_cons,l_bias,total,val_acc`; epochs
/// without a validation pass leave `val_acc` empty.
pub fn write_history_csv(history: &[EpochRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,l_img,l_txte,l_txtp,l_cons,l_bias,total,val_acc")?;
    for r in history {
        let l = &r.losses;
        let acc = r.val_acc.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch, l.l_img, l.l_txte, l.l_txtp, l.l_cons, l.l_bias, l.total, acc
        )?;
    }
    Ok(())
}

/// Writes `class_index,class_name,bias_norm`.
pub fn write_bias_norms_csv(model: &BridgeModel, class_names: &[String], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "class_index,class_name,bias_norm")?;
    for (c, n) in model.bias_norms().iter().enumerate() {
        let name = class_names.get(c).map(String::as_str).unwrap_or("");
        writeln!(out, "{c},{},{n}", csv_field(name))?;
    }
    Ok(())
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn validation_accuracy(task: &FewShotTask, model: &BridgeModel, blend: BlendConfig) -> Result<f64> {
    let state = ClassifierState::for_task(task, model, blend)?;
    Ok(state
        .evaluate(&task.validation.embeddings, &task.validation.labels)?
        .accuracy)
}

/// Full-batch AdamW training from the training-free initialisation, keeping
/// the parameters of the best validation epoch (earliest on ties).
pub fn train(task: &FewShotTask, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if task.validation.is_empty() {
        return Err(Error::NoValidationSplit);
    }
    let problem = LossProblem::for_task(task)?;
    let mut model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
    let mut optimizer = AdamW::new(
        cfg,
        &[model.inverse_projection.data().len(), model.class_bias.data().len()],
    );

    let mut history = Vec::with_capacity(cfg.epochs + 1);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    for epoch in 0..=cfg.epochs {
        let last = epoch == cfg.epochs;
        let (losses, grads) = if last {
            (problem.losses(&model.inverse_projection, &model.class_bias, cfg), None)
        } else {
            match problem.losses_and_gradients(&model.inverse_projection, &model.class_bias, cfg) {
                Ok((l, g)) => (Ok(l), Some(g)),
                Err(e) => (Err(e), None),
            }
        };
        let losses = match losses {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(Error::DivergedLoss(epoch)),
            Err(e) => return Err(e),
        };

        let val_acc = if epoch % cfg.eval_interval == 0 || last {
            let acc = validation_accuracy(task, &model, cfg.validation_blend)?;
            if acc > best.2 {
                best = (model.clone(), epoch, acc);
            }
            Some(acc)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            losses,
            val_acc,
        });

        if let Some(g) = grads {
            let lr = cfg.learning_rate_at(epoch);
            optimizer.begin_step();
            optimizer.update(
                0,
                model.inverse_projection.data_mut(),
                g.inverse_projection.data(),
                lr,
                true,
            );
            optimizer.update(1, model.class_bias.data_mut(), g.class_bias.data(), lr, false);
            if !model.inverse_projection.all_finite() || !model.class_bias.all_finite() {
                return Err(Error::DivergedLoss(epoch));
            }
        }
    }
    let (best_model, best_epoch, best_val_acc) = best;
    Ok(TrainOutcome {
        model: best_model,
        final_model: model,
        best_epoch,
        best_val_acc,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cross_entropy_rows, pseudo_inverse, DEFAULT_RANK_TOLERANCE};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    struct Instance {
        problem: LossProblem,
        inverse: EmbeddingMatrix,
        bias: EmbeddingMatrix,
    }

    fn instance(seed: u64, classes: usize, shots: usize, d: usize, dt: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, dt, d);
        let images = random(&mut rng, classes * shots, d);
        let labels = (0..classes * shots).map(|i| i / shots).collect();
        let eos = random(&mut rng, classes, dt);
        let text = random(&mut rng, classes, d);
        let mut inverse = pseudo_inverse(&w, DEFAULT_RANK_TOLERANCE).unwrap();
        let jitter = random(&mut rng, d, dt);
        inverse = EmbeddingMatrix::new(
            d,
            dt,
            inverse.data().iter().zip(jitter.data()).map(|(a, b)| a + 0.1 * b).collect(),
        )
        .unwrap();
        let bias = random(&mut rng, classes, dt).scaled(0.3);
        Instance {
            problem: LossProblem::new(images, labels, w, &eos, &text, 3.0).unwrap(),
            inverse,
            bias,
        }
    }

    fn test_cfg() -> TrainConfig {
        TrainConfig {
            temperature: 10.0,
            ..TrainConfig::default()
        }
    }

    /// Central finite differences over every parameter coordinate.
    fn finite_difference(inst: &Instance, cfg: &TrainConfig, h: f64) -> (Vec<f64>, Vec<f64>) {
        let f = |w: &EmbeddingMatrix, b: &EmbeddingMatrix| inst.problem.losses(w, b, cfg).unwrap().total;
        let mut gw = Vec::new();
        for i in 0..inst.inverse.data().len() {
            let mut plus = inst.inverse.clone();
            plus.data_mut()[i] += h;
            let mut minus = inst.inverse.clone();
            minus.data_mut()[i] -= h;
            gw.push((f(&plus, &inst.bias) - f(&minus, &inst.bias)) / (2.0 * h));
        }
        let mut gb = Vec::new();
        for i in 0..inst.bias.data().len() {
            let mut plus = inst.bias.clone();
            plus.data_mut()[i] += h;
            let mut minus = inst.bias.clone();
            minus.data_mut()[i] -= h;
            gb.push((f(&inst.inverse, &plus) - f(&inst.inverse, &minus)) / (2.0 * h));
        }
        (gw, gb)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = test_cfg();
        let inst = instance(11, 3, 2, 5, 7);
        let (_, g) = inst.problem.losses_and_gradients(&inst.inverse, &inst.bias, &cfg).unwrap();
        let (fw, fb) = finite_difference(&inst, &cfg, 1e-5);
        for (a, n) in g.inverse_projection.data().iter().zip(&fw).chain(g.class_bias.data().iter().zip(&fb)) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn loss_composition_identity() {
        let cfg = test_cfg();
        let inst = instance(2, 2, 1, 3, 4);
        let l = inst.problem.losses(&inst.inverse, &inst.bias, &cfg).unwrap();
        let expected = 0.5 * l.l_img + 0.5 * (l.l_txte + l.l_txtp) / 2.0 + 0.1 * l.l_cons + 0.1 * l.l_bias;
        assert!((l.total - expected).abs() < 1e-12);
        for v in [l.l_img, l.l_txte, l.l_txtp, l.l_cons, l.l_bias] {
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn bias_variance_examples() {
        let equal = EmbeddingMatrix::from_rows(&[[3.0, 4.0], [0.0, 5.0], [5.0, 0.0]]).unwrap();
        assert_eq!(bias_variance(&equal), 0.0);
        let unequal = EmbeddingMatrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        assert!((bias_variance(&unequal) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equal_bias_norms_give_zero_bias_gradient() {
        let inst = instance(4, 3, 1, 4, 4);
        let bias = EmbeddingMatrix::from_rows(&[[1.0, 0.0, 0.0, 0.0], [0.0, -1.0, 0.0, 0.0], [0.0, 0.0, 0.6, 0.8]])
            .unwrap();
        let with_reg = TrainConfig {
            lambda_b: 1.0,
            ..test_cfg()
        };
        let without_reg = TrainConfig {
            lambda_b: 0.0,
            ..test_cfg()
        };
        let (l, g) = inst.problem.losses_and_gradients(&inst.inverse, &bias, &with_reg).unwrap();
        let (_, g0) = inst.problem.losses_and_gradients(&inst.inverse, &bias, &without_reg).unwrap();
        assert_eq!(l.l_bias, 0.0);
        assert_eq!(g.class_bias, g0.class_bias);
    }

    #[test]
    fn orthogonal_two_class_image_loss_closed_form() {
        // C=2, K=1, W = I, Ŵ⁺ = W⁺ = I, τ = 0, temperature 1
        let w = EmbeddingMatrix::identity(2);
        let shots = EmbeddingMatrix::identity(2);
        let problem = LossProblem::new(shots, vec![0, 1], w.clone(), &w, &w, 1.0).unwrap();
        let cfg = TrainConfig {
            temperature: 1.0,
            ..TrainConfig::default()
        };
        let l = problem.losses(&w, &EmbeddingMatrix::zeros(2, 2), &cfg).unwrap();
        let e = std::f64::consts::E;
        assert!((l.l_img - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l.l_img - 0.3133).abs() < 1e-4);
        let direct = cross_entropy_rows(&w, &w, 1.0).unwrap();
        assert!((l.l_img - direct).abs() < 1e-12);
    }

    #[test]
    fn saturated_image_loss_has_vanishing_bias_gradient() {
        let w = EmbeddingMatrix::identity(2);
        let problem = LossProblem::new(w.clone(), vec![0, 1], w.clone(), &w, &w, 1.0).unwrap();
        let cfg = TrainConfig {
            lambda_it: 1.0,
            lambda_c: 0.0,
            lambda_b: 0.0,
            temperature: 50.0,
            ..TrainConfig::default()
        };
        let (_, g) = problem.losses_and_gradients(&w, &EmbeddingMatrix::zeros(2, 2), &cfg).unwrap();
        for n in g.class_bias.row_norms() {
            assert!(n < 1e-6, "bias gradient norm {n}");
        }
    }

    #[test]
    fn warmup_schedule() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 4,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 0.25);
        assert_eq!(cfg.learning_rate_at(3), 1.0);
        assert_eq!(cfg.learning_rate_at(9), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lambda_it: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&cfg, &[2]);
        let mut p = vec![1.0, -1.0];
        opt.begin_step();
        opt.update(0, &mut p, &[0.5, -2.0], 0.1, true);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn history_csv_header() {
        let mut out = Vec::new();
        write_history_csv(
            &[EpochRecord {
                epoch: 0,
                losses: LossBreakdown::default(),
                val_acc: None,
            }],
            &mut out,
        )
        .unwrap();
        let s = String::from_utf8(out).unwrap();
        assert_eq!(s.lines().next().unwrap(), "epoch,l_img,l_txte,l_txtp,l_cons,l_bias,total,val_acc");
        assert_eq!(s.lines().nth(1).unwrap(), "0,0,0,0,0,0,0,");
    }
}
