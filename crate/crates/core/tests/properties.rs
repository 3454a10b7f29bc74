use std::sync::OnceLock;

use proptest::prelude::*;
use semobridge::bridge::{bridge_free, BridgeModel};
use semobridge::inference::{argmax, sharpen_value, BlendConfig, ClassifierState, QuerySimilarities};
use semobridge::synth::{generate, SynthSpec};
use semobridge::task::FewShotTask;
use semobridge::tensor::{
    kl_divergence, norm, pseudo_inverse, softmax_rows, EmbeddingMatrix, ProjectionPair, DEFAULT_RANK_TOLERANCE,
};

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = EmbeddingMatrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| EmbeddingMatrix::new(r, c, d).unwrap())
    })
}

/// Tall projection (`d_t >= d`) together with `d`-dimensional image rows.
fn projection_and_images() -> impl Strategy<Value = (EmbeddingMatrix, EmbeddingMatrix)> {
    (2usize..8, 0usize..6, 1usize..10).prop_flat_map(|(d, extra, n)| {
        let dt = d + extra;
        (
            prop::collection::vec(-2.0f64..2.0, dt * d).prop_map(move |v| EmbeddingMatrix::new(dt, d, v).unwrap()),
            prop::collection::vec(-2.0f64..2.0, n * d).prop_map(move |v| EmbeddingMatrix::new(n, d, v).unwrap()),
        )
    })
}

fn probability(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter_map("all zero", |v| {
        let s: f64 = v.iter().sum();
        (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
    })
}

fn shared_task() -> &'static (FewShotTask, QuerySimilarities, Vec<f64>) {
    static TASK: OnceLock<(FewShotTask, QuerySimilarities, Vec<f64>)> = OnceLock::new();
    TASK.get_or_init(|| {
        let task = generate(&SynthSpec {
            classes: 4,
            queries_per_class: 30,
            embed_dim: 10,
            eos_dim: 14,
            noise_axes: 3,
            ..SynthSpec::default()
        })
        .unwrap()
        .task;
        let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
        let state = ClassifierState::for_task(&task, &model, BlendConfig::default()).unwrap();
        let sims = state.similarities(&task.test.embeddings).unwrap();
        let weights = state.label_weights(-1.5);
        (task, sims, weights)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn penrose_conditions_hold(w in matrix(1..9, 1..9)) {
        let p = pseudo_inverse(&w, DEFAULT_RANK_TOLERANCE).unwrap();
        prop_assert_eq!(p.shape(), (w.cols(), w.rows()));
        let scale = w.frobenius_norm().max(1.0);
        let pscale = p.frobenius_norm().max(1.0);
        let wp = w.matmul(&p).unwrap();
        let pw = p.matmul(&w).unwrap();
        prop_assert!(wp.matmul(&w).unwrap().sub(&w).unwrap().max_abs() <= 1e-9 * scale);
        prop_assert!(pw.matmul(&p).unwrap().sub(&p).unwrap().max_abs() <= 1e-9 * pscale * pscale * scale);
        prop_assert!(wp.transpose().sub(&wp).unwrap().max_abs() <= 1e-9 * scale * pscale);
        prop_assert!(pw.transpose().sub(&pw).unwrap().max_abs() <= 1e-9 * scale * pscale);
    }

    #[test]
    fn bridged_rows_have_the_target_norm((w, images) in projection_and_images(), eta in 0.1f64..30.0) {
        let proj = ProjectionPair::new(w, DEFAULT_RANK_TOLERANCE).unwrap();
        if let Ok(b) = bridge_free(&images, &proj, eta) {
            for (r, row) in b.eos.row_iter().enumerate() {
                prop_assert!((norm(row) - eta).abs() <= 1e-10 * eta, "row {}", r);
            }
            let txt = b.eos.matmul(&proj.forward).unwrap();
            prop_assert!(txt.sub(&b.txt).unwrap().max_abs() <= 1e-12 * (1.0 + txt.max_abs()));
        }
    }

    #[test]
    fn bridge_ignores_positive_rescaling((w, images) in projection_and_images(), k in 0.01f64..100.0) {
        let proj = ProjectionPair::new(w, DEFAULT_RANK_TOLERANCE).unwrap();
        if let Ok(a) = bridge_free(&images, &proj, 2.0) {
            let b = bridge_free(&images.scaled(k), &proj, 2.0).unwrap();
            prop_assert!(a.eos.sub(&b.eos).unwrap().max_abs() <= 1e-10);
        }
    }

    #[test]
    fn bridged_eos_is_collinear_with_inverse_image((w, images) in projection_and_images()) {
        let proj = ProjectionPair::new(w, DEFAULT_RANK_TOLERANCE).unwrap();
        if let Ok(b) = bridge_free(&images, &proj, 1.0) {
            let u = images.matmul(&proj.inverse).unwrap();
            for (e, u) in b.eos.row_iter().zip(u.row_iter()) {
                let cos = e.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / (norm(e) * norm(u));
                prop_assert!((cos - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(m in matrix(1..6, 1..8), shift in -50.0f64..50.0, t in 0.1f64..100.0) {
        let shifted = EmbeddingMatrix::new(m.rows(), m.cols(), m.data().iter().map(|v| v + shift).collect()).unwrap();
        let a = softmax_rows(&m, t).unwrap();
        let b = softmax_rows(&shifted, t).unwrap();
        prop_assert!(a.sub(&b).unwrap().max_abs() < 1e-9);
        for row in a.row_iter() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(p in probability(6), q in probability(6)) {
        prop_assert!(kl_divergence(&p, &q, 1e-6).unwrap() >= -1e-12);
        prop_assert!(kl_divergence(&p, &p, 0.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sharpening_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, s in 0.0f64..50.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(sharpen_value(lo, s) <= sharpen_value(hi, s));
        prop_assert_eq!(sharpen_value(1.0, s), 1.0);
        prop_assert!(sharpen_value(lo, s) > 0.0);
    }

    #[test]
    fn argmax_takes_the_first_maximum(v in prop::collection::vec(-3i32..3, 1..12)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let i = argmax(&v);
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(v[i], max);
        prop_assert!(v[..i].iter().all(|&x| x < max));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn blend_predictions_ignore_common_lambda_scale(
        l in (0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0).prop_filter("nonzero", |l| l.0 + l.1 + l.2 > 1e-3),
        exp in -6i32..6,
        s in (0.0f64..20.0, 0.0f64..20.0, 0.0f64..20.0),
    ) {
        let (task, sims, weights) = shared_task();
        let k = 2f64.powi(exp);
        let blend = BlendConfig { lambda1: l.0, lambda2: l.1, lambda3: l.2, alpha: s.0, beta: s.1, gamma: s.2, ..BlendConfig::default() };
        let scaled = BlendConfig { lambda1: k * l.0, lambda2: k * l.1, lambda3: k * l.2, ..blend };
        prop_assert_eq!(sims.predicted_classes(&blend, weights), sims.predicted_classes(&scaled, weights));
        prop_assert_eq!(sims.len(), task.test.len());
    }
}
