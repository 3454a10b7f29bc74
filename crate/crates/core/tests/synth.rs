use semobridge::bridge::BridgeModel;
use semobridge::inference::{BlendConfig, ClassifierState};
use semobridge::synth::{generate, oracle, shuffled_labels, SynthSpec};
use semobridge::tensor::dot;

fn chance_accuracy(classes: usize, queries_per_class: usize, seed: u64) -> f64 {
    let task = generate(&SynthSpec {
        classes,
        queries_per_class,
        validation_per_class: 1,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
    .task;
    let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
    let state = ClassifierState::for_task(&task, &model, BlendConfig::default()).unwrap();
    let labels = shuffled_labels(&task.test.labels, seed + 100);
    state.evaluate(&task.test.embeddings, &labels).unwrap().accuracy
}

#[test]
fn shuffled_binary_labels_give_chance_accuracy() {
    let acc = chance_accuracy(2, 5000, 3);
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn shuffled_ten_class_labels_give_chance_accuracy() {
    let acc = chance_accuracy(10, 1000, 4);
    assert!((acc - 0.1).abs() <= 0.03, "{acc}");
}

#[test]
fn shuffling_preserves_label_counts() {
    let labels: Vec<usize> = (0..60).map(|i| i % 4).collect();
    let mut s = shuffled_labels(&labels, 1);
    assert_ne!(s, labels);
    s.sort_unstable();
    let mut sorted = labels.clone();
    sorted.sort_unstable();
    assert_eq!(s, sorted);
}

#[test]
fn gap_separates_modality_means() {
    let spec = SynthSpec {
        gap_magnitude: 1.5,
        ..SynthSpec::default()
    };
    let synth = generate(&spec).unwrap();
    let task = &synth.task;
    let img_mean = oracle::class_means(&task.test.embeddings, &vec![0; task.test.len()], 1).remove(0);
    let txt_mean = oracle::class_means(&task.text, &vec![0; task.classes()], 1).remove(0);
    let diff: Vec<f64> = img_mean.iter().zip(&txt_mean).map(|(a, b)| a - b).collect();
    let gap_dir = &synth.truth.image_offset;
    let along = dot(&diff, gap_dir) / dot(gap_dir, gap_dir).sqrt();
    assert!(along > 0.5 * spec.gap_magnitude, "{along}");
}

#[test]
fn gap_lowers_matched_cross_modal_cosine_only() {
    let stats = |gap: f64| {
        let task = generate(&SynthSpec {
            gap_magnitude: gap,
            seed: 11,
            ..SynthSpec::default()
        })
        .unwrap()
        .task;
        let matched: f64 = task
            .test
            .embeddings
            .row_iter()
            .zip(&task.test.labels)
            .map(|(q, &c)| {
                let t = task.text.row(c);
                dot(q, t) / (dot(q, q) * dot(t, t)).sqrt()
            })
            .sum::<f64>()
            / task.test.len() as f64;
        let centroids = oracle::class_means(&task.support.embeddings, &task.support.labels, task.classes());
        let nc = oracle::nearest_centroid(&task.test.embeddings, &centroids, &task.test.labels).unwrap();
        (matched, nc)
    };
    let (cos0, nc0) = stats(0.0);
    let (cos1, nc1) = stats(1.5);
    assert!(cos0 - cos1 > 0.2, "matched cosine {cos0} -> {cos1}");
    assert!((nc0 - nc1).abs() < 0.02, "intra-modal {nc0} -> {nc1}");
}
