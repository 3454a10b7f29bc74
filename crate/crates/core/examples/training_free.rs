//! Training-free classification: each logit on its own and the default blend,
//! next to a nearest-centroid baseline on image embeddings.
//!
//! ```text
//! cargo run --example training_free
//! ```

use semobridge::bridge::BridgeModel;
use semobridge::inference::{BlendConfig, ClassifierState};
use semobridge::synth::{generate, oracle, SynthSpec};

fn main() -> semobridge::Result<()> {
    let task = generate(&SynthSpec::default())?.task;
    let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
    let state = ClassifierState::for_task(&task, &model, BlendConfig::default())?;
    let sims = state.similarities(&task.test.embeddings)?;
    let weights = state.label_weights(0.0);

    let centroids = oracle::class_means(&task.support.embeddings, &task.support.labels, task.classes());
    let intra = oracle::nearest_centroid(&task.test.embeddings, &centroids, &task.test.labels)?;
    println!("{:<20} {intra:.3}", "image centroids");
    for (name, blend) in [
        ("zero-shot (z1)", BlendConfig::zero_shot()),
        ("bridged query (z2)", BlendConfig::bridged_query_only()),
        ("bridged shots (z3)", BlendConfig::bridged_shots_only()),
        ("blend 1/1/1", BlendConfig::default()),
    ] {
        let e = sims.evaluate(&task.test.labels, &blend, &weights)?;
        println!("{name:<20} {:.3}", e.accuracy);
    }
    let first = state.predict(task.test.embeddings.row(0))?;
    println!("query 0: predicted class {}, true class {}", first.class(), task.test.labels[0]);
    Ok(())
}
