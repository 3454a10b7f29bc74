//! Train the inverse projection and class biases on a synthetic task and
//! compare against the training-free bridge.
//!
//! ```text
//! cargo run --release --example train_bridge -- 1000
//! ```

use semobridge::bridge::BridgeModel;
use semobridge::inference::{BlendConfig, ClassifierState};
use semobridge::synth::{generate, SynthSpec};
use semobridge::training::{train, TrainConfig};

fn main() -> semobridge::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let task = generate(&SynthSpec::default())?.task;
    let cfg = TrainConfig {
        epochs,
        warmup_epochs: epochs / 10,
        ..TrainConfig::default()
    };
    let outcome = train(&task, &cfg)?;
    for rec in outcome.history.iter().filter(|r| r.val_acc.is_some()).step_by(4) {
        println!(
            "epoch {:>5}  loss {:.4}  val {:.3}",
            rec.epoch,
            rec.losses.total,
            rec.val_acc.unwrap_or_default()
        );
    }
    println!("best epoch {} (val {:.3})", outcome.best_epoch, outcome.best_val_acc);

    let free = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
    for (name, model) in [("training-free", &free), ("trained", &outcome.model)] {
        let state = ClassifierState::for_task(&task, model, BlendConfig::default())?;
        let e = state.evaluate(&task.test.embeddings, &task.test.labels)?;
        println!("{name:<14} test accuracy {:.3}", e.accuracy);
    }
    Ok(())
}
