//! Search blend weights, sharpening and label refinement on the validation
//! split, then score the winner on the test split.
//!
//! ```text
//! cargo run --release --example blend_search -- hybrid 300
//! ```

use semobridge::bridge::BridgeModel;
use semobridge::hpsearch::{search, SearchSpec, Strategy};
use semobridge::inference::{BlendConfig, ClassifierState};
use semobridge::synth::{generate, SynthSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let strategy: Strategy = args.next().as_deref().unwrap_or("hybrid").parse()?;
    let budget = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);

    let task = generate(&SynthSpec::default())?.task;
    let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
    let state = ClassifierState::for_task(&task, &model, BlendConfig::default())?;
    let spec = SearchSpec {
        budget,
        strategy,
        ..SearchSpec::default()
    };
    let out = search(&state, &task.validation, &spec)?;
    let b = &out.best;
    println!("{strategy} search, {} evaluations", out.trace.len());
    println!(
        "best: lambda=({:.2}, {:.2}, {:.2}) alpha={:.2} beta={:.2} gamma={:.2} theta={:.2}",
        b.lambda1, b.lambda2, b.lambda3, b.alpha, b.beta, b.gamma, b.theta
    );
    println!("validation {:.3}", out.best_val_acc);
    let test = state.with_blend(*b)?.evaluate(&task.test.embeddings, &task.test.labels)?;
    let default = state.evaluate(&task.test.embeddings, &task.test.labels)?;
    println!("test {:.3} (default blend {:.3})", test.accuracy, default.accuracy);
    Ok(())
}
