//! Effect of the bias-norm regulariser on the spread of per-class bias
//! norms after training.
//!
//! ```text
//! cargo run --release --example bias_norms -- 400
//! ```

use semobridge::synth::{generate, SynthSpec};
use semobridge::training::{train, TrainConfig};

fn std_dev(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn main() -> semobridge::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let task = generate(&SynthSpec::default())?.task;
    for lambda_b in [0.0, 0.1, 1.0] {
        let cfg = TrainConfig {
            epochs,
            warmup_epochs: epochs / 10,
            lambda_b,
            ..TrainConfig::default()
        };
        let outcome = train(&task, &cfg)?;
        let norms = outcome.final_model.bias_norms();
        let mean = norms.iter().sum::<f64>() / norms.len() as f64;
        println!("lambda_b {lambda_b:<4} bias norm mean {mean:.4e} std {:.4e}", std_dev(&norms));
    }
    Ok(())
}
