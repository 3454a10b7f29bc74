//! Generate a synthetic task and write it to disk.
//!
//! ```text
//! cargo run --example synth_task -- /tmp/task
//! ```

use std::path::PathBuf;

use semobridge::datastore::{save_task, Dtype};
use semobridge::synth::{generate, SynthSpec};
use semobridge::tensor::dot;

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("semobridge-task"));
    let spec = SynthSpec {
        classes: 5,
        gap_magnitude: 1.0,
        ..SynthSpec::default()
    };
    let synth = generate(&spec)?;
    let task = &synth.task;
    println!(
        "{} classes, d={}, d_t={}, {} shots / {} validation / {} test",
        task.classes(),
        task.embed_dim(),
        task.eos_dim(),
        task.support.len(),
        task.validation.len(),
        task.test.len()
    );
    println!("eos norm {:.4} over {} classes", task.eos_norm.value, task.eos_norm.per_class.len());
    let gap = &synth.truth.image_offset;
    let worst = synth
        .truth
        .class_directions
        .row_iter()
        .map(|u| dot(u, gap).abs())
        .fold(0.0, f64::max);
    println!("gap vector norm {:.3}, max |<gap, class dir>| {worst:.1e}", dot(gap, gap).sqrt());
    let manifest = save_task(task, &out, Dtype::F32)?;
    println!("wrote {}", manifest.display());
    Ok(())
}
