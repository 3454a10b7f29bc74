//! Matched/unmatched cosine histograms for intra-modal, cross-modal and
//! bridged comparisons, with their overlap as the gap diagnostic.
//!
//! ```text
//! cargo run --example modality_gap -- 0.0 0.8 1.6
//! ```

use semobridge::bridge::BridgeModel;
use semobridge::inference::modality_report;
use semobridge::synth::{generate, SynthSpec};

fn main() -> semobridge::Result<()> {
    let gaps: Vec<f64> = std::env::args().skip(1).filter_map(|s| s.parse().ok()).collect();
    let gaps = if gaps.is_empty() { vec![0.0, 0.4, 0.8, 1.6] } else { gaps };
    println!("{:>6} {:>12} {:>12} {:>12}", "gap", "intra_modal", "cross_modal", "bridged");
    for gap in gaps {
        let spec = SynthSpec {
            gap_magnitude: gap,
            ..SynthSpec::default()
        };
        let task = generate(&spec)?.task;
        let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
        let report = modality_report(&task.support, &task.text, &model, &task.projection.forward)?;
        let o = report.histograms().map(|(_, h)| h.overlap());
        println!("{gap:>6.2} {:>12.3} {:>12.3} {:>12.3}", o[0], o[1], o[2]);
    }
    let task = generate(&SynthSpec::default())?.task;
    let model = BridgeModel::training_free(&task.projection, task.eos_norm.clone(), task.classes());
    let report = modality_report(&task.support, &task.text, &model, &task.projection.forward)?;
    let h = &report.bridged;
    let peak = |v: &[u64]| {
        let i = v.iter().enumerate().fold(0, |b, (i, x)| if *x > v[b] { i } else { b });
        h.edges[i] + 0.5 * (h.edges[1] - h.edges[0])
    };
    println!("bridged modes: matched {:.2}, unmatched {:.2}", peak(&h.paired), peak(&h.unpaired));
    Ok(())
}
