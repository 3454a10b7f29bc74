//! Binary tensor files: write, inspect the header, read back, and round-trip
//! a whole task through its manifest.
//!
//! ```text
//! cargo run --example tensor_files
//! ```

use semobridge::datastore::{self, Dtype, Tensor, HEADER_LEN};
use semobridge::synth::{generate, SynthSpec};
use semobridge::tensor::EmbeddingMatrix;

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let m = EmbeddingMatrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]])?;
    for (name, t) in [("f64", Tensor::from_matrix(&m)), ("f32", Tensor::from_matrix_f32(&m))] {
        let path = dir.path().join(format!("m_{name}.semb"));
        datastore::write_tensor(&path, &t)?;
        let bytes = std::fs::read(&path)?;
        println!(
            "{name}: {} bytes, magic {:?}, version {}, dtype {}, ndim {}",
            bytes.len(),
            std::str::from_utf8(&bytes[..4])?,
            bytes[4],
            bytes[5],
            u32::from_le_bytes(bytes[8..12].try_into()?)
        );
        let back = datastore::read_tensor(&path)?;
        assert_eq!(back, t);
        println!("   dims {:?}, payload starts at byte {}", back.dims, HEADER_LEN + 8 * back.dims.len());
    }

    let task = generate(&SynthSpec {
        classes: 4,
        ..SynthSpec::default()
    })?
    .task;
    let task_dir = dir.path().join("task");
    let manifest = datastore::save_task(&task, &task_dir, Dtype::F64)?;
    let loaded = datastore::load_task(&manifest)?;
    println!(
        "task: {} classes, support identical {}, hash {}",
        loaded.classes(),
        loaded.support == task.support,
        &datastore::task_hash(&manifest)?[..16]
    );
    Ok(())
}
