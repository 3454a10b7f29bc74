//! Pseudo-inverse of a random text projection and its Penrose residuals.
//!
//! ```text
//! cargo run --example pseudo_inverse
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use semobridge::tensor::{singular_values, EmbeddingMatrix, ProjectionPair, DEFAULT_RANK_TOLERANCE};

fn main() -> semobridge::Result<()> {
    let (dt, d) = (48, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = (0..dt * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    let w = EmbeddingMatrix::new(dt, d, data)?;
    let proj = ProjectionPair::new(w, DEFAULT_RANK_TOLERANCE)?;
    let (w, p) = (&proj.forward, &proj.inverse);

    let sv = singular_values(w)?;
    println!("W_txt {dt}x{d}, singular values in [{:.3}, {:.3}]", sv.last().unwrap(), sv[0]);

    let wpw = w.matmul(p)?.matmul(w)?;
    let pwp = p.matmul(w)?.matmul(p)?;
    let wp = w.matmul(p)?;
    let pw = p.matmul(w)?;
    println!("|W W+ W - W|     = {:.2e}", wpw.sub(w)?.max_abs());
    println!("|W+ W W+ - W+|   = {:.2e}", pwp.sub(p)?.max_abs());
    println!("|(W W+)^T - W W+| = {:.2e}", wp.transpose().sub(&wp)?.max_abs());
    println!("|(W+ W)^T - W+ W| = {:.2e}", pw.transpose().sub(&pw)?.max_abs());
    // full column rank: W+ is a left inverse
    println!("|W+ W - I|       = {:.2e}", pw.sub(&EmbeddingMatrix::identity(d))?.max_abs());
    Ok(())
}
