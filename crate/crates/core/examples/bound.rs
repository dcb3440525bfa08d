//! Encoding-length comparison between a dense and a masked model, plus the
//! sparsity at which the mask stops paying for itself.

use mft::analysis::{binary_entropy, bound_comparison, breakeven_p, complexity_delta, BoundInputs};

fn main() -> mft::Result<()> {
    for p in [0.0, 0.01, 0.03, 0.1, 0.5] {
        let c = complexity_delta(p, 8.0, 1)?;
        println!("p = {p:<5} H(p) = {:.5}  H(p) - 8p = {:+.5}", binary_entropy(p)?, c.per_weight);
    }
    for b in [4.0, 8.0, 16.0] {
        println!("b = {b:>2}: H(p) = b·p at p = {:.6}", breakeven_p(b)?);
    }
    let report = bound_comparison(&BoundInputs {
        b: 8.0,
        d: 1_000_000,
        z: 30_000,
        n: Some(665_000),
        delta: Some(0.05),
        train_loss_fft: Some(1.0414),
        train_loss_mft: Some(0.9731),
    })?;
    print!("\n{}", report.to_text());
    Ok(())
}
