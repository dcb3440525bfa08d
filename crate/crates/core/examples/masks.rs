//! Hard top-k and soft sigmoid masks on a small score matrix.

use mft::masking::{hard_mask, soft_mask, threshold_tau, ScoreMatrix};
use mft::Tensor;

fn show(name: &str, t: &Tensor) {
    println!("{name}:");
    let (r, c) = t.dims2().expect("2-d");
    for i in 0..r {
        let row: Vec<String> = (0..c).map(|j| format!("{:7.3}", t.get2(i, j))).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> mft::Result<()> {
    let s = ScoreMatrix::new(
        Tensor::from_vec2(&[
            vec![0.9, -0.1, 0.4, -2.0],
            vec![0.05, 1.5, -0.6, 0.3],
            vec![-0.2, 0.7, 0.01, -1.1],
        ])?,
        "demo.weight",
    )?;
    show("scores", &s.values);
    for k in [0.0, 0.25, 0.5] {
        println!("k = {k}: tau = {}", threshold_tau(&s, k)?);
        show("  hard mask", &hard_mask(&s, k)?);
    }
    for t in [0.5, 2.3] {
        show(&format!("soft mask, T = {t}"), &soft_mask(&s, t)?);
    }
    Ok(())
}
