//! Soft-mask adaptation followed by hard masks at the soft run's emergent
//! sparsity and at ten times that sparsity.
//!
//! Usage: cargo run --release --example hard_vs_soft [mft_steps]

use mft::corpus::{synthetic, Corpus};
use mft::masking::{GradMode, MaskSpec};
use mft::model::ModelConfig;
use mft::training::{evaluate, extract_emergent_sparsity, pretrain_toy, train_mft, Method, TrainConfig};

fn main() -> mft::Result<()> {
    let steps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1500);
    let window = 33;
    let a = Corpus::from_bytes(synthetic::domain_a(100_000, 1).as_bytes(), window)?;
    let b = Corpus::from_bytes(synthetic::domain_b(40_000, 2).as_bytes(), window)?;
    let model = ModelConfig {
        embed_dim: 32,
        num_layers: 2,
        mlp_hidden_dim: 64,
        context_length: window - 1,
        ..ModelConfig::default()
    };
    let mut pre = TrainConfig::for_method(Method::Fft);
    pre.context_length = window;
    pre.steps = 300;
    let base = pretrain_toy(&model, &pre, &a, 1)?.checkpoint;
    println!("frozen            {:.4}", evaluate(&base, &b)?.loss);

    let mut soft = TrainConfig::for_method(Method::Smft);
    soft.context_length = window;
    soft.steps = steps;
    soft.mask_spec = Some(MaskSpec::soft(3.0, 0.5, GradMode::TrueSigmoid)?);
    let s = train_mft(&base, &soft, &b)?.checkpoint;
    let k = extract_emergent_sparsity(&s.model, 0.01)?.p;
    println!("S-MFT             {:.4}  (emergent sparsity {k:.6})", evaluate(&s, &b)?.loss);

    for (label, sparsity) in [("H-MFT k", k), ("H-MFT 10k", (10.0 * k).min(1.0))] {
        let mut hard = TrainConfig::for_method(Method::Hmft);
        hard.context_length = window;
        hard.steps = steps;
        hard.mask_spec = Some(MaskSpec::hard(sparsity)?);
        let h = train_mft(&base, &hard, &b)?.checkpoint;
        println!("{label:<17} {:.4}  (k = {sparsity:.6})", evaluate(&h, &b)?.loss);
    }
    Ok(())
}
