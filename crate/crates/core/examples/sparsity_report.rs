//! Near-zero mask proportions after soft-mask adaptation, grouped by
//! projection type and by layer.
//!
//! Usage: cargo run --release --example sparsity_report [pretrain_steps] [mft_steps]

use mft::analysis::near_zero_report;
use mft::corpus::{synthetic, Corpus};
use mft::masking::{GradMode, MaskSpec};
use mft::model::{ModelConfig, PlacementPolicy};
use mft::training::{evaluate, extract_emergent_sparsity, pretrain_toy, train_mft, Method, TrainConfig};

fn main() -> mft::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
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
    pre.steps = args.first().copied().unwrap_or(300);
    let base = pretrain_toy(&model, &pre, &a, 1)?.checkpoint;

    let mut cfg = TrainConfig::for_method(Method::Smft);
    cfg.context_length = window;
    cfg.steps = args.get(1).copied().unwrap_or(1500);
    cfg.mask_spec = Some(MaskSpec::soft(3.0, 0.5, GradMode::TrueSigmoid)?);
    cfg.placement = Some(PlacementPolicy::both().with_projector());
    let adapted = train_mft(&base, &cfg, &b)?.checkpoint;
    println!(
        "held-out B loss: frozen {:.4}, adapted {:.4}",
        evaluate(&base, &b)?.loss,
        evaluate(&adapted, &b)?.loss
    );

    for eps in [0.01, 0.1, 0.5] {
        let s = extract_emergent_sparsity(&adapted.model, eps)?;
        println!("emergent sparsity at eps = {eps}: {:.6}", s.p);
    }
    println!();
    print!("{}", near_zero_report(&adapted.model, 0.5)?.to_table());
    Ok(())
}
