//! Soft-mask adaptation over a grid of score initializations and
//! temperatures, printed as a sweep table.
//!
//! Usage: cargo run --release --example init_temperature_sweep [mft_steps] [threads]

use mft::corpus::{synthetic, Corpus};
use mft::model::ModelConfig;
use mft::training::sweep::{init_temperature_grid, sweep};
use mft::training::{pretrain_toy, Method, TrainConfig};

fn main() -> mft::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let steps = args.first().copied().unwrap_or(100);
    let threads = args.get(1).copied().unwrap_or(1);
    let window = 33;
    let a = Corpus::from_bytes(synthetic::domain_a(60_000, 1).as_bytes(), window)?;
    let b = Corpus::from_bytes(synthetic::domain_b(20_000, 2).as_bytes(), window)?;
    let model = ModelConfig {
        embed_dim: 32,
        num_layers: 2,
        mlp_hidden_dim: 64,
        context_length: window - 1,
        ..ModelConfig::default()
    };
    let mut pre = TrainConfig::for_method(Method::Fft);
    pre.context_length = window;
    pre.steps = 200;
    let base = pretrain_toy(&model, &pre, &a, 1)?.checkpoint;

    let mut cfg = TrainConfig::for_method(Method::Smft);
    cfg.context_length = window;
    cfg.steps = steps;
    cfg.eval_every = 0;
    let grid = init_temperature_grid(&[3.0, 5.0, 7.0, 9.0], &[0.5, 1.1, 1.3, 2.3]);
    let table = sweep(&base, &cfg, &grid, &b, threads)?;
    print!("{}", table.to_tsv());
    Ok(())
}
