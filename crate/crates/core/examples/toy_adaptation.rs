//! Pretrain a toy byte LM on domain A, then adapt it to domain B with soft
//! masks and compare held-out B loss against the frozen model.
//!
//! Usage: cargo run --release --example toy_adaptation [pretrain_steps] [mft_steps]

use std::time::Instant;

use mft::corpus::{synthetic, Corpus};
use mft::model::ModelConfig;
use mft::training::{evaluate, pretrain_toy, train_mft, Method, TrainConfig};

fn main() -> mft::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let pre_steps = args.first().copied().unwrap_or(1500);
    let mft_steps = args.get(1).copied().unwrap_or(2000);
    let window = 65;
    let a = Corpus::from_bytes(synthetic::domain_a(500_000, 1).as_bytes(), window)?;
    let b = Corpus::from_bytes(synthetic::domain_b(100_000, 2).as_bytes(), window)?;
    let model = ModelConfig {
        context_length: window - 1,
        ..ModelConfig::default()
    };

    let started = Instant::now();
    let mut pre = TrainConfig::for_method(Method::Fft);
    pre.steps = pre_steps;
    pre.eval_every = 250;
    pre.eval_windows = 64;
    let base = pretrain_toy(&model, &pre, &a, 7)?;
    println!(
        "pretrained {} steps in {:.1}s, held-out A loss {:.4}",
        pre_steps,
        started.elapsed().as_secs_f64(),
        evaluate(&base.checkpoint, &a)?.loss
    );

    let frozen = evaluate(&base.checkpoint, &b)?.loss;
    let mut cfg = TrainConfig::for_method(Method::Smft);
    cfg.steps = mft_steps;
    cfg.eval_every = 100;
    cfg.eval_windows = 64;
    let t = Instant::now();
    let adapted = train_mft(&base.checkpoint, &cfg, &b)?;
    let tuned = evaluate(&adapted.checkpoint, &b)?.loss;
    println!("S-MFT {} steps in {:.1}s", mft_steps, t.elapsed().as_secs_f64());
    println!("held-out B loss: frozen {frozen:.4}, adapted {tuned:.4}, relative gain {:.1}%", 100.0 * (frozen - tuned) / frozen);
    for m in adapted.metrics.iter().filter(|m| m.eval_loss.is_some()) {
        println!("{}", m.to_row());
    }
    Ok(())
}
