//! Acceptance report: runs every criterion and prints one PASS/FAIL line per
//! criterion.
//!
//! The process exits 0 once the report is complete. Set
//! `MFT_ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use mft::analysis::{aggregate_layerwise, binary_entropy, breakeven_p, trainable_ratio_table};
use mft::corpus::Corpus;
use mft::masking::{GradMode, MaskSpec};
use mft::model::{Batch, PlacementPolicy};
use mft::training::sweep::{layer_range_grid, sweep};
use mft::training::{
    evaluate, evaluate_windows, extract_emergent_sparsity, pretrain_toy, train_mft, Method, TrainConfig, TrainOutcome,
};
use mft::{Checkpoint, Result};
use proptest::test_runner::{Config, TestCaseError, TestRunner};

const PRETRAIN_STEPS: usize = 1500;
const ADAPT_STEPS: usize = 2000;
const PRETRAIN_SEED: u64 = 7;
const PAPER_PAIRS: [(f64, f64); 4] = [(7.0, 2.3), (3.0, 0.5), (5.0, 1.3), (9.0, 1.1)];
/// Initialization and temperature of the S-MFT runs in criteria 6 to 8.
const SMFT_PAIR: (f64, f64) = (3.0, 0.5);
const EPSILON: f64 = 0.01;

type Verdict = (bool, String);

struct Toy {
    a: Corpus,
    b: Corpus,
    base: Checkpoint,
    pretrain_seconds: f64,
}

struct Adapted {
    smft: TrainOutcome,
    smft_loss: f64,
    smft_seconds: f64,
}

fn adapt_config(method: Method) -> TrainConfig {
    let mut cfg = TrainConfig::for_method(method);
    cfg.steps = ADAPT_STEPS;
    cfg.eval_every = 250;
    cfg.eval_windows = 64;
    cfg
}

fn smft_config() -> TrainConfig {
    let mut cfg = adapt_config(Method::Smft);
    cfg.mask_spec = Some(MaskSpec::soft(SMFT_PAIR.0, SMFT_PAIR.1, GradMode::TrueSigmoid).expect("valid pair"));
    cfg
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn criterion_1() -> Result<Verdict> {
    let t = Instant::now();
    let reports = common::gradient_suite(2024)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.worst_rel_error).fold(0.0, f64::max);
    let fewest = reports.iter().map(|r| r.probe_count).min().unwrap_or(0);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passes(common::FD_REL_TOL) || r.probe_count < common::MIN_PROBES)
        .map(|r| r.op_name.as_str())
        .collect();
    Ok((
        failing.is_empty() && secs < 60.0,
        format!(
            "{} checks, >= {fewest} probes each, worst rel err {worst:.2e}, {secs:.1}s{}",
            reports.len(),
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    ))
}

fn criterion_2() -> Result<Verdict> {
    let mut bit_identical = true;
    let mut chain_err: f64 = 0.0;
    for seed in 0..20 {
        let (gs, gm, gw, w) = common::ste_gradients(seed, 0.25 + 0.025 * seed as f64)?;
        bit_identical &= gs.data().iter().zip(gm.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        chain_err = chain_err.max(gm.max_abs_diff(&gw.zip_map(&w, "mul", |a, b| a * b)?));
    }
    Ok((
        bit_identical && chain_err <= 1e-12,
        format!("20 layers: dL/dS == dL/dM bitwise: {bit_identical}; max |dL/dM - dL/dW'*W| = {chain_err:.1e}"),
    ))
}

fn criterion_3() -> Result<Verdict> {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let outcome = runner.run(&common::score_case(), |(r, c, v, k, k2)| {
        common::hard_mask_case(r, c, &v, k, k2).map_err(TestCaseError::fail)
    });
    Ok(match outcome {
        Ok(()) => (true, "1000 random (S, k) cases: cardinality, minimality and nesting hold".into()),
        Err(e) => (false, format!("{e}")),
    })
}

fn criterion_4(toy: &Toy) -> Result<Verdict> {
    let windows = &toy.b.heldout[..64.min(toy.b.heldout.len())];
    let frozen = evaluate_windows(&toy.base.model, windows)?.loss;
    let probe: Vec<Vec<usize>> = windows[..4].iter().map(|w| w[..w.len() - 1].to_vec()).collect();
    let frozen_logits = toy.base.model.forward(Batch::text(&probe))?;
    let mut pass = true;
    let mut parts = Vec::new();
    for (init, t) in PAPER_PAIRS {
        let mut m = toy.base.model.clone();
        m.apply_placement(&PlacementPolicy::both(), &MaskSpec::soft(init, t, GradMode::TrueSigmoid)?, 0)?;
        let loss = evaluate_windows(&m, windows)?.loss;
        let dev = m.forward(Batch::text(&probe))?.max_abs_diff(&frozen_logits);
        let ok = (loss - frozen).abs() <= 1e-3 && dev < 1e-4;
        pass &= ok;
        parts.push(format!(
            "{init}/{t}: |dloss| {:.2e}, max |dlogit| {dev:.2e}{}",
            (loss - frozen).abs(),
            if ok { "" } else { " (over)" }
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn criterion_5() -> Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|e| mft::Error::io(std::env::temp_dir(), e))?;
    let out = Command::new(env!("CARGO_BIN_EXE_mft"))
        .args(["bound", "--p", "0.03", "--b", "8", "--loss-fft", "1.0414", "--loss-mft", "0.9731", "--out"])
        .arg(dir.path())
        .output()
        .map_err(|e| mft::Error::io(env!("CARGO_BIN_EXE_mft"), e))?;
    let text = String::from_utf8_lossy(&out.stdout);
    let value = |key: &str| -> Option<f64> {
        text.lines().find_map(|l| {
            let mut it = l.split_whitespace();
            (it.next() == Some(key)).then(|| it.next()?.parse().ok()).flatten()
        })
    };
    let per_weight = value("complexity_per_weight").unwrap_or(f64::NAN);
    let delta_train = value("delta_train").unwrap_or(f64::NAN);
    let h_half = binary_entropy(0.5)?;
    let p_star = breakeven_p(8.0)?;
    let checks = [
        ("per-weight", (-0.0466..=-0.0446).contains(&per_weight), format!("{per_weight:.6}")),
        ("delta_train", (delta_train + 0.0683).abs() <= 1e-4, format!("{delta_train:.6}")),
        ("H(0.5)", h_half == 1.0, format!("{h_half}")),
        ("p* in (0.06, 0.07)", p_star > 0.06 && p_star < 0.07, format!("{p_star:.6}")),
    ];
    let pass = out.status.success() && checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(name, ok, v)| format!("{name} = {v} [{}]", if *ok { "ok" } else { "FAIL" }))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((pass, detail))
}

fn criterion_6(toy: &Toy, run: &Adapted) -> Result<Verdict> {
    let frozen = evaluate(&toy.base, &toy.b)?.loss;
    let gain = (frozen - run.smft_loss) / frozen;
    let mut adapted = run.smft.checkpoint.model.clone();
    adapted.strip_adapters();
    let hashes_ok = adapted.frozen_hashes() == toy.base.model.frozen_hashes();
    let total = toy.pretrain_seconds + run.smft_seconds;
    Ok((
        gain >= 0.20 && hashes_ok && total < 600.0,
        format!(
            "held-out B loss frozen {frozen:.4} -> S-MFT {:.4} ({:.1}% gain); frozen hashes unchanged: {hashes_ok}; \
             pretrain {:.0}s + adapt {:.0}s = {total:.0}s",
            run.smft_loss,
            100.0 * gain,
            toy.pretrain_seconds,
            run.smft_seconds
        ),
    ))
}

fn criterion_7(toy: &Toy, run: &Adapted) -> Result<Verdict> {
    let ste_cfg = smft_config().with_soft_grad_mode(GradMode::Ste);
    let ste = train_mft(&toy.base, &ste_cfg, &toy.b)?;
    let ste_loss = evaluate(&ste.checkpoint, &toy.b)?.loss;
    let d = rel(ste_loss, run.smft_loss);
    Ok((
        d <= 0.05,
        format!("eval loss S-MFT {:.4}, S-MFT-STE {ste_loss:.4}, relative difference {:.2}%", run.smft_loss, 100.0 * d),
    ))
}

fn criterion_8(toy: &Toy, run: &Adapted) -> Result<Verdict> {
    let k = extract_emergent_sparsity(&run.smft.checkpoint.model, EPSILON)?.p;
    let hard = |k: f64| -> Result<f64> {
        let mut cfg = adapt_config(Method::Hmft);
        cfg.mask_spec = Some(MaskSpec::hard(k.min(1.0))?);
        let out = train_mft(&toy.base, &cfg, &toy.b)?;
        Ok(evaluate(&out.checkpoint, &toy.b)?.loss)
    };
    let matched = hard(k)?;
    let tenfold = hard(10.0 * k)?;
    let close = rel(matched, run.smft_loss) <= 0.10;
    let worse = tenfold > matched;
    Ok((
        close && worse,
        format!(
            "k = {k:.6}: H-MFT {matched:.4} vs S-MFT {:.4} ({:.1}% apart) [{}]; H-MFT at 10k {tenfold:.4} [{}]",
            run.smft_loss,
            100.0 * rel(matched, run.smft_loss),
            if close { "ok" } else { "FAIL" },
            if worse { "worse, ok" } else { "not worse, FAIL" }
        ),
    ))
}

fn criterion_9() -> Result<Verdict> {
    let cfg = common::toy_config();
    let rows = trainable_ratio_table(&cfg)?;
    let get = |label: &str| rows.iter().find(|r| r.label == label).expect("row present");
    let (attn, mlp, both, fft) = (get("attn"), get("mlp"), get("both"), get("fft"));
    let additive = both.count.trainable == attn.count.trainable + mlp.count.trainable
        && both.count.total == attn.count.total;
    let ordered = attn.ratio() < mlp.ratio() && mlp.ratio() < both.ratio();
    let fft_one = fft.ratio() == 1.0;
    Ok((
        cfg.mlp_hidden_dim > cfg.embed_dim && additive && ordered && fft_one,
        format!(
            "attn {:.4} < mlp {:.4} < both {:.4}; counts {} + {} = {}: {additive}; \
             float sum differs by {:.1e}; fft {}",
            attn.ratio(),
            mlp.ratio(),
            both.ratio(),
            attn.count.trainable,
            mlp.count.trainable,
            both.count.trainable,
            (attn.ratio() + mlp.ratio() - both.ratio()).abs(),
            fft.ratio()
        ),
    ))
}

fn criterion_10(toy: &Toy, run: &Adapted) -> Result<Verdict> {
    let mut short = TrainConfig::for_method(Method::Fft);
    short.steps = 30;
    short.eval_every = 0;
    short.eval_windows = 16;
    let p1 = pretrain_toy(&common::toy_config(), &short, &toy.a, 11)?.checkpoint.content_hash()?;
    let p2 = pretrain_toy(&common::toy_config(), &short, &toy.a, 11)?.checkpoint.content_hash()?;
    let mut cfg = smft_config();
    cfg.steps = 30;
    cfg.eval_every = 0;
    cfg.eval_windows = 16;
    let m1 = train_mft(&toy.base, &cfg, &toy.b)?.checkpoint.content_hash()?;
    let m2 = train_mft(&toy.base, &cfg, &toy.b)?.checkpoint.content_hash()?;
    let repeat = p1 == p2 && m1 == m2;

    let dir = tempfile::tempdir().map_err(|e| mft::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("adapted.mftc");
    run.smft.checkpoint.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let roundtrip = evaluate(&loaded, &toy.b)?.loss.to_bits() == run.smft_loss.to_bits();

    let code = corrupted_eval_exit_code(&path)?;
    Ok((
        repeat && roundtrip && code == Some(3),
        format!(
            "repeat checksums equal: {repeat} ({p1:016x}, {m1:016x}); reload eval loss bit-exact: {roundtrip}; \
             corrupted checkpoint exit code {code:?}"
        ),
    ))
}

fn corrupted_eval_exit_code(path: &Path) -> Result<Option<i32>> {
    let mut bytes = std::fs::read(path).map_err(|e| mft::Error::io(path, e))?;
    let i = bytes.len() / 3;
    bytes[i] ^= 0x01;
    std::fs::write(path, &bytes).map_err(|e| mft::Error::io(path, e))?;
    let status = Command::new(env!("CARGO_BIN_EXE_mft"))
        .arg("eval")
        .arg("--checkpoint")
        .arg(path)
        .args(["--corpus", "synthetic:b"])
        .arg("--out")
        .arg(path.with_extension("eval"))
        .output()
        .map_err(|e| mft::Error::io(env!("CARGO_BIN_EXE_mft"), e))?
        .status;
    Ok(status.code())
}

fn criterion_11(toy: &Toy) -> Result<Verdict> {
    let layers = toy.base.model.config.num_layers;
    let grid = layer_range_grid(layers, 2);
    let mut cfg = smft_config();
    cfg.steps = 50;
    cfg.eval_every = 0;
    cfg.eval_windows = 32;
    let table = sweep(&toy.base, &cfg, &grid, &toy.b, 1)?;
    let rows = aggregate_layerwise(&[table.to_tsv()])?;
    let full = format!("0-{}", layers - 1);
    let ranges: Vec<String> = rows
        .iter()
        .map(|r| format!("{}:{}", r.range, r.mean_eval_loss.map_or("-".into(), |v| format!("{v:.3}"))))
        .collect();
    Ok((
        table.succeeded() == grid.len() && rows.len() == grid.len() && rows.iter().any(|r| r.range == full),
        format!("{} of {} cells completed; rows {}", table.succeeded(), grid.len(), ranges.join(", ")),
    ))
}

fn report(n: usize, result: Result<Verdict>, failures: &mut usize) {
    let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    if !pass {
        *failures += 1;
    }
    println!("criterion {n}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    report(1, criterion_1(), &mut failures);
    report(2, criterion_2(), &mut failures);
    report(3, criterion_3(), &mut failures);

    let toy = (|| -> Result<Toy> {
        let (a, b) = common::toy_corpora()?;
        let mut cfg = TrainConfig::for_method(Method::Fft);
        cfg.steps = PRETRAIN_STEPS;
        cfg.eval_every = 250;
        cfg.eval_windows = 64;
        let t = Instant::now();
        let base = pretrain_toy(&common::toy_config(), &cfg, &a, PRETRAIN_SEED)?.checkpoint;
        Ok(Toy {
            a,
            b,
            base,
            pretrain_seconds: t.elapsed().as_secs_f64(),
        })
    })();
    let toy = match toy {
        Ok(t) => t,
        Err(e) => {
            for n in [4, 6, 7, 8, 10, 11] {
                report(n, Err(mft::Error::InvalidArgument(format!("pretraining failed: {e}"))), &mut failures);
            }
            report(5, criterion_5(), &mut failures);
            report(9, criterion_9(), &mut failures);
            finish(failures, started);
            return;
        }
    };
    report(4, criterion_4(&toy), &mut failures);
    report(5, criterion_5(), &mut failures);

    let run = (|| -> Result<Adapted> {
        let t = Instant::now();
        let smft = train_mft(&toy.base, &smft_config(), &toy.b)?;
        let smft_seconds = t.elapsed().as_secs_f64();
        let smft_loss = evaluate(&smft.checkpoint, &toy.b)?.loss;
        Ok(Adapted {
            smft,
            smft_loss,
            smft_seconds,
        })
    })();
    match &run {
        Ok(run) => {
            report(6, criterion_6(&toy, run), &mut failures);
            report(7, criterion_7(&toy, run), &mut failures);
            report(8, criterion_8(&toy, run), &mut failures);
        }
        Err(e) => {
            for n in [6, 7, 8] {
                report(n, Err(mft::Error::InvalidArgument(format!("S-MFT run failed: {e}"))), &mut failures);
            }
        }
    }
    report(9, criterion_9(), &mut failures);
    match &run {
        Ok(run) => report(10, criterion_10(&toy, run), &mut failures),
        Err(e) => report(10, Err(mft::Error::InvalidArgument(format!("S-MFT run failed: {e}"))), &mut failures),
    }
    report(11, criterion_11(&toy), &mut failures);
    finish(failures, started);
}

fn finish(failures: usize, started: Instant) {
    println!(
        "acceptance: {} of 11 criteria passed in {:.0}s",
        11 - failures,
        started.elapsed().as_secs_f64()
    );
    if failures > 0 && std::env::var_os("MFT_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
