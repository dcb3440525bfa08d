//! Checks tape gradients of a masked linear layer against central finite
//! differences, for every mask family.

use mft::autodiff::{finite_difference_check, Tape};
use mft::masking::{GradMode, MaskSpec, MaskedLinear, ScoreMatrix};
use mft::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mft::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let target = Tensor::randn(&[3, 5], 1.0, &mut rng);

    // A true-sigmoid soft mask is differentiable, so the scores themselves
    // can be probed.
    let spec = MaskSpec::soft(0.5, 1.3, GradMode::TrueSigmoid)?;
    let scores = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let report = finite_difference_check(
        "soft mask scores",
        |tape: &mut Tape, s| {
            let wv = tape.constant(w.clone());
            let t = tape.div_scalar(s, 1.3);
            let m = tape.sigmoid(t);
            let weff = tape.mul(wv, m)?;
            let xv = tape.constant(x.clone());
            let y = tape.matmul_t(xv, weff)?;
            let tv = tape.constant(target.clone());
            let d = tape.mul(y, tv)?;
            Ok(tape.sum(d))
        },
        &scores,
        1e-5,
    )?;
    println!(
        "{:<24} probes {:>3}  worst rel {:.2e}  max abs {:.2e}",
        report.op_name, report.probe_count, report.worst_rel_error, report.max_abs_error
    );

    // For STE masks the score gradient is defined to equal ∂L/∂M, which the
    // tape exposes directly. The true-sigmoid row differs by σ'(S/T)/T.
    let specs = [
        ("hard, k = 0.25", MaskSpec::hard(0.25)?),
        ("soft STE", MaskSpec::soft(7.0, 2.3, GradMode::Ste)?),
        ("soft true sigmoid", spec),
    ];
    for (label, spec) in specs {
        let layer = MaskedLinear::new(w.clone(), None, ScoreMatrix::new(scores.clone(), "w")?, spec)?;
        let mut tape = Tape::new();
        let vars = layer.record(&mut tape, true)?;
        tape.retain_grad(vars.mask);
        tape.retain_grad(vars.effective_weight);
        let xv = tape.constant(x.clone());
        let y = MaskedLinear::apply(&mut tape, &vars, xv)?;
        let tv = tape.constant(target.clone());
        let d = tape.mul(y, tv)?;
        let loss = tape.sum(d);
        let g = tape.backward(loss)?;
        let gs = g.get(vars.scores).expect("score grad");
        let gm = g.get(vars.mask).expect("mask grad");
        let gw = g.get(vars.effective_weight).expect("weight grad");
        let chain = gw.zip_map(&w, "mul", |a, b| a * b)?;
        println!(
            "{:<24} |dS - dM| {:.1e}   |dM - dW'*W| {:.1e}",
            label,
            gs.max_abs_diff(gm),
            gm.max_abs_diff(&chain)
        );
    }
    Ok(())
}
