//! Oracles and fixtures shared by the integration tests and the acceptance
//! harness.

#![allow(dead_code)]

use mft::autodiff::{finite_difference_check, GradCheckReport, Tape, Var};
use mft::corpus::{synthetic, Corpus};
use mft::masking::{hard_mask, GradMode, MaskSpec, MaskedLinear, ScoreMatrix};
use mft::model::{Batch, ModelConfig, ParamRole, PlacementPolicy, ToyVlm, Trainable};
use mft::{Result, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const MIN_PROBES: usize = 100;

pub const WINDOW: usize = 65;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 13,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_hidden_dim: 12,
        context_length: 9,
        vision_feature_dim: 5,
        vision_stub_dim: 6,
        gated_mlp: true,
    }
}

/// The 4-layer, 64-wide byte LM used by the adaptation experiment.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        context_length: WINDOW - 1,
        ..ModelConfig::default()
    }
}

/// Domain A (about 500 KB) and the disjoint domain B (about 100 KB).
pub fn toy_corpora() -> Result<(Corpus, Corpus)> {
    let a = Corpus::from_bytes(synthetic::domain_a(500_000, 1).as_bytes(), WINDOW)?;
    let b = Corpus::from_bytes(synthetic::domain_b(100_000, 2).as_bytes(), WINDOW)?;
    Ok((a, b))
}

/// Small corpora for fast training tests.
pub fn small_corpora(window: usize) -> Result<(Corpus, Corpus)> {
    let a = Corpus::from_bytes(synthetic::domain_a(20_000, 1).as_bytes(), window)?;
    let b = Corpus::from_bytes(synthetic::domain_b(8_000, 2).as_bytes(), window)?;
    Ok((a, b))
}

/// `Σ f(x) ⊙ R` for a fixed random `R`, turning any op into a scalar with
/// a non-trivial gradient.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// Repeats a gradient check on fresh random inputs until at least
/// [`MIN_PROBES`] coordinates have been probed.
fn repeat_check<F>(name: &str, seed: u64, mut one: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<GradCheckReport>,
{
    let mut r = rng(seed);
    let mut report = one(&mut r)?;
    while report.probe_count < MIN_PROBES {
        let next = one(&mut r)?;
        report.merge(&next);
    }
    report.op_name = name.to_string();
    Ok(report)
}

fn unary<G>(name: &str, seed: u64, shape: [usize; 2], out_shape: [usize; 2], g: G) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape, Var) -> Result<Var> + Copy,
{
    repeat_check(name, seed, |r| {
        let x = Tensor::randn(&shape, 1.0, r);
        let w = Tensor::randn(&out_shape, 1.0, r);
        finite_difference_check(
            name,
            |tape: &mut Tape, v| {
                let y = g(tape, v)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_STEP,
        )
    })
}

/// Checks `op(x, other)` against finite differences in its first argument.
fn binary_first<G>(
    name: &str,
    seed: u64,
    shape: [usize; 2],
    other_shape: &[usize],
    out_shape: [usize; 2],
    g: G,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape, Var, Var) -> Result<Var> + Copy,
{
    repeat_check(name, seed, |r| {
        let x = Tensor::randn(&shape, 1.0, r);
        let other = Tensor::randn(other_shape, 1.0, r);
        let w = Tensor::randn(&out_shape, 1.0, r);
        finite_difference_check(
            name,
            |tape: &mut Tape, v| {
                let o = tape.constant(other.clone());
                let y = g(tape, v, o)?;
                weighted_sum(tape, y, &w)
            },
            &x,
            FD_STEP,
        )
    })
}

fn binary_second<G>(
    name: &str,
    seed: u64,
    first_shape: &[usize],
    shape: [usize; 2],
    out_shape: [usize; 2],
    g: G,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape, Var, Var) -> Result<Var> + Copy,
{
    binary_first(name, seed, shape, first_shape, out_shape, move |t, x, o| g(t, o, x))
}

fn attention_arg(name: &str, seed: u64, which: usize) -> Result<GradCheckReport> {
    let (batch, seq, d, heads) = (2, 5, 8, 2);
    repeat_check(name, seed, |r| {
        let qkv: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[batch * seq, d], 1.0, r)).collect();
        let w = Tensor::randn(&[batch * seq, d], 1.0, r);
        finite_difference_check(
            name,
            |tape: &mut Tape, v| {
                let mut vars = [v; 3];
                for (i, t) in qkv.iter().enumerate() {
                    if i != which {
                        vars[i] = tape.constant(t.clone());
                    }
                }
                let y = tape.causal_attention(vars[0], vars[1], vars[2], batch, seq, heads)?;
                weighted_sum(tape, y, &w)
            },
            &qkv[which],
            FD_STEP,
        )
    })
}

/// Finite-difference reports for every differentiable tape op and for the
/// masked layer and masked model, each over at least [`MIN_PROBES`] probes.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = vec![
        binary_first("matmul (a)", seed, [6, 5], &[5, 4], [6, 4], |t, a, b| t.matmul(a, b))?,
        binary_second("matmul (b)", seed + 1, &[6, 5], [5, 4], [6, 4], |t, a, b| t.matmul(a, b))?,
        binary_first("matmul_t (a)", seed + 2, [6, 5], &[4, 5], [6, 4], |t, a, b| t.matmul_t(a, b))?,
        binary_second("matmul_t (b)", seed + 3, &[6, 5], [4, 5], [6, 4], |t, a, b| t.matmul_t(a, b))?,
        binary_first("add (a)", seed + 4, [10, 10], &[10, 10], [10, 10], |t, a, b| t.add(a, b))?,
        binary_second("add (b)", seed + 5, &[10, 10], [10, 10], [10, 10], |t, a, b| t.add(a, b))?,
        binary_first("add_row (a)", seed + 6, [10, 10], &[10], [10, 10], |t, a, b| t.add_row(a, b))?,
        binary_second("add_row (row)", seed + 7, &[10, 10], [1, 10], [10, 10], |t, a, b| {
            t.add_row(a, b)
        })?,
        binary_first("mul (a)", seed + 8, [10, 10], &[10, 10], [10, 10], |t, a, b| t.mul(a, b))?,
        binary_second("mul (b)", seed + 9, &[10, 10], [10, 10], [10, 10], |t, a, b| t.mul(a, b))?,
        unary("scale", seed + 10, [10, 10], [10, 10], |t, a| Ok(t.scale(a, -1.7)))?,
        unary("div_scalar", seed + 11, [10, 10], [10, 10], |t, a| Ok(t.div_scalar(a, 2.3)))?,
        unary("sigmoid", seed + 12, [10, 10], [10, 10], |t, a| Ok(t.sigmoid(a)))?,
        unary("silu", seed + 13, [10, 10], [10, 10], |t, a| Ok(t.silu(a)))?,
        binary_first("rms_norm (x)", seed + 14, [10, 10], &[10], [10, 10], |t, x, g| t.rms_norm(x, g))?,
        binary_second("rms_norm (gain)", seed + 15, &[10, 10], [1, 10], [10, 10], |t, x, g| {
            t.rms_norm(x, g)
        })?,
        unary("gather_rows", seed + 16, [6, 10], [12, 10], |t, a| {
            t.gather_rows(a, &[0, 3, 3, 5, 1, 0, 2, 4, 4, 4, 5, 1])
        })?,
        binary_first("concat_rows (a)", seed + 17, [5, 10], &[5, 10], [10, 10], |t, a, b| {
            t.concat_rows(a, b)
        })?,
        binary_second("concat_rows (b)", seed + 18, &[5, 10], [5, 10], [10, 10], |t, a, b| {
            t.concat_rows(a, b)
        })?,
        attention_arg("causal_attention (q)", seed + 19, 0)?,
        attention_arg("causal_attention (k)", seed + 20, 1)?,
        attention_arg("causal_attention (v)", seed + 21, 2)?,
        repeat_check("softmax_cross_entropy", seed + 22, |r| {
            let x = Tensor::randn(&[10, 11], 1.5, r);
            let targets: Vec<usize> = (0..10).map(|_| r.random_range(0..11)).collect();
            finite_difference_check(
                "softmax_cross_entropy",
                |tape: &mut Tape, v| tape.softmax_cross_entropy(v, &targets),
                &x,
                FD_STEP,
            )
        })?,
        unary("sum", seed + 23, [10, 10], [10, 10], |_, a| Ok(a))?,
    ];
    out.push(masked_layer_scores(seed + 24)?);
    out.push(masked_layer_input(seed + 25)?);
    out.push(masked_model_scores(seed + 26)?);
    Ok(out)
}

/// Tape gradient of a true-sigmoid soft-masked layer with respect to its
/// scores, probed by perturbing the stored score matrix and calling the
/// layer's own inference path.
fn masked_layer_scores(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let w = Tensor::randn(&[12, 10], 1.0, &mut r);
    let b = Tensor::randn(&[12], 1.0, &mut r);
    let x = Tensor::randn(&[7, 10], 1.0, &mut r);
    let weights = Tensor::randn(&[7, 12], 1.0, &mut r);
    let scores = Tensor::randn(&[12, 10], 2.0, &mut r);
    let spec = MaskSpec::soft(1.0, 1.3, GradMode::TrueSigmoid)?;
    let layer = MaskedLinear::new(w, Some(b), ScoreMatrix::new(scores, "w")?, spec)?;

    let mut tape = Tape::new();
    let vars = layer.record(&mut tape, true)?;
    let xv = tape.constant(x.clone());
    let y = MaskedLinear::apply(&mut tape, &vars, xv)?;
    let loss = weighted_sum(&mut tape, y, &weights)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(vars.scores).cloned().expect("score gradient");

    let objective = |l: &MaskedLinear| -> Result<f64> {
        let y = l.forward(&x)?;
        Ok(y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let coords: Vec<usize> = (0..analytic.len()).collect();
    compare(
        "masked linear (scores)",
        &analytic,
        &coords,
        |i, delta| {
            let mut l = layer.clone();
            l.scores.values.data_mut()[i] += delta;
            objective(&l)
        },
    )
}

fn masked_layer_input(seed: u64) -> Result<GradCheckReport> {
    let mut r = rng(seed);
    let w = Tensor::randn(&[12, 10], 1.0, &mut r);
    let scores = Tensor::randn(&[12, 10], 1.0, &mut r);
    let weights = Tensor::randn(&[11, 12], 1.0, &mut r);
    let x = Tensor::randn(&[11, 10], 1.0, &mut r);
    let layer = MaskedLinear::new(w, None, ScoreMatrix::new(scores, "w")?, MaskSpec::hard(0.3)?)?;
    finite_difference_check(
        "masked linear (input)",
        |tape: &mut Tape, xv| {
            let vars = layer.record(tape, false)?;
            let y = MaskedLinear::apply(tape, &vars, xv)?;
            weighted_sum(tape, y, &weights)
        },
        &x,
        FD_STEP,
    )
}

/// Full vision-language forward pass with true-sigmoid soft masks on every
/// sublayer and the projector; probes random score entries of the model's
/// cross-entropy loss.
fn masked_model_scores(seed: u64) -> Result<GradCheckReport> {
    let cfg = tiny_config();
    let mut model = ToyVlm::build(&cfg, seed)?;
    let spec = MaskSpec::soft(1.5, 1.1, GradMode::TrueSigmoid)?;
    model.apply_placement(&PlacementPolicy::both().with_projector(), &spec, seed)?;
    let mut r = rng(seed);
    // Spread the constant initialization so every sigmoid slope differs.
    model.visit_mut(&mut |_, role, t| {
        if role == ParamRole::Scores {
            for v in t.data_mut() {
                *v += r.random_range(-1.0..1.0);
            }
        }
    });
    let seq = cfg.context_length - 1;
    let tokens: Vec<Vec<usize>> = (0..2)
        .map(|_| (0..seq).map(|_| r.random_range(0..cfg.vocab_size)).collect())
        .collect();
    let targets: Vec<usize> = (0..2 * seq).map(|_| r.random_range(0..cfg.vocab_size)).collect();
    let vision = Tensor::randn(&[2, cfg.vision_feature_dim], 1.0, &mut r);

    let loss_of = |m: &ToyVlm| -> Result<f64> {
        let mut tape = Tape::new();
        let fp = m.forward_tape(&mut tape, Batch { tokens: &tokens, vision: Some(&vision) }, Trainable::Nothing)?;
        let l = tape.softmax_cross_entropy(fp.logits, &targets)?;
        Ok(tape.value(l).data()[0])
    };
    let mut tape = Tape::new();
    let fp = model.forward_tape(&mut tape, Batch { tokens: &tokens, vision: Some(&vision) }, Trainable::Adapters)?;
    let l = tape.softmax_cross_entropy(fp.logits, &targets)?;
    let grads = tape.backward(l)?;

    let mut report: Option<GradCheckReport> = None;
    let per_tensor = MIN_PROBES.div_ceil(fp.bindings.len()) + 1;
    for (name, var) in &fp.bindings {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(*var)));
        let coords: Vec<usize> = rand::seq::index::sample(&mut r, analytic.len(), per_tensor.min(analytic.len())).into_vec();
        let one = compare(&format!("masked model ({name})"), &analytic, &coords, |i, delta| {
            let mut m = model.clone();
            m.visit_mut(&mut |n, _, t| {
                if n == name {
                    t.data_mut()[i] += delta;
                }
            });
            loss_of(&m)
        })?;
        match &mut report {
            None => report = Some(one),
            Some(acc) => acc.merge(&one),
        }
    }
    let mut report = report.expect("masked model has score tensors");
    report.op_name = "masked model forward (scores)".into();
    Ok(report)
}

/// Central-difference comparison where `eval(i, δ)` returns the objective
/// with coordinate `i` shifted by `δ`.
fn compare<F>(name: &str, analytic: &Tensor, coords: &[usize], mut eval: F) -> Result<GradCheckReport>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    let mut report = GradCheckReport::new(name);
    for &i in coords {
        let numeric = (eval(i, FD_STEP)? - eval(i, -FD_STEP)?) / (2.0 * FD_STEP);
        report.record(analytic.data()[i], numeric);
    }
    Ok(report)
}

/// Measured gradients of a 4×4 hard-masked layer: (∂L/∂S, ∂L/∂M, ∂L/∂W′, W).
pub fn ste_gradients(seed: u64, k: f64) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let mut r = rng(seed);
    let w = Tensor::randn(&[4, 4], 1.0, &mut r);
    let s = Tensor::randn(&[4, 4], 1.0, &mut r);
    let x = Tensor::randn(&[3, 4], 1.0, &mut r);
    let weights = Tensor::randn(&[3, 4], 1.0, &mut r);
    let layer = MaskedLinear::new(w.clone(), None, ScoreMatrix::new(s, "w")?, MaskSpec::hard(k)?)?;
    let mut tape = Tape::new();
    let vars = layer.record(&mut tape, true)?;
    tape.retain_grad(vars.mask);
    tape.retain_grad(vars.effective_weight);
    let xv = tape.constant(x);
    let y = MaskedLinear::apply(&mut tape, &vars, xv)?;
    let loss = weighted_sum(&mut tape, y, &weights)?;
    let g = tape.backward(loss)?;
    let get = |v: Var| g.get(v).cloned().expect("retained gradient");
    Ok((get(vars.scores), get(vars.mask), get(vars.effective_weight), w))
}

/// Independent oracle for the hard mask: sort indices by (|s|, index) and
/// zero the first ⌊k·n⌋.
pub fn hard_mask_oracle(scores: &[f64], k: f64) -> Vec<f64> {
    let n = scores.len();
    let z = ((k * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].abs().total_cmp(&scores[b].abs()).then(a.cmp(&b)));
    let mut m = vec![1.0; n];
    for &i in &order[..z.min(n)] {
        m[i] = 0.0;
    }
    m
}

/// Checks one (S, k) case of the hard-mask contract against the oracle and
/// the nesting property for `k2 ≥ k`. Returns a description of the first
/// violation.
pub fn hard_mask_case(rows: usize, cols: usize, values: &[f64], k: f64, k2: f64) -> std::result::Result<(), String> {
    let s = ScoreMatrix::new(
        Tensor::new(vec![rows, cols], values.to_vec()).map_err(|e| e.to_string())?,
        "w",
    )
    .map_err(|e| e.to_string())?;
    let n = rows * cols;
    let m = hard_mask(&s, k).map_err(|e| e.to_string())?;
    let zeros = m.data().iter().filter(|&&v| v == 0.0).count();
    let expected = ((k * n as f64) + 1e-9).floor() as usize;
    if zeros != expected {
        return Err(format!("k={k} n={n}: {zeros} zeros, expected {expected}"));
    }
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err("mask is not binary".into());
    }
    let max_zero = values.iter().zip(m.data()).filter(|(_, &v)| v == 0.0).map(|(s, _)| s.abs()).fold(0.0, f64::max);
    let min_kept = values
        .iter()
        .zip(m.data())
        .filter(|(_, &v)| v == 1.0)
        .map(|(s, _)| s.abs())
        .fold(f64::INFINITY, f64::min);
    if zeros > 0 && zeros < n && max_zero > min_kept {
        return Err(format!("pruned |S| {max_zero} exceeds kept |S| {min_kept}"));
    }
    if m.data() != hard_mask_oracle(values, k).as_slice() {
        return Err("mask differs from the sort oracle".into());
    }
    let m2 = hard_mask(&s, k2).map_err(|e| e.to_string())?;
    if m.data().iter().zip(m2.data()).any(|(&a, &b)| a == 0.0 && b != 0.0) {
        return Err(format!("zeros at k={k} are not zeros at k={k2}"));
    }
    Ok(())
}

/// Score entries drawn partly from a coarse grid so ties are common.
fn score_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-3.0f64..3.0, (-4i32..=4).prop_map(|v| v as f64 * 0.25)], n)
}

pub fn score_case() -> impl Strategy<Value = (usize, usize, Vec<f64>, f64, f64)> {
    (1usize..9, 1usize..9).prop_flat_map(|(r, c)| {
        (Just(r), Just(c), score_values(r * c), 0.0f64..=1.0, 0.0f64..=1.0)
            .prop_map(|(r, c, v, a, b)| (r, c, v, a.min(b), a.max(b)))
    })
}
