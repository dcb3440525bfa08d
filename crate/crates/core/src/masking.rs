//! Learnable masks over frozen weights.
//!
//! Every frozen matrix `W` is paired with a score matrix `S` of the same
//! shape, and the layer computes with the effective weight `W ⊙ M` where the
//! mask `M` is derived from `S` at every forward pass:
//!
//! * **hard**: `M` is binary; the `⌊k·mn⌋` entries with the smallest `|S|`
//!   are zeroed, so `k` is the pruned fraction. Gradients reach `S` through
//!   the straight-through rule `∂L/∂S = ∂L/∂M`.
//! * **soft**: `M = σ(S/T)`. Gradients use either the true sigmoid
//!   derivative or the same straight-through rule.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid_scalar as sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standard deviation of the random score initialization used for hard masks.
pub const HARD_INIT_SCALE: f64 = 0.01;
/// Mean of the hard-mask score initialization.
pub const HARD_INIT_OFFSET: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// `∂L/∂S = ∂L/∂M`.
    Ste,
    /// `∂L/∂S = ∂L/∂M ⊙ M ⊙ (1 − M) / T`.
    TrueSigmoid,
}

/// Mask family with its hyperparameters.
///
/// Hard masks always use the straight-through gradient, so the variant
/// carries no gradient mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    Hard {
        sparsity: f64,
    },
    Soft {
        init_value: f64,
        temperature: f64,
        grad_mode: GradMode,
    },
}

impl MaskSpec {
    pub fn hard(sparsity: f64) -> Result<Self> {
        let s = MaskSpec::Hard { sparsity };
        s.validate()?;
        Ok(s)
    }

    pub fn soft(init_value: f64, temperature: f64, grad_mode: GradMode) -> Result<Self> {
        let s = MaskSpec::Soft {
            init_value,
            temperature,
            grad_mode,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskSpec::Hard { sparsity } => check_fraction(sparsity),
            MaskSpec::Soft {
                init_value,
                temperature,
                ..
            } => {
                check_temperature(temperature)?;
                if !init_value.is_finite() {
                    return Err(Error::config("init_value", "must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn grad_mode(&self) -> GradMode {
        match *self {
            MaskSpec::Hard { .. } => GradMode::Ste,
            MaskSpec::Soft { grad_mode, .. } => grad_mode,
        }
    }

    pub fn is_soft(&self) -> bool {
        matches!(self, MaskSpec::Soft { .. })
    }

    /// Mask value every entry starts from under constant soft initialization.
    pub fn initial_mask_value(&self) -> Option<f64> {
        match *self {
            MaskSpec::Soft {
                init_value,
                temperature,
                ..
            } => Some(sigmoid(init_value / temperature)),
            MaskSpec::Hard { .. } => None,
        }
    }

    /// Warns when the initial soft mask noticeably scales down the weights.
    pub fn disruption_warning(&self) -> Option<String> {
        let m = self.initial_mask_value()?;
        (m < 0.9).then(|| format!("initial soft mask value {m:.4} is far from 1; the adapted model starts away from the frozen one"))
    }
}

fn check_fraction(k: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&k) {
        return Err(Error::config("sparsity", format!("{k} is outside [0, 1]")));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::config("temperature", format!("{t} must be positive")));
    }
    Ok(())
}

/// Learnable scores paired with one frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: Tensor,
    pub paired_weight: String,
}

impl ScoreMatrix {
    pub fn new(values: Tensor, paired_weight: impl Into<String>) -> Result<Self> {
        if !values.all_finite() {
            return Err(Error::NonFinite("score matrix".into()));
        }
        Ok(ScoreMatrix {
            values,
            paired_weight: paired_weight.into(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// Number of entries zeroed by a hard mask of sparsity `k` over `n` entries.
///
/// `⌊k·n⌋`, with a 1e-9 slack so decimal fractions such as `0.29·100` land
/// on the intended integer.
pub fn masked_count(k: f64, n: usize) -> usize {
    ((k * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Flat indices ordered by ascending `|S|`, ties by index.
fn magnitude_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| cmp_magnitude(scores, a, b));
    idx
}

fn cmp_magnitude(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[a].abs().total_cmp(&scores[b].abs()).then(a.cmp(&b))
}

/// Magnitude threshold of a hard mask: the smallest retained `|S|`.
///
/// Entries with `|S|` strictly below the threshold are always masked; ties
/// at the threshold are resolved by flat index. Returns `0.0` when nothing
/// is masked and `+∞` when everything is.
pub fn threshold_tau(scores: &ScoreMatrix, k: f64) -> Result<f64> {
    check_fraction(k)?;
    let s = scores.values.data();
    if s.is_empty() {
        return Err(Error::invalid("empty score matrix"));
    }
    let z = masked_count(k, s.len());
    if z == 0 {
        return Ok(0.0);
    }
    if z == s.len() {
        return Ok(f64::INFINITY);
    }
    let order = magnitude_order(s);
    Ok(s[order[z]].abs())
}

/// Binary mask zeroing the `⌊k·mn⌋` smallest-magnitude scores.
pub fn hard_mask(scores: &ScoreMatrix, k: f64) -> Result<Tensor> {
    check_fraction(k)?;
    let s = scores.values.data();
    if s.is_empty() {
        return Err(Error::invalid("empty score matrix"));
    }
    let z = masked_count(k, s.len());
    let mut mask = Tensor::ones(scores.shape());
    if z == 0 {
        return Ok(mask);
    }
    let mut idx: Vec<usize> = (0..s.len()).collect();
    if z < s.len() {
        idx.select_nth_unstable_by(z - 1, |&a, &b| cmp_magnitude(s, a, b));
    }
    let m = mask.data_mut();
    for &i in &idx[..z] {
        m[i] = 0.0;
    }
    Ok(mask)
}

/// `σ(S/T)` elementwise.
pub fn soft_mask(scores: &ScoreMatrix, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    Ok(scores.values.map(|s| sigmoid(s / temperature)))
}

/// Mask values for the current scores under `spec`.
pub fn mask_values(scores: &ScoreMatrix, spec: &MaskSpec) -> Result<Tensor> {
    match *spec {
        MaskSpec::Hard { sparsity } => hard_mask(scores, sparsity),
        MaskSpec::Soft { temperature, .. } => soft_mask(scores, temperature),
    }
}

/// Straight-through score gradient: the mask gradient passes unchanged.
pub fn grad_scores_ste(upstream: &Tensor) -> Tensor {
    upstream.clone()
}

/// Score gradient through the true sigmoid derivative.
pub fn grad_scores_sigmoid(upstream: &Tensor, scores: &ScoreMatrix, temperature: f64) -> Result<Tensor> {
    check_temperature(temperature)?;
    upstream.zip_map(&scores.values, "grad_scores_sigmoid", |g, s| {
        let m = sigmoid(s / temperature);
        g * m * (1.0 - m) / temperature
    })
}

/// Initial scores for a weight of the given shape.
///
/// Soft masks start from the constant `init_value`; hard masks from
/// `1 + N(0, 1)·0.01` drawn from `rng`, so every score starts positive and
/// magnitude order matches signed order.
pub fn init_scores<R: Rng + ?Sized>(
    shape: &[usize],
    spec: &MaskSpec,
    paired_weight: &str,
    rng: &mut R,
) -> Result<ScoreMatrix> {
    spec.validate()?;
    let values = match *spec {
        MaskSpec::Soft { init_value, .. } => Tensor::full(shape, init_value),
        MaskSpec::Hard { .. } => Tensor::randn(shape, HARD_INIT_SCALE, rng).map(|v| v + HARD_INIT_OFFSET),
    };
    ScoreMatrix::new(values, paired_weight)
}

/// Records the mask for `scores` on a tape.
///
/// The returned variable carries the forward mask values; its backward rule
/// is the one selected by the spec's gradient mode.
pub fn mask_on_tape(tape: &mut Tape, scores: Var, spec: &MaskSpec) -> Result<Var> {
    let sm = ScoreMatrix {
        values: tape.value(scores).clone(),
        paired_weight: String::new(),
    };
    match *spec {
        MaskSpec::Hard { sparsity } => {
            let m = hard_mask(&sm, sparsity)?;
            tape.straight_through(scores, m)
        }
        MaskSpec::Soft {
            temperature,
            grad_mode: GradMode::Ste,
            ..
        } => {
            let m = soft_mask(&sm, temperature)?;
            tape.straight_through(scores, m)
        }
        MaskSpec::Soft {
            temperature,
            grad_mode: GradMode::TrueSigmoid,
            ..
        } => {
            check_temperature(temperature)?;
            let z = tape.div_scalar(scores, temperature);
            Ok(tape.sigmoid(z))
        }
    }
}

/// A frozen linear map `y = x·(W ⊙ M)ᵀ + b` with trainable mask scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLinear {
    pub frozen_weight: Tensor,
    pub bias: Option<Tensor>,
    pub scores: ScoreMatrix,
    pub spec: MaskSpec,
}

/// Tape handles created by [`MaskedLinear::record`].
#[derive(Debug, Clone, Copy)]
pub struct MaskedVars {
    pub scores: Var,
    pub mask: Var,
    pub effective_weight: Var,
    pub bias: Option<Var>,
}

impl MaskedLinear {
    pub fn new(frozen_weight: Tensor, bias: Option<Tensor>, scores: ScoreMatrix, spec: MaskSpec) -> Result<Self> {
        frozen_weight.check_same_shape(&scores.values, "masked_linear")?;
        frozen_weight.dims2()?;
        spec.validate()?;
        if let Some(b) = &bias {
            if b.len() != frozen_weight.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "masked_linear bias",
                    left: frozen_weight.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(MaskedLinear {
            frozen_weight,
            bias,
            scores,
            spec,
        })
    }

    pub fn mask(&self) -> Result<Tensor> {
        mask_values(&self.scores, &self.spec)
    }

    pub fn effective_weight(&self) -> Result<Tensor> {
        self.frozen_weight.zip_map(&self.mask()?, "elementwise_mul", |w, m| w * m)
    }

    /// Puts the layer on a tape; `train_scores` makes the scores a gradient leaf.
    pub fn record(&self, tape: &mut Tape, train_scores: bool) -> Result<MaskedVars> {
        let w = tape.constant(self.frozen_weight.clone());
        let s = tape.leaf(self.scores.values.clone(), train_scores);
        let m = mask_on_tape(tape, s, &self.spec)?;
        let weff = tape.mul(w, m)?;
        let bias = self.bias.as_ref().map(|b| tape.constant(b.clone()));
        Ok(MaskedVars {
            scores: s,
            mask: m,
            effective_weight: weff,
            bias,
        })
    }

    /// Forward on a tape, given handles from [`MaskedLinear::record`].
    pub fn apply(tape: &mut Tape, vars: &MaskedVars, x: Var) -> Result<Var> {
        let y = tape.matmul_t(x, vars.effective_weight)?;
        match vars.bias {
            Some(b) => tape.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Inference-only forward over rows of `x`; the mask is recomputed
    /// from the current scores.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.record(&mut tape, false)?;
        let xv = tape.constant(x.clone());
        let y = Self::apply(&mut tape, &vars, xv)?;
        Ok(tape.value(y).clone())
    }
}
