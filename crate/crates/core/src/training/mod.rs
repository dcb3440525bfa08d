//! Training loops: pretraining of the frozen backbone, mask fine-tuning
//! (soft, soft-with-STE, hard), and full / low-rank fine-tuning baselines.
//!
//! Every method optimizes the same objective, the mean next-token negative
//! log-likelihood over all positions of a batch of corpus windows. They differ
//! only in which tensors are trainable.

mod optim;
pub mod sweep;

pub use optim::{Optimizer, OptimizerKind};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::corpus::{shift, Corpus};
use crate::error::{Error, Result};
use crate::masking::{GradMode, MaskSpec};
use crate::model::{Batch, ModelConfig, ParamRole, PlacementPolicy, ToyVlm, TrainRegime, Trainable};

/// Default near-zero threshold for soft-mask sparsity.
pub const DEFAULT_EPSILON: f64 = 0.01;

/// Consecutive steps above 10× the initial loss that count as divergence.
pub const DIVERGENCE_PATIENCE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Soft mask, true sigmoid gradient.
    Smft,
    /// Soft mask, straight-through gradient.
    SmftSte,
    /// Hard top-k mask, straight-through gradient.
    Hmft,
    /// Full fine-tuning.
    Fft,
    /// Low-rank adapters.
    Lora,
}

impl Method {
    pub fn is_mask(self) -> bool {
        matches!(self, Method::Smft | Method::SmftSte | Method::Hmft)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Smft => "smft",
            Method::SmftSte => "smft_ste",
            Method::Hmft => "hmft",
            Method::Fft => "fft",
            Method::Lora => "lora",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Smft, Method::SmftSte, Method::Hmft, Method::Fft, Method::Lora]
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || s.eq_ignore_ascii_case(&m.name().replace('_', "-")))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// How per-position losses combine into the optimized objective. Reported
/// losses are always per-token means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Sum of negative log-likelihoods over positions, averaged over sequences.
    SequenceSum,
    /// Sum over every position of every sequence in the batch.
    #[default]
    BatchSum,
    /// Mean over all predicted tokens.
    TokenMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default)]
    pub mask_spec: Option<MaskSpec>,
    #[serde(default)]
    pub placement: Option<PlacementPolicy>,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Window length in tokens; each window yields `context_length − 1` predictions.
    pub context_length: usize,
    pub seed: u64,
    pub data_fraction: f64,
    #[serde(default)]
    pub lora_rank: Option<usize>,
    pub optimizer: OptimizerKind,
    /// Held-out evaluation interval in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Cap on held-out windows per evaluation; 0 means all.
    pub eval_windows: usize,
    /// Restore the trainable state with the best held-out loss at the end.
    pub keep_best: bool,
    #[serde(default)]
    pub loss_reduction: LossReduction,
}

impl TrainConfig {
    /// Defaults for `method`: SGD at 0.1 for masks, Adam at 1e-3 otherwise.
    pub fn for_method(method: Method) -> Self {
        let (lr, optimizer) = if method.is_mask() {
            (0.1, OptimizerKind::Sgd)
        } else {
            (1e-3, OptimizerKind::Adam)
        };
        let mask_spec = match method {
            Method::Smft => Some(MaskSpec::Soft {
                init_value: 7.0,
                temperature: 2.3,
                grad_mode: GradMode::TrueSigmoid,
            }),
            Method::SmftSte => Some(MaskSpec::Soft {
                init_value: 7.0,
                temperature: 2.3,
                grad_mode: GradMode::Ste,
            }),
            Method::Hmft => Some(MaskSpec::Hard { sparsity: 0.01 }),
            _ => None,
        };
        TrainConfig {
            method,
            placement: (method != Method::Fft).then(PlacementPolicy::both),
            mask_spec,
            learning_rate: lr,
            steps: 200,
            batch_size: 8,
            context_length: 65,
            seed: 0,
            data_fraction: 1.0,
            lora_rank: (method == Method::Lora).then_some(4),
            optimizer,
            eval_every: 50,
            eval_windows: 0,
            keep_best: true,
            loss_reduction: LossReduction::BatchSum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.context_length < 2 {
            return Err(Error::config("context_length", "must be at least 2"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::config("data_fraction", "must lie in (0, 1]"));
        }
        match self.method {
            Method::Smft | Method::SmftSte | Method::Hmft => {
                let spec = self
                    .mask_spec
                    .ok_or_else(|| Error::config("mask_spec", format!("required for method {}", self.method)))?;
                if self.placement.is_none() {
                    return Err(Error::config("placement", format!("required for method {}", self.method)));
                }
                spec.validate()?;
                let ok = matches!(
                    (self.method, spec),
                    (Method::Hmft, MaskSpec::Hard { .. })
                        | (Method::Smft, MaskSpec::Soft { grad_mode: GradMode::TrueSigmoid, .. })
                        | (Method::SmftSte, MaskSpec::Soft { grad_mode: GradMode::Ste, .. })
                );
                if !ok {
                    return Err(Error::config(
                        "mask_spec",
                        format!("{spec:?} does not match method {}", self.method),
                    ));
                }
                if self.lora_rank.is_some() {
                    return Err(Error::config("lora_rank", "only valid for method lora"));
                }
            }
            Method::Fft | Method::Lora => {
                if self.mask_spec.is_some() {
                    return Err(Error::config("mask_spec", format!("not allowed for method {}", self.method)));
                }
                if self.method == Method::Fft && (self.placement.is_some() || self.lora_rank.is_some()) {
                    return Err(Error::config("placement", "not allowed for method fft"));
                }
                if self.method == Method::Lora {
                    if self.placement.is_none() {
                        return Err(Error::config("placement", "required for method lora"));
                    }
                    if self.lora_rank.is_none_or(|r| r == 0) {
                        return Err(Error::config("lora_rank", "must be at least 1"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Switches a soft-mask config between the true-sigmoid and STE methods.
    pub fn with_soft_grad_mode(mut self, mode: GradMode) -> Self {
        if let Some(MaskSpec::Soft { grad_mode, .. }) = &mut self.mask_spec {
            *grad_mode = mode;
            self.method = match mode {
                GradMode::Ste => Method::SmftSte,
                GradMode::TrueSigmoid => Method::Smft,
            };
        }
        self
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: usize,
    /// Batch loss before this step's update.
    pub train_loss: f64,
    /// Held-out loss after this step's update, when evaluated.
    pub eval_loss: Option<f64>,
    /// Not persisted; excluded from reproducibility comparisons.
    #[serde(skip)]
    pub wall_seconds: f64,
    /// Soft masks: fraction of mask values below [`DEFAULT_EPSILON`].
    pub sparsity: Option<f64>,
}

impl Metrics {
    pub const HEADER: &'static str = "step\ttrain_loss\teval_loss\tsparsity\twall_seconds";

    /// Tab-separated row matching [`Metrics::HEADER`]; absent values print `-`.
    pub fn to_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        format!(
            "{}\t{:.6}\t{}\t{}\t{:.3}",
            self.step,
            self.train_loss,
            opt(self.eval_loss),
            opt(self.sparsity),
            self.wall_seconds
        )
    }
}

/// Renders a metrics history as a tab-separated table.
pub fn metrics_table(history: &[Metrics]) -> String {
    let mut out = String::from(Metrics::HEADER);
    out.push('\n');
    for m in history {
        out.push_str(&m.to_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub perplexity: f64,
}

impl EvalResult {
    fn from_loss(loss: f64) -> Self {
        EvalResult {
            loss,
            perplexity: loss.exp(),
        }
    }
}

const EVAL_CHUNK: usize = 32;

/// Mean next-token loss of `model` over `windows`, weighting every
/// prediction equally.
pub fn evaluate_windows(model: &ToyVlm, windows: &[Vec<usize>]) -> Result<EvalResult> {
    if windows.is_empty() {
        return Err(Error::invalid("evaluation needs at least one window"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(EVAL_CHUNK) {
        let (x, y) = shift(chunk);
        let n: usize = y.iter().map(Vec::len).sum();
        total += model.loss(&x, &y)? * n as f64;
        count += n;
    }
    Ok(EvalResult::from_loss(total / count as f64))
}

/// Held-out loss and perplexity of a checkpoint on a corpus.
pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus) -> Result<EvalResult> {
    let windows = if corpus.heldout.is_empty() {
        &corpus.train
    } else {
        &corpus.heldout
    };
    evaluate_windows(&checkpoint.model, windows)
}

fn eval_subset<'a>(corpus: &'a Corpus, cfg: &TrainConfig) -> &'a [Vec<usize>] {
    let h = if corpus.heldout.is_empty() {
        &corpus.train[..]
    } else {
        &corpus.heldout[..]
    };
    if cfg.eval_windows == 0 {
        h
    } else {
        &h[..cfg.eval_windows.min(h.len())]
    }
}

/// Fraction of mask values below `epsilon`, overall and per masked sublayer.
#[derive(Debug, Clone, PartialEq)]
pub struct EmergentSparsity {
    pub epsilon: f64,
    pub p: f64,
    pub per_layer: Vec<(String, f64)>,
}

/// Emergent sparsity of a soft-masked model.
pub fn extract_emergent_sparsity(model: &ToyVlm, epsilon: f64) -> Result<EmergentSparsity> {
    let slots = model.masked_slots();
    if slots.is_empty() {
        return Err(Error::invalid("model carries no masks"));
    }
    if slots.iter().any(|(_, m)| !m.spec.is_soft()) {
        return Err(Error::invalid("emergent sparsity is defined for soft masks only"));
    }
    let mut near = 0usize;
    let mut total = 0usize;
    let mut per_layer = Vec::with_capacity(slots.len());
    for (id, m) in slots {
        let mask = m.mask()?;
        let z = mask.data().iter().filter(|&&v| v < epsilon).count();
        per_layer.push((id.prefix(), z as f64 / mask.len() as f64));
        near += z;
        total += mask.len();
    }
    Ok(EmergentSparsity {
        epsilon,
        p: near as f64 / total as f64,
        per_layer,
    })
}

fn soft_sparsity(model: &ToyVlm, epsilon: f64) -> Option<f64> {
    extract_emergent_sparsity(model, epsilon).ok().map(|s| s.p)
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<Metrics>,
    /// Step whose state was kept (0 means the initial state).
    pub best_step: usize,
    pub best_eval: Option<f64>,
}

fn trainable_names(model: &ToyVlm, trainable: Trainable) -> Vec<String> {
    let mut out = Vec::new();
    model.visit(&mut |n, r, _| {
        let hit = match trainable {
            Trainable::Nothing => false,
            Trainable::Adapters => matches!(r, ParamRole::Scores | ParamRole::LowRank),
            Trainable::Base => r == ParamRole::Base,
        };
        if hit {
            out.push(n.to_string());
        }
    });
    out
}

fn snapshot(model: &ToyVlm, names: &[String]) -> HashMap<String, crate::Tensor> {
    let mut out = HashMap::new();
    model.visit(&mut |n, _, t| {
        if names.iter().any(|x| x == n) {
            out.insert(n.to_string(), t.clone());
        }
    });
    out
}

fn restore(model: &mut ToyVlm, saved: &HashMap<String, crate::Tensor>) {
    model.visit_mut(&mut |n, _, t| {
        if let Some(s) = saved.get(n) {
            *t = s.clone();
        }
    });
}

/// Shared optimization loop; updates `model` in place.
fn run_loop(
    model: &mut ToyVlm,
    trainable: Trainable,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<(Vec<Metrics>, usize, Option<f64>)> {
    let pool = corpus.train_prefix(cfg.data_fraction);
    let eval_set = eval_subset(corpus, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let started = Instant::now();
    let mut history = Vec::with_capacity(cfg.steps);

    let mut best_eval = None;
    let mut best_step = 0;
    let mut best_state: Option<HashMap<String, crate::Tensor>> = None;
    let names = trainable_names(model, trainable);
    if cfg.keep_best && cfg.steps > 0 {
        best_eval = Some(evaluate_windows(model, eval_set)?.loss);
        best_state = Some(snapshot(model, &names));
    }

    let mut initial_loss = None;
    let mut over = 0usize;
    for step in 0..cfg.steps {
        let windows: Vec<Vec<usize>> = (0..cfg.batch_size)
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let (x, y) = shift(&windows);
        let mut tape = Tape::new();
        let fp = model.forward_tape(&mut tape, Batch::text(&x), trainable)?;
        let flat: Vec<usize> = y.iter().flatten().copied().collect();
        let loss_var = tape.softmax_cross_entropy(fp.logits, &flat)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::TrainingAborted {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        let first = *initial_loss.get_or_insert(loss);
        if loss > 10.0 * first {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(Error::TrainingAborted {
                    step,
                    reason: format!("loss above 10x initial ({first:.4}) for {DIVERGENCE_PATIENCE} steps"),
                });
            }
        } else {
            over = 0;
        }

        let objective = match cfg.loss_reduction {
            LossReduction::TokenMean => loss_var,
            LossReduction::SequenceSum => tape.scale(loss_var, y[0].len() as f64),
            LossReduction::BatchSum => tape.scale(loss_var, flat.len() as f64),
        };
        let mut grads = tape.backward(objective)?;
        let mut by_name = HashMap::with_capacity(fp.bindings.len());
        for (name, var) in &fp.bindings {
            if let Some(g) = grads.take(*var) {
                by_name.insert(name.clone(), g);
            }
        }
        opt.step(model, &by_name);

        let last = step + 1 == cfg.steps;
        let eval_loss = if last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            Some(evaluate_windows(model, eval_set)?.loss)
        } else {
            None
        };
        if let (Some(e), true) = (eval_loss, cfg.keep_best) {
            if best_eval.is_none_or(|b| e < b) {
                best_eval = Some(e);
                best_step = step + 1;
                best_state = Some(snapshot(model, &names));
            }
        }
        history.push(Metrics {
            step,
            train_loss: loss,
            eval_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
            sparsity: soft_sparsity(model, DEFAULT_EPSILON),
        });
    }

    if let Some(state) = best_state {
        restore(model, &state);
    }
    Ok((history, best_step, best_eval))
}

/// Errors if any base or fixed tensor differs from `before`.
pub fn verify_frozen(before: &[(String, String)], model: &ToyVlm) -> Result<()> {
    let after = model.frozen_hashes();
    if before.len() != after.len() {
        return Err(Error::FrozenTensorModified("<tensor set>".into()));
    }
    for ((name, h0), (_, h1)) in before.iter().zip(&after) {
        if h0 != h1 {
            return Err(Error::FrozenTensorModified(name.clone()));
        }
    }
    Ok(())
}

fn check_corpus(model: &ModelConfig, cfg: &TrainConfig, corpus: &Corpus) -> Result<()> {
    if corpus.window != cfg.context_length {
        return Err(Error::config(
            "context_length",
            format!("corpus windows hold {} tokens, config asks for {}", corpus.window, cfg.context_length),
        ));
    }
    if cfg.context_length - 1 > model.context_length {
        return Err(Error::config(
            "context_length",
            format!(
                "{} input positions exceed the model's {}",
                cfg.context_length - 1,
                model.context_length
            ),
        ));
    }
    if corpus.train.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    Ok(())
}

/// Trains a fresh toy model on `corpus` with every weight trainable and
/// returns it as a frozen base checkpoint.
///
/// `cfg.method` must be `fft`; `seed` drives both weight initialization and
/// batch sampling.
pub fn pretrain_toy(config: &ModelConfig, cfg: &TrainConfig, corpus: &Corpus, seed: u64) -> Result<TrainOutcome> {
    if cfg.method != Method::Fft {
        return Err(Error::config("method", "pretraining uses method fft"));
    }
    cfg.validate()?;
    check_corpus(config, cfg, corpus)?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut model = ToyVlm::build(config, seed)?;
    let (metrics, best_step, best_eval) = run_loop(&mut model, Trainable::Base, &cfg, corpus)?;
    let checkpoint = Checkpoint {
        model,
        regime: TrainRegime::Frozen,
        method: None,
        train_config: Some(cfg),
        metrics: metrics.clone(),
    };
    Ok(TrainOutcome {
        checkpoint,
        metrics,
        best_step,
        best_eval,
    })
}

fn check_base(base: &Checkpoint) -> Result<()> {
    if base.model.has_adapters() {
        return Err(Error::invalid("base checkpoint already carries masks or adapters"));
    }
    Ok(())
}

/// Mask fine-tuning: wraps the placement targets of `base` in masks and
/// trains only the score matrices.
pub fn train_mft(base: &Checkpoint, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    if !cfg.method.is_mask() {
        return Err(Error::config("method", format!("{} is not a mask method", cfg.method)));
    }
    cfg.validate()?;
    check_base(base)?;
    check_corpus(&base.model.config, cfg, corpus)?;
    let spec = cfg.mask_spec.expect("validated");
    let placement = cfg.placement.as_ref().expect("validated");
    let mut model = base.model.clone();
    let before = model.frozen_hashes();
    model.apply_placement(placement, &spec, cfg.seed)?;
    let (metrics, best_step, best_eval) = run_loop(&mut model, Trainable::Adapters, cfg, corpus)?;
    verify_frozen(&before, &model)?;
    finish(model, TrainRegime::Adapters, cfg, metrics, best_step, best_eval)
}

/// Full fine-tuning baseline: every base weight is trainable.
pub fn train_fft_baseline(base: &Checkpoint, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    if cfg.method != Method::Fft {
        return Err(Error::config("method", format!("expected fft, got {}", cfg.method)));
    }
    cfg.validate()?;
    check_base(base)?;
    check_corpus(&base.model.config, cfg, corpus)?;
    let mut model = base.model.clone();
    let (metrics, best_step, best_eval) = run_loop(&mut model, Trainable::Base, cfg, corpus)?;
    finish(model, TrainRegime::Full, cfg, metrics, best_step, best_eval)
}

/// Low-rank baseline: frozen weights plus trainable rank-r branches on the
/// placement targets.
pub fn train_lora_baseline(base: &Checkpoint, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    if cfg.method != Method::Lora {
        return Err(Error::config("method", format!("expected lora, got {}", cfg.method)));
    }
    cfg.validate()?;
    check_base(base)?;
    check_corpus(&base.model.config, cfg, corpus)?;
    let rank = cfg.lora_rank.expect("validated");
    let placement = cfg.placement.as_ref().expect("validated");
    let mut model = base.model.clone();
    let before = model.frozen_hashes();
    model.apply_lowrank(placement, rank, cfg.seed)?;
    let (metrics, best_step, best_eval) = run_loop(&mut model, Trainable::Adapters, cfg, corpus)?;
    verify_frozen(&before, &model)?;
    finish(model, TrainRegime::Adapters, cfg, metrics, best_step, best_eval)
}

/// Dispatches to the trainer matching `cfg.method`.
pub fn finetune(base: &Checkpoint, cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    match cfg.method {
        Method::Smft | Method::SmftSte | Method::Hmft => train_mft(base, cfg, corpus),
        Method::Fft => train_fft_baseline(base, cfg, corpus),
        Method::Lora => train_lora_baseline(base, cfg, corpus),
    }
}

fn finish(
    model: ToyVlm,
    regime: TrainRegime,
    cfg: &TrainConfig,
    metrics: Vec<Metrics>,
    best_step: usize,
    best_eval: Option<f64>,
) -> Result<TrainOutcome> {
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            regime,
            method: Some(cfg.method),
            train_config: Some(cfg.clone()),
            metrics: metrics.clone(),
        },
        metrics,
        best_step,
        best_eval,
    })
}
