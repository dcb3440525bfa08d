//! Toy decoder-only language model with a vision-stub front end.
//!
//! Pre-norm blocks with RMS normalization, causal multi-head attention
//! (Q/K/V/O) and a gated (gate/up/down) or plain (up/down) MLP. An optional
//! raw feature vector per sequence passes through a fixed random vision stub
//! and a linear projector, and is prepended as position 0.
//!
//! Any of the eight linear sublayer kinds can be wrapped by a mask or a
//! low-rank adapter through [`ToyVlm::apply_placement`] and
//! [`ToyVlm::apply_lowrank`]. Embeddings, norms, the vision stub and the
//! output head are never wrapped.

mod config;
mod lowrank;
mod placement;

pub use config::ModelConfig;
pub use lowrank::LowRankLinear;
pub use placement::{PlacementPolicy, ProjKind};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::masking::{init_scores, MaskSpec, MaskedLinear};
use crate::tensor::Tensor;

/// How a parameter tensor participates in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// The random vision stub; never trained and not counted.
    Fixed,
    /// Pretrained weights, norms and embeddings.
    Base,
    /// Mask scores.
    Scores,
    /// Low-rank adapter factors.
    LowRank,
}

/// Which leaves a forward pass records as requiring gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    /// Scores and low-rank factors only.
    Adapters,
    /// All base parameters (full fine-tuning / pretraining).
    Base,
}

/// Regime used for trainable-parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    Frozen,
    Adapters,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinearSlot {
    Plain(Tensor),
    Masked(MaskedLinear),
    LowRank(LowRankLinear),
}

impl LinearSlot {
    pub fn frozen_weight(&self) -> &Tensor {
        match self {
            LinearSlot::Plain(w) => w,
            LinearSlot::Masked(m) => &m.frozen_weight,
            LinearSlot::LowRank(l) => &l.frozen_weight,
        }
    }

    fn frozen_weight_mut(&mut self) -> &mut Tensor {
        match self {
            LinearSlot::Plain(w) => w,
            LinearSlot::Masked(m) => &mut m.frozen_weight,
            LinearSlot::LowRank(l) => &mut l.frozen_weight,
        }
    }

    pub fn masked(&self) -> Option<&MaskedLinear> {
        match self {
            LinearSlot::Masked(m) => Some(m),
            _ => None,
        }
    }

    pub fn masked_mut(&mut self) -> Option<&mut MaskedLinear> {
        match self {
            LinearSlot::Masked(m) => Some(m),
            _ => None,
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        f(&format!("{prefix}.weight"), ParamRole::Base, self.frozen_weight());
        match self {
            LinearSlot::Plain(_) => {}
            LinearSlot::Masked(m) => f(&format!("{prefix}.scores"), ParamRole::Scores, &m.scores.values),
            LinearSlot::LowRank(l) => {
                f(&format!("{prefix}.lora_down"), ParamRole::LowRank, &l.down);
                f(&format!("{prefix}.lora_up"), ParamRole::LowRank, &l.up);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        f(&format!("{prefix}.weight"), ParamRole::Base, self.frozen_weight_mut());
        match self {
            LinearSlot::Plain(_) => {}
            LinearSlot::Masked(m) => f(&format!("{prefix}.scores"), ParamRole::Scores, &mut m.scores.values),
            LinearSlot::LowRank(l) => {
                f(&format!("{prefix}.lora_down"), ParamRole::LowRank, &mut l.down);
                f(&format!("{prefix}.lora_up"), ParamRole::LowRank, &mut l.up);
            }
        }
    }

    fn apply(&self, tape: &mut Tape, x: Var, prefix: &str, trainable: Trainable, binds: &mut Vec<(String, Var)>) -> Result<Var> {
        match self {
            LinearSlot::Plain(w) => {
                let train = trainable == Trainable::Base;
                let wv = tape.leaf(w.clone(), train);
                if train {
                    binds.push((format!("{prefix}.weight"), wv));
                }
                tape.matmul_t(x, wv)
            }
            LinearSlot::Masked(m) => {
                let train = trainable == Trainable::Adapters;
                let vars = m.record(tape, train)?;
                if train {
                    binds.push((format!("{prefix}.scores"), vars.scores));
                }
                MaskedLinear::apply(tape, &vars, x)
            }
            LinearSlot::LowRank(l) => {
                let train = trainable == Trainable::Adapters;
                let (y, down, up) = l.apply(tape, x, train)?;
                if train {
                    binds.push((format!("{prefix}.lora_down"), down));
                    binds.push((format!("{prefix}.lora_up"), up));
                }
                Ok(y)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Tensor,
    pub q: LinearSlot,
    pub k: LinearSlot,
    pub v: LinearSlot,
    pub o: LinearSlot,
    pub mlp_norm: Tensor,
    pub gate: Option<LinearSlot>,
    pub up: LinearSlot,
    pub down: LinearSlot,
}

impl Block {
    pub fn slot(&self, kind: ProjKind) -> Option<&LinearSlot> {
        match kind {
            ProjKind::AttnQ => Some(&self.q),
            ProjKind::AttnK => Some(&self.k),
            ProjKind::AttnV => Some(&self.v),
            ProjKind::AttnO => Some(&self.o),
            ProjKind::MlpGate => self.gate.as_ref(),
            ProjKind::MlpUp => Some(&self.up),
            ProjKind::MlpDown => Some(&self.down),
            ProjKind::Projector => None,
        }
    }

    pub fn slot_mut(&mut self, kind: ProjKind) -> Option<&mut LinearSlot> {
        match kind {
            ProjKind::AttnQ => Some(&mut self.q),
            ProjKind::AttnK => Some(&mut self.k),
            ProjKind::AttnV => Some(&mut self.v),
            ProjKind::AttnO => Some(&mut self.o),
            ProjKind::MlpGate => self.gate.as_mut(),
            ProjKind::MlpUp => Some(&mut self.up),
            ProjKind::MlpDown => Some(&mut self.down),
            ProjKind::Projector => None,
        }
    }
}

/// Location of a linear sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotId {
    Projector,
    Layer(usize, ProjKind),
}

impl SlotId {
    pub fn kind(self) -> ProjKind {
        match self {
            SlotId::Projector => ProjKind::Projector,
            SlotId::Layer(_, k) => k,
        }
    }

    pub fn layer(self) -> Option<usize> {
        match self {
            SlotId::Projector => None,
            SlotId::Layer(l, _) => Some(l),
        }
    }

    pub fn prefix(self) -> String {
        match self {
            SlotId::Projector => "projector".into(),
            SlotId::Layer(l, k) => format!("layers.{l}.{}", k.name()),
        }
    }
}

/// One batch of equal-length token sequences with optional per-sequence
/// raw vision features (`[batch, vision_feature_dim]`).
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub tokens: &'a [Vec<usize>],
    pub vision: Option<&'a Tensor>,
}

impl<'a> Batch<'a> {
    pub fn text(tokens: &'a [Vec<usize>]) -> Self {
        Batch { tokens, vision: None }
    }
}

/// Result of recording a forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// `[batch·seq, vocab]`, rows grouped by sequence, token positions only.
    pub logits: Var,
    /// Trainable leaves by parameter name.
    pub bindings: Vec<(String, Var)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn ratio(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyVlm {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub vision_stub: Tensor,
    pub projector: LinearSlot,
    pub layers: Vec<Block>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ToyVlm {
    /// Randomly initialized, unmasked model; deterministic in `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let h = config.mlp_hidden_dim;
        let lin = |out: usize, inp: usize, extra: f64, rng: &mut ChaCha8Rng| {
            LinearSlot::Plain(Tensor::randn(&[out, inp], extra / (inp as f64).sqrt(), rng))
        };
        let resid = 1.0 / (2.0 * config.num_layers.max(1) as f64).sqrt();

        let token_embedding = Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng);
        let position_embedding = Tensor::randn(&[config.context_length, d], 0.1, &mut rng);
        let vision_stub = Tensor::randn(
            &[config.vision_stub_dim, config.vision_feature_dim],
            1.0 / (config.vision_feature_dim as f64).sqrt(),
            &mut rng,
        );
        let projector = lin(d, config.vision_stub_dim, 1.0, &mut rng);
        let layers = (0..config.num_layers)
            .map(|_| Block {
                attn_norm: Tensor::ones(&[d]),
                q: lin(d, d, 1.0, &mut rng),
                k: lin(d, d, 1.0, &mut rng),
                v: lin(d, d, 1.0, &mut rng),
                o: lin(d, d, resid, &mut rng),
                mlp_norm: Tensor::ones(&[d]),
                gate: config.gated_mlp.then(|| lin(h, d, 1.0, &mut rng)),
                up: lin(h, d, 1.0, &mut rng),
                down: lin(d, h, resid, &mut rng),
            })
            .collect();
        let final_norm = Tensor::ones(&[d]);
        let head = Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(ToyVlm {
            config: config.clone(),
            token_embedding,
            position_embedding,
            vision_stub,
            projector,
            layers,
            final_norm,
            head,
        })
    }

    /// All linear sublayer locations, projector first.
    pub fn slot_ids(&self) -> Vec<SlotId> {
        let mut ids = vec![SlotId::Projector];
        for (l, b) in self.layers.iter().enumerate() {
            for k in ProjKind::ATTENTION.into_iter().chain(ProjKind::MLP) {
                if b.slot(k).is_some() {
                    ids.push(SlotId::Layer(l, k));
                }
            }
        }
        ids
    }

    pub fn slot(&self, id: SlotId) -> Option<&LinearSlot> {
        match id {
            SlotId::Projector => Some(&self.projector),
            SlotId::Layer(l, k) => self.layers.get(l)?.slot(k),
        }
    }

    pub fn slot_mut(&mut self, id: SlotId) -> Option<&mut LinearSlot> {
        match id {
            SlotId::Projector => Some(&mut self.projector),
            SlotId::Layer(l, k) => self.layers.get_mut(l)?.slot_mut(k),
        }
    }

    /// Masked sublayers with their locations.
    pub fn masked_slots(&self) -> Vec<(SlotId, &MaskedLinear)> {
        self.slot_ids()
            .into_iter()
            .filter_map(|id| self.slot(id).and_then(LinearSlot::masked).map(|m| (id, m)))
            .collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.slot_ids()
            .into_iter()
            .any(|id| !matches!(self.slot(id), Some(LinearSlot::Plain(_))))
    }

    fn targeted_slots(&self, policy: &PlacementPolicy) -> Result<Vec<SlotId>> {
        policy.validate(self.config.num_layers)?;
        if self.has_adapters() {
            return Err(Error::invalid("model already carries masks or adapters"));
        }
        Ok(self
            .slot_ids()
            .into_iter()
            .filter(|&id| match id {
                SlotId::Projector => policy.targets_projector(),
                SlotId::Layer(l, k) => policy.targets_layer(l, k),
            })
            .collect())
    }

    /// Wraps every targeted linear in a [`MaskedLinear`] sharing its frozen
    /// weight. Score initialization draws from a stream seeded by `seed`.
    pub fn apply_placement(&mut self, policy: &PlacementPolicy, spec: &MaskSpec, seed: u64) -> Result<()> {
        spec.validate()?;
        let ids = self.targeted_slots(policy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in ids {
            let slot = self.slot_mut(id).expect("listed slot");
            let w = slot.frozen_weight().clone();
            let scores = init_scores(w.shape(), spec, &format!("{}.weight", id.prefix()), &mut rng)?;
            *slot = LinearSlot::Masked(MaskedLinear::new(w, None, scores, *spec)?);
        }
        Ok(())
    }

    /// Wraps every targeted linear in a rank-`rank` low-rank adapter.
    pub fn apply_lowrank(&mut self, policy: &PlacementPolicy, rank: usize, seed: u64) -> Result<()> {
        let ids = self.targeted_slots(policy)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut wrapped = Vec::with_capacity(ids.len());
        for &id in &ids {
            let w = self.slot(id).expect("listed slot").frozen_weight().clone();
            wrapped.push(LowRankLinear::new(w, rank, &mut rng)?);
        }
        for (id, l) in ids.into_iter().zip(wrapped) {
            *self.slot_mut(id).expect("listed slot") = LinearSlot::LowRank(l);
        }
        Ok(())
    }

    /// Replaces every mask and adapter by the plain frozen weight.
    pub fn strip_adapters(&mut self) {
        for id in self.slot_ids() {
            let slot = self.slot_mut(id).expect("listed slot");
            let w = slot.frozen_weight().clone();
            *slot = LinearSlot::Plain(w);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
        f("token_embedding", ParamRole::Base, &self.token_embedding);
        f("position_embedding", ParamRole::Base, &self.position_embedding);
        f("vision_stub", ParamRole::Fixed, &self.vision_stub);
        self.projector.visit("projector", f);
        for (l, b) in self.layers.iter().enumerate() {
            f(&format!("layers.{l}.attn_norm"), ParamRole::Base, &b.attn_norm);
            f(&format!("layers.{l}.mlp_norm"), ParamRole::Base, &b.mlp_norm);
            for k in ProjKind::ATTENTION.into_iter().chain(ProjKind::MLP) {
                if let Some(s) = b.slot(k) {
                    s.visit(&SlotId::Layer(l, k).prefix(), f);
                }
            }
        }
        f("final_norm", ParamRole::Base, &self.final_norm);
        f("head", ParamRole::Base, &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
        f("token_embedding", ParamRole::Base, &mut self.token_embedding);
        f("position_embedding", ParamRole::Base, &mut self.position_embedding);
        f("vision_stub", ParamRole::Fixed, &mut self.vision_stub);
        self.projector.visit_mut("projector", f);
        for (l, b) in self.layers.iter_mut().enumerate() {
            f(&format!("layers.{l}.attn_norm"), ParamRole::Base, &mut b.attn_norm);
            f(&format!("layers.{l}.mlp_norm"), ParamRole::Base, &mut b.mlp_norm);
            for k in ProjKind::ATTENTION.into_iter().chain(ProjKind::MLP) {
                if let Some(s) = b.slot_mut(k) {
                    s.visit_mut(&SlotId::Layer(l, k).prefix(), f);
                }
            }
        }
        f("final_norm", ParamRole::Base, &mut self.final_norm);
        f("head", ParamRole::Base, &mut self.head);
    }

    /// `(name, role, tensor)` for every parameter, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, ParamRole, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, r, t| out.push((n.to_string(), r, t.clone())));
        out
    }

    /// SHA-256 of every tensor that adaptation must leave untouched.
    pub fn frozen_hashes(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        self.visit(&mut |n, r, t| {
            if matches!(r, ParamRole::Base | ParamRole::Fixed) {
                out.push((n.to_string(), t.content_hash()));
            }
        });
        out
    }

    /// Exact trainable/total counts; `total` excludes the fixed vision stub.
    pub fn count_trainable(&self, regime: TrainRegime) -> ParamCount {
        let mut base = 0;
        let mut adapters = 0;
        self.visit(&mut |_, r, t| match r {
            ParamRole::Base => base += t.len(),
            ParamRole::Scores | ParamRole::LowRank => adapters += t.len(),
            ParamRole::Fixed => {}
        });
        let trainable = match regime {
            TrainRegime::Frozen => 0,
            TrainRegime::Adapters => adapters,
            TrainRegime::Full => base,
        };
        ParamCount { trainable, total: base }
    }

    /// Records a forward pass and returns `[batch·seq, vocab]` logits.
    pub fn forward_tape(&self, tape: &mut Tape, batch: Batch<'_>, trainable: Trainable) -> Result<ForwardPass> {
        let cfg = &self.config;
        let nb = batch.tokens.len();
        if nb == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let seq = batch.tokens[0].len();
        if seq == 0 || batch.tokens.iter().any(|s| s.len() != seq) {
            return Err(Error::invalid("batch sequences must be non-empty and equal length"));
        }
        let prefix = usize::from(batch.vision.is_some());
        let total_seq = seq + prefix;
        if total_seq > cfg.context_length {
            return Err(Error::invalid(format!(
                "sequence of {total_seq} positions exceeds context length {}",
                cfg.context_length
            )));
        }
        let mut binds = Vec::new();
        let base_train = trainable == Trainable::Base;
        let base_leaf = |tape: &mut Tape, name: &str, t: &Tensor, binds: &mut Vec<(String, Var)>| {
            let v = tape.leaf(t.clone(), base_train);
            if base_train {
                binds.push((name.to_string(), v));
            }
            v
        };

        let flat: Vec<usize> = batch.tokens.iter().flatten().copied().collect();
        let emb = base_leaf(tape, "token_embedding", &self.token_embedding, &mut binds);
        let mut x = tape.gather_rows(emb, &flat)?;

        if let Some(feats) = batch.vision {
            let (fr, fc) = feats.dims2()?;
            if fr != nb || fc != cfg.vision_feature_dim {
                return Err(Error::ShapeMismatch {
                    op: "vision features",
                    left: vec![nb, cfg.vision_feature_dim],
                    right: vec![fr, fc],
                });
            }
            let f = tape.constant(feats.clone());
            let stub = tape.constant(self.vision_stub.clone());
            let z = tape.matmul_t(f, stub)?;
            let p = self.projector.apply(tape, z, "projector", trainable, &mut binds)?;
            // rows 0..nb are prefixes, nb.. are tokens; interleave per sequence
            let stacked = tape.concat_rows(p, x)?;
            let order: Vec<usize> = (0..nb)
                .flat_map(|b| std::iter::once(b).chain((0..seq).map(move |t| nb + b * seq + t)))
                .collect();
            x = tape.gather_rows(stacked, &order)?;
        }

        let pos = base_leaf(tape, "position_embedding", &self.position_embedding, &mut binds);
        let positions: Vec<usize> = (0..nb).flat_map(|_| 0..total_seq).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        x = tape.add(x, pe)?;

        for (l, block) in self.layers.iter().enumerate() {
            let name = |k: ProjKind| SlotId::Layer(l, k).prefix();
            let g1 = base_leaf(tape, &format!("layers.{l}.attn_norm"), &block.attn_norm, &mut binds);
            let h = tape.rms_norm(x, g1)?;
            let q = block.q.apply(tape, h, &name(ProjKind::AttnQ), trainable, &mut binds)?;
            let k = block.k.apply(tape, h, &name(ProjKind::AttnK), trainable, &mut binds)?;
            let v = block.v.apply(tape, h, &name(ProjKind::AttnV), trainable, &mut binds)?;
            let a = tape.causal_attention(q, k, v, nb, total_seq, cfg.num_heads)?;
            let o = block.o.apply(tape, a, &name(ProjKind::AttnO), trainable, &mut binds)?;
            x = tape.add(x, o)?;

            let g2 = base_leaf(tape, &format!("layers.{l}.mlp_norm"), &block.mlp_norm, &mut binds);
            let h = tape.rms_norm(x, g2)?;
            let up = block.up.apply(tape, h, &name(ProjKind::MlpUp), trainable, &mut binds)?;
            let act = match &block.gate {
                Some(gate) => {
                    let gv = gate.apply(tape, h, &name(ProjKind::MlpGate), trainable, &mut binds)?;
                    let s = tape.silu(gv);
                    tape.mul(s, up)?
                }
                None => tape.silu(up),
            };
            let down = block.down.apply(tape, act, &name(ProjKind::MlpDown), trainable, &mut binds)?;
            x = tape.add(x, down)?;
        }

        if prefix > 0 {
            let keep: Vec<usize> = (0..nb)
                .flat_map(|b| (1..total_seq).map(move |t| b * total_seq + t))
                .collect();
            x = tape.gather_rows(x, &keep)?;
        }
        let gf = base_leaf(tape, "final_norm", &self.final_norm, &mut binds);
        let h = tape.rms_norm(x, gf)?;
        let head = base_leaf(tape, "head", &self.head, &mut binds);
        let logits = tape.matmul_t(h, head)?;
        Ok(ForwardPass {
            logits,
            bindings: binds,
        })
    }

    /// Logits `[batch, seq, vocab]`.
    pub fn forward(&self, batch: Batch<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let fp = self.forward_tape(&mut tape, batch, Trainable::Nothing)?;
        let nb = batch.tokens.len();
        let seq = batch.tokens[0].len();
        tape.value(fp.logits)
            .clone()
            .reshape(vec![nb, seq, self.config.vocab_size])
    }

    /// Mean next-token negative log-likelihood of `inputs → targets`.
    pub fn loss(&self, inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<f64> {
        let mut tape = Tape::new();
        let fp = self.forward_tape(&mut tape, Batch::text(inputs), Trainable::Nothing)?;
        let flat: Vec<usize> = targets.iter().flatten().copied().collect();
        let l = tape.softmax_cross_entropy(fp.logits, &flat)?;
        Ok(tape.value(l).data()[0])
    }
}
