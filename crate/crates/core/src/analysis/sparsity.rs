//! Near-zero mask proportions grouped by projection kind and by layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ProjKind, SlotId, ToyVlm};

/// Count of near-zero entries in a group of mask values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub near_zero: usize,
    pub total: usize,
}

impl Fraction {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.near_zero as f64 / self.total as f64
        }
    }

    fn add(&mut self, other: Fraction) {
        self.near_zero += other.near_zero;
        self.total += other.total;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub epsilon: f64,
    pub per_projection: BTreeMap<ProjKind, Fraction>,
    /// Transformer layers in order; layers without masks have a zero total.
    pub per_layer: Vec<Fraction>,
    /// Projector masks, when present.
    pub projector: Option<Fraction>,
    /// One entry per masked sublayer.
    pub per_sublayer: Vec<(String, Fraction)>,
    pub global: Fraction,
}

impl SparsityReport {
    pub fn global_p(&self) -> f64 {
        self.global.value()
    }

    /// Plain-text table: one section per grouping.
    pub fn to_table(&self) -> String {
        let mut s = format!("epsilon\t{}\nglobal_p\t{:.6}\n\n", self.epsilon, self.global_p());
        s.push_str("projection\tnear_zero\ttotal\tfraction\n");
        for (k, f) in &self.per_projection {
            s.push_str(&format!("{}\t{}\t{}\t{:.6}\n", k.label(), f.near_zero, f.total, f.value()));
        }
        s.push_str("\nlayer\tnear_zero\ttotal\tfraction\n");
        if let Some(f) = self.projector {
            s.push_str(&format!("projector\t{}\t{}\t{:.6}\n", f.near_zero, f.total, f.value()));
        }
        for (l, f) in self.per_layer.iter().enumerate() {
            s.push_str(&format!("{l}\t{}\t{}\t{:.6}\n", f.near_zero, f.total, f.value()));
        }
        s
    }

    /// `group,name,near_zero,total,fraction` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,name,near_zero,total,fraction\n");
        let mut row = |g: &str, n: &str, f: &Fraction| {
            s.push_str(&format!("{g},{n},{},{},{}\n", f.near_zero, f.total, f.value()))
        };
        for (k, f) in &self.per_projection {
            row("projection", k.label(), f);
        }
        if let Some(f) = &self.projector {
            row("layer", "projector", f);
        }
        for (l, f) in self.per_layer.iter().enumerate() {
            row("layer", &l.to_string(), f);
        }
        for (n, f) in &self.per_sublayer {
            row("sublayer", n, f);
        }
        row("global", "all", &self.global);
        s
    }
}

/// Fractions of mask values below `epsilon` across every masked sublayer.
pub fn near_zero_report(model: &ToyVlm, epsilon: f64) -> Result<SparsityReport> {
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let slots = model.masked_slots();
    if slots.is_empty() {
        return Err(Error::invalid("model carries no masks"));
    }
    let mut report = SparsityReport {
        epsilon,
        per_projection: BTreeMap::new(),
        per_layer: vec![Fraction::default(); model.config.num_layers],
        projector: None,
        per_sublayer: Vec::with_capacity(slots.len()),
        global: Fraction::default(),
    };
    for (id, m) in slots {
        let mask = m.mask()?;
        let f = Fraction {
            near_zero: mask.data().iter().filter(|&&v| v < epsilon).count(),
            total: mask.len(),
        };
        report.per_projection.entry(id.kind()).or_default().add(f);
        match id {
            SlotId::Projector => report.projector.get_or_insert_with(Fraction::default).add(f),
            SlotId::Layer(l, _) => report.per_layer[l].add(f),
        }
        report.per_sublayer.push((id.prefix(), f));
        report.global.add(f);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{GradMode, MaskSpec};
    use crate::model::{ModelConfig, PlacementPolicy};

    fn masked() -> ToyVlm {
        let cfg = ModelConfig {
            vocab_size: 16,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden_dim: 12,
            context_length: 8,
            vision_feature_dim: 3,
            vision_stub_dim: 4,
            gated_mlp: true,
        };
        let mut m = ToyVlm::build(&cfg, 1).unwrap();
        let spec = MaskSpec::soft(7.0, 2.3, GradMode::TrueSigmoid).unwrap();
        m.apply_placement(&PlacementPolicy::both().with_projector(), &spec, 2).unwrap();
        m
    }

    #[test]
    fn fresh_init_has_no_near_zero_values() {
        let r = near_zero_report(&masked(), 0.01).unwrap();
        assert_eq!(r.global.near_zero, 0);
        assert!(r.per_projection.values().all(|f| f.near_zero == 0));
        assert_eq!(r.per_projection.len(), 8);
    }

    #[test]
    fn forced_key_scores_show_up_in_k_only() {
        let mut m = masked();
        for l in 0..2 {
            let s = m.slot_mut(SlotId::Layer(l, ProjKind::AttnK)).unwrap().masked_mut().unwrap();
            s.scores.values.data_mut().iter_mut().for_each(|v| *v = -50.0);
        }
        let r = near_zero_report(&m, 0.01).unwrap();
        for (k, f) in &r.per_projection {
            let want = if *k == ProjKind::AttnK { 1.0 } else { 0.0 };
            assert_eq!(f.value(), want, "{k:?}");
        }
    }

    #[test]
    fn groups_aggregate_to_global() {
        let mut m = masked();
        let s = m.slot_mut(SlotId::Layer(1, ProjKind::MlpUp)).unwrap().masked_mut().unwrap();
        s.scores.values.data_mut().iter_mut().step_by(3).for_each(|v| *v = -40.0);
        let r = near_zero_report(&m, 0.01).unwrap();
        let by_layer: usize = r.per_layer.iter().chain(r.projector.iter()).map(|f| f.near_zero).sum();
        let by_kind: usize = r.per_projection.values().map(|f| f.near_zero).sum();
        assert_eq!(by_layer, r.global.near_zero);
        assert_eq!(by_kind, r.global.near_zero);
        let weighted: f64 = r
            .per_layer
            .iter()
            .chain(r.projector.iter())
            .map(|f| f.value() * f.total as f64)
            .sum::<f64>()
            / r.global.total as f64;
        assert!((weighted - r.global_p()).abs() < 1e-15);
    }

    #[test]
    fn unmasked_model_rejected() {
        let mut m = masked();
        m.strip_adapters();
        assert!(near_zero_report(&m, 0.01).is_err());
    }
}
