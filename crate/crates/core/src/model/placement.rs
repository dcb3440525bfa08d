use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear sublayers that can carry a mask or adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    MlpGate,
    MlpUp,
    MlpDown,
    Projector,
}

impl ProjKind {
    pub const ATTENTION: [ProjKind; 4] = [ProjKind::AttnQ, ProjKind::AttnK, ProjKind::AttnV, ProjKind::AttnO];
    pub const MLP: [ProjKind; 3] = [ProjKind::MlpGate, ProjKind::MlpUp, ProjKind::MlpDown];
    pub const ALL: [ProjKind; 8] = [
        ProjKind::AttnQ,
        ProjKind::AttnK,
        ProjKind::AttnV,
        ProjKind::AttnO,
        ProjKind::MlpGate,
        ProjKind::MlpUp,
        ProjKind::MlpDown,
        ProjKind::Projector,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjKind::AttnQ => "attn_q",
            ProjKind::AttnK => "attn_k",
            ProjKind::AttnV => "attn_v",
            ProjKind::AttnO => "attn_o",
            ProjKind::MlpGate => "mlp_gate",
            ProjKind::MlpUp => "mlp_up",
            ProjKind::MlpDown => "mlp_down",
            ProjKind::Projector => "projector",
        }
    }

    /// Short label used in sparsity tables (Q, K, V, O, Gate, Up, Down).
    pub fn label(self) -> &'static str {
        match self {
            ProjKind::AttnQ => "Q",
            ProjKind::AttnK => "K",
            ProjKind::AttnV => "V",
            ProjKind::AttnO => "O",
            ProjKind::MlpGate => "Gate",
            ProjKind::MlpUp => "Up",
            ProjKind::MlpDown => "Down",
            ProjKind::Projector => "Projector",
        }
    }
}

impl fmt::Display for ProjKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProjKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProjKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown projection kind `{s}`")))
    }
}

/// Which sublayers receive masks, and in which transformer layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementPolicy {
    pub targets: BTreeSet<ProjKind>,
    /// Inclusive `[lo, hi]`; `None` means every layer.
    #[serde(default)]
    pub layer_range: Option<(usize, usize)>,
}

impl PlacementPolicy {
    pub fn new(targets: impl IntoIterator<Item = ProjKind>, layer_range: Option<(usize, usize)>) -> Self {
        PlacementPolicy {
            targets: targets.into_iter().collect(),
            layer_range,
        }
    }

    pub fn none() -> Self {
        Self::new([], None)
    }

    /// Q, K, V, O in every layer.
    pub fn attention() -> Self {
        Self::new(ProjKind::ATTENTION, None)
    }

    /// Gate, up, down in every layer.
    pub fn mlp() -> Self {
        Self::new(ProjKind::MLP, None)
    }

    /// All seven transformer sublayer kinds in every layer.
    pub fn both() -> Self {
        Self::new(ProjKind::ATTENTION.into_iter().chain(ProjKind::MLP), None)
    }

    pub fn with_projector(mut self) -> Self {
        self.targets.insert(ProjKind::Projector);
        self
    }

    pub fn with_layer_range(mut self, lo: usize, hi: usize) -> Self {
        self.layer_range = Some((lo, hi));
        self
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if let Some((lo, hi)) = self.layer_range {
            if lo > hi || hi >= num_layers {
                return Err(Error::config(
                    "layer_range",
                    format!("[{lo}, {hi}] is not a valid range over {num_layers} layers"),
                ));
            }
        }
        Ok(())
    }

    pub fn covers_layer(&self, layer: usize) -> bool {
        self.layer_range.is_none_or(|(lo, hi)| (lo..=hi).contains(&layer))
    }

    pub fn targets_layer(&self, layer: usize, kind: ProjKind) -> bool {
        kind != ProjKind::Projector && self.targets.contains(&kind) && self.covers_layer(layer)
    }

    pub fn targets_projector(&self) -> bool {
        self.targets.contains(&ProjKind::Projector)
    }
}
