//! TOML run specifications.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! num_layers = 4
//!
//! [data]
//! pretrain_corpus = "synthetic:a:500000"
//! finetune_corpus = "corpus_b.txt"
//! window = 65
//!
//! [pretrain]
//! steps = 1500
//!
//! [finetune]
//! method = "smft"
//! init_value = 7.0
//! temperature = 2.3
//! placement = "both"
//!
//! [sweep]
//! axis = "init_temperature"
//! inits = [3.0, 5.0, 7.0, 9.0]
//! temperatures = [0.5, 1.1, 1.3, 2.3]
//! ```
//!
//! Every section and key is optional; unknown keys are rejected. A corpus
//! path of the form `synthetic:<a|b>[:bytes[:seed]]` selects a generated
//! domain instead of a file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{ingest_corpus, synthetic, Corpus};
use crate::error::{Error, Result};
use crate::masking::{GradMode, MaskSpec};
use crate::model::{ModelConfig, PlacementPolicy, ProjKind};
use crate::training::sweep::{
    data_fraction_grid, init_temperature_grid, layer_range_grid, learning_rate_grid, GridPoint, SweepAxis,
};
use crate::training::{LossReduction, Method, OptimizerKind, TrainConfig};

pub const RESOLVED_SPEC_FILE: &str = "resolved_spec.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub seed: Option<u64>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: Option<usize>,
    pub embed_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub mlp_hidden_dim: Option<usize>,
    pub context_length: Option<usize>,
    pub vision_feature_dim: Option<usize>,
    pub vision_stub_dim: Option<usize>,
    pub gated_mlp: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub pretrain_corpus: Option<String>,
    pub finetune_corpus: Option<String>,
    /// Window length in tokens.
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub eval_every: Option<usize>,
    pub eval_windows: Option<usize>,
    pub keep_best: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub method: Option<Method>,
    pub base: Option<PathBuf>,
    pub init_value: Option<f64>,
    pub temperature: Option<f64>,
    /// Hard-mask pruned fraction.
    pub sparsity: Option<f64>,
    /// `attn`, `mlp` or `both`.
    pub placement: Option<String>,
    /// Inclusive `[first, last]` layer range.
    pub layer_range: Option<[usize; 2]>,
    pub mask_projector: Option<bool>,
    pub lora_rank: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub data_fraction: Option<f64>,
    pub eval_every: Option<usize>,
    pub eval_windows: Option<usize>,
    pub keep_best: Option<bool>,
    pub loss_reduction: Option<LossReduction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: SweepAxis,
    #[serde(default)]
    pub inits: Vec<f64>,
    #[serde(default)]
    pub temperatures: Vec<f64>,
    /// Learning rates or data fractions, depending on the axis.
    #[serde(default)]
    pub values: Vec<f64>,
    pub layer_width: Option<usize>,
}

impl SweepSection {
    pub fn grid(&self, num_layers: usize) -> Result<Vec<GridPoint>> {
        let grid = match self.axis {
            SweepAxis::InitTemperature => init_temperature_grid(&self.inits, &self.temperatures),
            SweepAxis::LearningRate => learning_rate_grid(&self.values),
            SweepAxis::DataFraction => data_fraction_grid(&self.values),
            SweepAxis::LayerRange => layer_range_grid(num_layers, self.layer_width.unwrap_or(1)),
        };
        if grid.is_empty() {
            return Err(Error::config("sweep", format!("grid for axis {} is empty", self.axis.name())));
        }
        Ok(grid)
    }
}

const DEFAULT_SEED: u64 = 0;
const DEFAULT_WINDOW: usize = 65;
const DEFAULT_PRETRAIN_STEPS: usize = 1500;

impl RunSpec {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Spec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(DEFAULT_SEED)
    }

    pub fn window(&self) -> usize {
        self.data.window.unwrap_or(DEFAULT_WINDOW)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let d = ModelConfig {
            context_length: self.window() - 1,
            ..ModelConfig::default()
        };
        let m = &self.model;
        let cfg = ModelConfig {
            vocab_size: m.vocab_size.unwrap_or(d.vocab_size),
            embed_dim: m.embed_dim.unwrap_or(d.embed_dim),
            num_layers: m.num_layers.unwrap_or(d.num_layers),
            num_heads: m.num_heads.unwrap_or(d.num_heads),
            mlp_hidden_dim: m.mlp_hidden_dim.unwrap_or(d.mlp_hidden_dim),
            context_length: m.context_length.unwrap_or(d.context_length),
            vision_feature_dim: m.vision_feature_dim.unwrap_or(d.vision_feature_dim),
            vision_stub_dim: m.vision_stub_dim.unwrap_or(d.vision_stub_dim),
            gated_mlp: m.gated_mlp.unwrap_or(d.gated_mlp),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> Result<TrainConfig> {
        let d = TrainConfig::for_method(Method::Fft);
        let p = &self.pretrain;
        let cfg = TrainConfig {
            steps: p.steps.unwrap_or(DEFAULT_PRETRAIN_STEPS),
            batch_size: p.batch_size.unwrap_or(d.batch_size),
            learning_rate: p.learning_rate.unwrap_or(d.learning_rate),
            optimizer: p.optimizer.unwrap_or(d.optimizer),
            eval_every: p.eval_every.unwrap_or(250),
            eval_windows: p.eval_windows.unwrap_or(64),
            keep_best: p.keep_best.unwrap_or(d.keep_best),
            context_length: self.window(),
            seed: self.seed(),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn finetune_config(&self) -> Result<TrainConfig> {
        let f = &self.finetune;
        let method = f.method.unwrap_or(Method::Smft);
        let d = TrainConfig::for_method(method);
        let mask_spec = match method {
            Method::Smft | Method::SmftSte => {
                let (init, temp) = match d.mask_spec {
                    Some(MaskSpec::Soft { init_value, temperature, .. }) => (init_value, temperature),
                    _ => unreachable!("soft default"),
                };
                if f.sparsity.is_some() {
                    return Err(Error::config("finetune.sparsity", format!("not used by method {method}")));
                }
                let mode = if method == Method::Smft {
                    GradMode::TrueSigmoid
                } else {
                    GradMode::Ste
                };
                Some(MaskSpec::soft(
                    f.init_value.unwrap_or(init),
                    f.temperature.unwrap_or(temp),
                    mode,
                )?)
            }
            Method::Hmft => {
                if f.init_value.is_some() || f.temperature.is_some() {
                    return Err(Error::config("finetune.init_value", "soft-mask keys are not used by hmft"));
                }
                let k = match d.mask_spec {
                    Some(MaskSpec::Hard { sparsity }) => sparsity,
                    _ => unreachable!("hard default"),
                };
                Some(MaskSpec::hard(f.sparsity.unwrap_or(k))?)
            }
            Method::Fft | Method::Lora => {
                if f.init_value.is_some() || f.temperature.is_some() || f.sparsity.is_some() {
                    return Err(Error::config("finetune", format!("mask keys are not used by method {method}")));
                }
                None
            }
        };
        let placement = if method == Method::Fft {
            if f.placement.is_some() || f.layer_range.is_some() || f.mask_projector.is_some() {
                return Err(Error::config("finetune.placement", "not used by method fft"));
            }
            None
        } else {
            let mut p = match f.placement.as_deref().unwrap_or("both") {
                "attn" | "attention" => PlacementPolicy::attention(),
                "mlp" => PlacementPolicy::mlp(),
                "both" => PlacementPolicy::both(),
                other => {
                    return Err(Error::config(
                        "finetune.placement",
                        format!("`{other}` is not one of attn, mlp, both"),
                    ))
                }
            };
            if let Some([lo, hi]) = f.layer_range {
                p = p.with_layer_range(lo, hi);
            }
            if f.mask_projector.unwrap_or(false) {
                p = p.with_projector();
            }
            Some(p)
        };
        let cfg = TrainConfig {
            method,
            mask_spec,
            placement,
            learning_rate: f.learning_rate.unwrap_or(d.learning_rate),
            steps: f.steps.unwrap_or(d.steps),
            batch_size: f.batch_size.unwrap_or(d.batch_size),
            context_length: self.window(),
            seed: self.seed(),
            data_fraction: f.data_fraction.unwrap_or(d.data_fraction),
            lora_rank: if method == Method::Lora {
                Some(f.lora_rank.unwrap_or(4))
            } else if f.lora_rank.is_some() {
                return Err(Error::config("finetune.lora_rank", "only used by method lora"));
            } else {
                None
            },
            optimizer: f.optimizer.unwrap_or(d.optimizer),
            eval_every: f.eval_every.unwrap_or(d.eval_every),
            eval_windows: f.eval_windows.unwrap_or(d.eval_windows),
            keep_best: f.keep_best.unwrap_or(d.keep_best),
            loss_reduction: f.loss_reduction.unwrap_or(d.loss_reduction),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The spec with every default filled in, as the commands will use it.
    pub fn resolved(&self) -> Result<RunSpec> {
        let m = self.model_config()?;
        let p = self.pretrain_config()?;
        let f = self.finetune_config()?;
        let (init_value, temperature, sparsity) = match f.mask_spec {
            Some(MaskSpec::Soft { init_value, temperature, .. }) => (Some(init_value), Some(temperature), None),
            Some(MaskSpec::Hard { sparsity }) => (None, None, Some(sparsity)),
            None => (None, None, None),
        };
        let placement = f.placement.as_ref();
        let kinds = placement.map(|p| {
            let attn = ProjKind::ATTENTION.iter().any(|k| p.targets.contains(k));
            let mlp = ProjKind::MLP.iter().any(|k| p.targets.contains(k));
            match (attn, mlp) {
                (true, false) => "attn",
                (false, true) => "mlp",
                _ => "both",
            }
        });
        Ok(RunSpec {
            seed: Some(self.seed()),
            model: ModelSection {
                vocab_size: Some(m.vocab_size),
                embed_dim: Some(m.embed_dim),
                num_layers: Some(m.num_layers),
                num_heads: Some(m.num_heads),
                mlp_hidden_dim: Some(m.mlp_hidden_dim),
                context_length: Some(m.context_length),
                vision_feature_dim: Some(m.vision_feature_dim),
                vision_stub_dim: Some(m.vision_stub_dim),
                gated_mlp: Some(m.gated_mlp),
            },
            data: DataSection {
                window: Some(self.window()),
                ..self.data.clone()
            },
            pretrain: PretrainSection {
                steps: Some(p.steps),
                batch_size: Some(p.batch_size),
                learning_rate: Some(p.learning_rate),
                optimizer: Some(p.optimizer),
                eval_every: Some(p.eval_every),
                eval_windows: Some(p.eval_windows),
                keep_best: Some(p.keep_best),
            },
            finetune: FinetuneSection {
                method: Some(f.method),
                base: self.finetune.base.clone(),
                init_value,
                temperature,
                sparsity,
                placement: kinds.map(str::to_string),
                layer_range: placement.and_then(|p| p.layer_range).map(|(a, b)| [a, b]),
                mask_projector: placement.map(|p| p.targets_projector()),
                lora_rank: f.lora_rank,
                learning_rate: Some(f.learning_rate),
                optimizer: Some(f.optimizer),
                steps: Some(f.steps),
                batch_size: Some(f.batch_size),
                data_fraction: Some(f.data_fraction),
                eval_every: Some(f.eval_every),
                eval_windows: Some(f.eval_windows),
                keep_best: Some(f.keep_best),
                loss_reduction: Some(f.loss_reduction),
            },
            sweep: self.sweep.clone(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Writes the resolved spec into `dir`.
    pub fn echo_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_SPEC_FILE);
        let text = self.resolved()?.to_toml()?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Loads a corpus from a file path or a `synthetic:<a|b>[:bytes[:seed]]`
/// source, resolving relative paths against `base_dir`.
pub fn load_corpus(source: &str, window: usize, base_dir: &Path) -> Result<Corpus> {
    if let Some(rest) = source.strip_prefix("synthetic:") {
        let mut parts = rest.split(':');
        let domain = parts.next().unwrap_or("");
        let bytes = match parts.next() {
            Some(n) => n
                .parse()
                .map_err(|_| Error::config("corpus", format!("bad byte count in `{source}`")))?,
            None if domain == "a" => 500_000,
            None => 100_000,
        };
        let seed = match parts.next() {
            Some(n) => n
                .parse()
                .map_err(|_| Error::config("corpus", format!("bad seed in `{source}`")))?,
            None if domain == "a" => 1,
            None => 2,
        };
        let text = match domain {
            "a" => synthetic::domain_a(bytes, seed),
            "b" => synthetic::domain_b(bytes, seed),
            _ => return Err(Error::config("corpus", format!("unknown synthetic domain in `{source}`"))),
        };
        return Corpus::from_bytes(text.as_bytes(), window);
    }
    let path = Path::new(source);
    let path = if path.is_relative() {
        base_dir.join(path)
    } else {
        path.to_path_buf()
    };
    ingest_corpus(&path, window)
}

/// Field-by-field differences between two model configurations.
pub fn config_differences(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return vec!["<unserializable>".into()];
    };
    x.iter()
        .filter(|(k, v)| y.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: spec {v}, base {}", y.get(k).map_or("-".into(), |w| w.to_string())))
        .collect()
}
