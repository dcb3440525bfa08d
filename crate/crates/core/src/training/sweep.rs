//! Grid sweeps over one hyperparameter axis. Each cell is an independent
//! training run with its own model copy and RNG stream; a failing cell is
//! recorded and the sweep continues.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, finetune, Method, TrainConfig, TrainOutcome, DEFAULT_EPSILON};
use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::masking::MaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    InitTemperature,
    LearningRate,
    DataFraction,
    /// Contiguous layer ranges for mask placement.
    LayerRange,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::InitTemperature => "init_temperature",
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::DataFraction => "data_fraction",
            SweepAxis::LayerRange => "layer_range",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.replace('-', "_");
        [
            SweepAxis::InitTemperature,
            SweepAxis::LearningRate,
            SweepAxis::DataFraction,
            SweepAxis::LayerRange,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| Error::config("axis", format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", rename_all = "snake_case")]
pub enum GridPoint {
    InitTemperature { init_value: f64, temperature: f64 },
    LearningRate { learning_rate: f64 },
    DataFraction { data_fraction: f64 },
    /// Inclusive layer range.
    LayerRange { first: usize, last: usize },
}

impl GridPoint {
    pub fn axis(&self) -> SweepAxis {
        match self {
            GridPoint::InitTemperature { .. } => SweepAxis::InitTemperature,
            GridPoint::LearningRate { .. } => SweepAxis::LearningRate,
            GridPoint::DataFraction { .. } => SweepAxis::DataFraction,
            GridPoint::LayerRange { .. } => SweepAxis::LayerRange,
        }
    }

    /// Applies the point to a copy of `cfg`.
    pub fn apply(&self, cfg: &TrainConfig) -> Result<TrainConfig> {
        let mut c = cfg.clone();
        match *self {
            GridPoint::InitTemperature { init_value, temperature } => match c.mask_spec {
                Some(MaskSpec::Soft { grad_mode, .. }) => {
                    c.mask_spec = Some(MaskSpec::soft(init_value, temperature, grad_mode)?);
                }
                _ => return Err(Error::config("axis", "init/temperature sweeps need a soft-mask method")),
            },
            GridPoint::LearningRate { learning_rate } => c.learning_rate = learning_rate,
            GridPoint::DataFraction { data_fraction } => c.data_fraction = data_fraction,
            GridPoint::LayerRange { first, last } => match c.placement.take() {
                Some(p) => c.placement = Some(p.with_layer_range(first, last)),
                None => return Err(Error::config("axis", format!("method {} has no placement", c.method))),
            },
        }
        c.validate()?;
        Ok(c)
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            GridPoint::InitTemperature { init_value, temperature } => write!(f, "init={init_value},T={temperature}"),
            GridPoint::LearningRate { learning_rate } => write!(f, "lr={learning_rate}"),
            GridPoint::DataFraction { data_fraction } => write!(f, "fraction={data_fraction}"),
            GridPoint::LayerRange { first, last } => write!(f, "layers={first}-{last}"),
        }
    }
}

/// Cartesian product of init values and temperatures.
pub fn init_temperature_grid(inits: &[f64], temperatures: &[f64]) -> Vec<GridPoint> {
    inits
        .iter()
        .flat_map(|&init_value| {
            temperatures
                .iter()
                .map(move |&temperature| GridPoint::InitTemperature { init_value, temperature })
        })
        .collect()
}

pub fn learning_rate_grid(rates: &[f64]) -> Vec<GridPoint> {
    rates
        .iter()
        .map(|&learning_rate| GridPoint::LearningRate { learning_rate })
        .collect()
}

pub fn data_fraction_grid(fractions: &[f64]) -> Vec<GridPoint> {
    fractions
        .iter()
        .map(|&data_fraction| GridPoint::DataFraction { data_fraction })
        .collect()
}

/// Every contiguous window of `width` layers, followed by the full range.
pub fn layer_range_grid(num_layers: usize, width: usize) -> Vec<GridPoint> {
    let width = width.clamp(1, num_layers.max(1));
    let mut out: Vec<GridPoint> = (0..=num_layers.saturating_sub(width))
        .map(|first| GridPoint::LayerRange {
            first,
            last: first + width - 1,
        })
        .collect();
    let full = GridPoint::LayerRange {
        first: 0,
        last: num_layers.saturating_sub(1),
    };
    if !out.contains(&full) {
        out.push(full);
    }
    out
}

/// Summary of one successful cell.
#[derive(Debug, Clone)]
pub struct CellSummary {
    pub final_train_loss: f64,
    pub eval_loss: f64,
    pub best_step: usize,
    pub sparsity: Option<f64>,
    pub checksum: u64,
    pub outcome: TrainOutcome,
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub point: GridPoint,
    pub result: std::result::Result<CellSummary, String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub method: Method,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub const HEADER: &'static str =
        "cell\tpoint\tstatus\tfinal_train_loss\teval_loss\tbest_step\tsparsity\tchecksum";

    /// Tab-separated table, one row per grid point in grid order.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for (i, c) in self.cells.iter().enumerate() {
            let row = match &c.result {
                Ok(s) => format!(
                    "{i}\t{}\tok\t{:.6}\t{:.6}\t{}\t{}\t{:016x}",
                    c.point,
                    s.final_train_loss,
                    s.eval_loss,
                    s.best_step,
                    s.sparsity.map_or_else(|| "-".into(), |p| format!("{p:.6}")),
                    s.checksum
                ),
                Err(e) => format!("{i}\t{}\tfailed: {}\t-\t-\t-\t-\t-", c.point, e.replace(['\t', '\n'], " ")),
            };
            out.push_str(&row);
            out.push('\n');
        }
        out
    }

    pub fn succeeded(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_ok()).count()
    }
}

fn run_cell(base: &Checkpoint, cfg: &TrainConfig, point: &GridPoint, corpus: &Corpus) -> Result<CellSummary> {
    let cell_cfg = point.apply(cfg)?;
    let outcome = finetune(base, &cell_cfg, corpus)?;
    let eval_loss = evaluate(&outcome.checkpoint, corpus)?.loss;
    let sparsity = super::soft_sparsity(&outcome.checkpoint.model, DEFAULT_EPSILON);
    Ok(CellSummary {
        final_train_loss: outcome.metrics.last().map_or(f64::NAN, |m| m.train_loss),
        eval_loss,
        best_step: outcome.best_step,
        sparsity,
        checksum: outcome.checkpoint.content_hash()?,
        outcome,
    })
}

/// Runs one training job per grid point. Cells are spread over `threads`
/// workers; results are identical to a sequential run.
pub fn sweep(
    base: &Checkpoint,
    cfg: &TrainConfig,
    grid: &[GridPoint],
    corpus: &Corpus,
    threads: usize,
) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(Error::config("grid", "sweep grid is empty"));
    }
    let threads = threads.clamp(1, grid.len());
    let run = |p: &GridPoint| SweepCell {
        point: *p,
        result: run_cell(base, cfg, p, corpus).map_err(|e| e.to_string()),
    };
    let cells = if threads == 1 {
        grid.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<SweepCell>> = vec![None; grid.len()];
        std::thread::scope(|s| {
            let chunk = grid.len().div_ceil(threads);
            for (points, out) in grid.chunks(chunk).zip(slots.chunks_mut(chunk)) {
                let run = &run;
                s.spawn(move || {
                    for (p, o) in points.iter().zip(out) {
                        *o = Some(run(p));
                    }
                });
            }
        });
        slots.into_iter().map(|c| c.expect("every cell ran")).collect()
    };
    Ok(SweepTable {
        method: cfg.method,
        cells,
    })
}
