//! Reports over trained models: near-zero mask proportions, trainable
//! parameter ratios, layer-wise sweep summaries and bound arithmetic.

pub mod bound;
pub mod sparsity;

pub use bound::{
    binary_entropy, bound_comparison, breakeven_p, complexity_delta, log2_binomial, pac_phi, BoundInputs,
    BoundReport, ComplexityDelta, Verdict,
};
pub use sparsity::{near_zero_report, Fraction, SparsityReport};

use crate::error::{Error, Result};
use crate::masking::MaskSpec;
use crate::model::{ModelConfig, ParamCount, PlacementPolicy, ToyVlm, TrainRegime};

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub label: String,
    pub count: ParamCount,
}

impl RatioRow {
    pub fn ratio(&self) -> f64 {
        self.count.ratio()
    }
}

/// Trainable-parameter counts for attention, MLP and both mask placements,
/// plus full fine-tuning, on a model built from `config`.
pub fn trainable_ratio_table(config: &ModelConfig) -> Result<Vec<RatioRow>> {
    let base = ToyVlm::build(config, 0)?;
    let spec = MaskSpec::Hard { sparsity: 0.0 };
    let mut rows = Vec::with_capacity(4);
    for (label, policy) in [
        ("attn", PlacementPolicy::attention()),
        ("mlp", PlacementPolicy::mlp()),
        ("both", PlacementPolicy::both()),
    ] {
        let mut m = base.clone();
        m.apply_placement(&policy, &spec, 0)?;
        rows.push(RatioRow {
            label: label.into(),
            count: m.count_trainable(TrainRegime::Adapters),
        });
    }
    rows.push(RatioRow {
        label: "fft".into(),
        count: base.count_trainable(TrainRegime::Full),
    });
    Ok(rows)
}

pub fn ratio_table_text(rows: &[RatioRow]) -> String {
    let mut s = String::from("placement\ttrainable\ttotal\tratio\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\n",
            r.label,
            r.count.trainable,
            r.count.total,
            r.ratio()
        ));
    }
    s
}

/// One aggregated layer-range row.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseRow {
    pub range: String,
    pub runs: usize,
    pub failed: usize,
    pub mean_eval_loss: Option<f64>,
    pub min_eval_loss: Option<f64>,
}

/// Aggregates the layer-range rows of one or more sweep tables (as written
/// by the sweep harness), keeping first-seen range order.
pub fn aggregate_layerwise(tables: &[String]) -> Result<Vec<LayerwiseRow>> {
    let mut rows: Vec<(String, Vec<f64>, usize)> = Vec::new();
    for table in tables {
        let mut lines = table.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty sweep table".into()))?
            .split('\t')
            .collect();
        let col = |name: &str| {
            header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| Error::Format(format!("sweep table lacks column `{name}`")))
        };
        let (pc, sc, ec) = (col("point")?, col("status")?, col("eval_loss")?);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            let (Some(point), Some(status)) = (f.get(pc), f.get(sc)) else {
                return Err(Error::Format(format!("short sweep row `{line}`")));
            };
            let Some(range) = point.strip_prefix("layers=") else { continue };
            let idx = match rows.iter().position(|r| r.0 == range) {
                Some(i) => i,
                None => {
                    rows.push((range.to_string(), Vec::new(), 0));
                    rows.len() - 1
                }
            };
            if *status == "ok" {
                let v: f64 = f
                    .get(ec)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad eval_loss in `{line}`")))?;
                rows[idx].1.push(v);
            } else {
                rows[idx].2 += 1;
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Format("no layer-range rows found".into()));
    }
    Ok(rows
        .into_iter()
        .map(|(range, losses, failed)| LayerwiseRow {
            range,
            runs: losses.len() + failed,
            failed,
            mean_eval_loss: (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64),
            min_eval_loss: losses.iter().copied().reduce(f64::min),
        })
        .collect())
}

pub fn layerwise_table_text(rows: &[LayerwiseRow]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
    let mut s = String::from("layers\truns\tfailed\tmean_eval_loss\tmin_eval_loss\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.range,
            r.runs,
            r.failed,
            opt(r.mean_eval_loss),
            opt(r.min_eval_loss)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_ordering_and_additivity() {
        let rows = trainable_ratio_table(&ModelConfig::default()).unwrap();
        let [attn, mlp, both, fft] = [&rows[0], &rows[1], &rows[2], &rows[3]];
        assert!(attn.ratio() < mlp.ratio());
        assert!(mlp.ratio() < both.ratio());
        assert_eq!(both.count.trainable, attn.count.trainable + mlp.count.trainable);
        assert_eq!(fft.ratio(), 1.0);
    }

    #[test]
    fn layerwise_aggregation_averages_runs() {
        let t1 = "cell\tpoint\tstatus\tfinal_train_loss\teval_loss\n\
                  0\tlayers=0-1\tok\t1\t2.0\n1\tlayers=0-3\tok\t1\t1.0\n2\tlr=0.1\tok\t1\t9.0\n";
        let t2 = "cell\tpoint\tstatus\tfinal_train_loss\teval_loss\n\
                  0\tlayers=0-1\tok\t1\t3.0\n1\tlayers=0-3\tfailed: boom\t-\t-\n";
        let rows = aggregate_layerwise(&[t1.into(), t2.into()]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].range, "0-1");
        assert_eq!(rows[0].mean_eval_loss, Some(2.5));
        assert_eq!(rows[0].min_eval_loss, Some(2.0));
        assert_eq!((rows[1].runs, rows[1].failed), (2, 1));
        assert_eq!(rows[1].mean_eval_loss, Some(1.0));
    }
}
