//! Central finite-difference oracle for tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Entries whose absolute error is at or below this are treated as exact
/// when computing `max_rel_error` (gradients near zero).
pub const ABS_FALLBACK: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    /// Worst `|tape − fd| / max(|tape|, |fd|)` over probes whose absolute
    /// error exceeds [`ABS_FALLBACK`].
    pub max_rel_error: f64,
    /// Worst relative error over probes whose gradient magnitude exceeds
    /// [`ABS_FALLBACK`], whatever their absolute error.
    pub worst_rel_error: f64,
    pub max_abs_error: f64,
    pub probe_count: usize,
}

impl GradCheckReport {
    pub fn new(op_name: impl Into<String>) -> Self {
        GradCheckReport {
            op_name: op_name.into(),
            max_rel_error: 0.0,
            worst_rel_error: 0.0,
            max_abs_error: 0.0,
            probe_count: 0,
        }
    }

    /// Adds one probe comparing a tape gradient with its numeric estimate.
    pub fn record(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        self.max_abs_error = self.max_abs_error.max(abs);
        if scale > ABS_FALLBACK {
            self.worst_rel_error = self.worst_rel_error.max(abs / scale);
        }
        if abs > ABS_FALLBACK {
            self.max_rel_error = self.max_rel_error.max(abs / scale);
        }
        self.probe_count += 1;
    }

    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol
    }

    /// Folds another report for the same op into this one.
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.worst_rel_error = self.worst_rel_error.max(other.worst_rel_error);
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.probe_count += other.probe_count;
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), false);
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(Error::invalid("gradient check needs a scalar-valued function"));
    }
    let y = val.data()[0];
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("f evaluated to {y}")));
    }
    Ok(y)
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with step `h`, probing every coordinate.
pub fn finite_difference_check<F>(op_name: &str, f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    check_coords(op_name, &f, x, h, &coords)
}

/// Like [`finite_difference_check`] but probes at most `probes` randomly
/// chosen coordinates.
pub fn finite_difference_check_sampled<F, R>(
    op_name: &str,
    f: F,
    x: &Tensor,
    h: f64,
    probes: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng + ?Sized,
{
    let n = probes.min(x.len());
    let mut coords = sample(rng, x.len(), n).into_vec();
    coords.sort_unstable();
    check_coords(op_name, &f, x, h, &coords)
}

fn check_coords<F>(op_name: &str, f: &F, x: &Tensor, h: f64, coords: &[usize]) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if coords.is_empty() {
        return Err(Error::invalid("gradient check needs at least one probe"));
    }
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone(), true);
    let out = f(&mut tape, v)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("f(x) is not finite".into()));
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut report = GradCheckReport::new(op_name);
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        report.record(analytic.data()[i], (fp - fm) / (2.0 * h));
    }
    Ok(report)
}
