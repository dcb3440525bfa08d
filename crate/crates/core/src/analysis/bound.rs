//! Generalization-bound arithmetic: binary entropy, encoding lengths of a
//! dense versus a masked hypothesis, and the PAC-Bayes complexity penalty.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest weight count for which the exact log-binomial is computed.
pub const EXACT_BINOMIAL_MAX_D: u64 = 1_000_000;

/// Sums within this distance of zero are reported as a tie.
pub const TIE_TOLERANCE: f64 = 1e-12;

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config("p", format!("{p} is outside [0, 1]")));
    }
    Ok(())
}

/// H(p) in bits, with H(0) = H(1) = 0.
pub fn binary_entropy(p: f64) -> Result<f64> {
    check_p(p)?;
    let term = |x: f64| if x == 0.0 { 0.0 } else { -x * x.log2() };
    Ok(term(p) + term(1.0 - p))
}

/// Exact log₂ C(d, z).
pub fn log2_binomial(d: u64, z: u64) -> Result<f64> {
    if z > d {
        return Err(Error::config("z", format!("{z} exceeds d = {d}")));
    }
    let k = z.min(d - z);
    Ok((1..=k).map(|i| (((d - k + i) as f64) / i as f64).log2()).sum())
}

/// Encoding-length comparison of a masked and a dense hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityDelta {
    /// H(p) − b·p.
    pub per_weight: f64,
    /// d·[H(p) − b·p].
    pub total: f64,
    /// b·d bits for the dense weights.
    pub c_fft: f64,
    /// b(1−p)d + d·H(p) bits for the active weights plus the mask.
    pub c_smft: f64,
    /// b(d−z) + log₂ C(d, z) with z = round(p·d), when d is small enough.
    pub c_smft_exact: Option<f64>,
}

pub fn complexity_delta(p: f64, b: f64, d: u64) -> Result<ComplexityDelta> {
    check_p(p)?;
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::config("b", "bit width must be positive"));
    }
    if d == 0 {
        return Err(Error::config("d", "must be at least 1"));
    }
    let h = binary_entropy(p)?;
    let df = d as f64;
    let c_smft_exact = if d <= EXACT_BINOMIAL_MAX_D {
        let z = (p * df).round() as u64;
        Some(b * (d - z) as f64 + log2_binomial(d, z)?)
    } else {
        None
    };
    Ok(ComplexityDelta {
        per_weight: h - b * p,
        total: df * (h - b * p),
        c_fft: b * df,
        c_smft: b * (1.0 - p) * df + df * h,
        c_smft_exact,
    })
}

/// Φ(u) = √((u + ln 1/δ) / (2(n−1))).
pub fn pac_phi(u: f64, n: u64, delta: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::config("n", "training-set size must be at least 2"));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::config("delta", "confidence must lie in (0, 1]"));
    }
    if !(u >= 0.0) {
        return Err(Error::config("u", "complexity must be non-negative"));
    }
    Ok(((u + (1.0 / delta).ln()) / (2.0 * (n - 1) as f64)).sqrt())
}

/// The p in (0, 1) where H(p) = b·p, located by bisection.
pub fn breakeven_p(b: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::config("b", "bit width must be positive"));
    }
    let f = |p: f64| binary_entropy(p).map(|h| h - b * p);
    let (mut lo, mut hi) = (1e-30, 1.0);
    if f(lo)? <= 0.0 {
        return Err(Error::config("b", format!("no breakeven point for b = {b}")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Inputs of the bound comparison. `n` and `delta` are needed only for the
/// Φ terms, the two losses only for Δ_train and the verdicts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    /// Bits per stored weight.
    pub b: f64,
    /// Weights in the masked scope.
    pub d: u64,
    /// Suppressed weights.
    pub z: u64,
    /// Training-set size.
    #[serde(default)]
    pub n: Option<u64>,
    /// Confidence parameter.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub train_loss_fft: Option<f64>,
    #[serde(default)]
    pub train_loss_mft: Option<f64>,
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0 && self.b.is_finite()) {
            return Err(Error::config("b", "bit width must be positive"));
        }
        if self.d == 0 {
            return Err(Error::config("d", "must be at least 1"));
        }
        if self.z > self.d {
            return Err(Error::config("z", format!("{} suppressed weights exceed d = {}", self.z, self.d)));
        }
        if self.n.is_some_and(|n| n < 2) {
            return Err(Error::config("n", "training-set size must be at least 2"));
        }
        if self.delta.is_some_and(|d| !(d > 0.0 && d < 1.0)) {
            return Err(Error::config("delta", "confidence must lie in (0, 1)"));
        }
        if self.n.is_some() != self.delta.is_some() {
            return Err(Error::config("n", "n and delta must be given together"));
        }
        if self.train_loss_fft.is_some() != self.train_loss_mft.is_some() {
            return Err(Error::config("train_loss", "both training losses are needed"));
        }
        if [self.train_loss_fft, self.train_loss_mft].iter().flatten().any(|l| !l.is_finite()) {
            return Err(Error::config("train_loss", "losses must be finite"));
        }
        Ok(())
    }

    pub fn p(&self) -> f64 {
        self.z as f64 / self.d as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// The masked hypothesis has the smaller bound.
    Negative,
    Tie,
    Positive,
}

impl Verdict {
    fn of(x: f64) -> Self {
        if x.abs() <= TIE_TOLERANCE {
            Verdict::Tie
        } else if x < 0.0 {
            Verdict::Negative
        } else {
            Verdict::Positive
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Negative => "negative",
            Verdict::Tie => "tie",
            Verdict::Positive => "positive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub inputs: BoundInputs,
    pub p: f64,
    pub h_p: f64,
    pub complexity: ComplexityDelta,
    /// train_loss_mft − train_loss_fft.
    pub delta_train: Option<f64>,
    /// Φ(C_FFT), Φ(C_SMFT).
    pub phi: Option<(f64, f64)>,
    /// Sign of Δ_train + Δ_complexity.
    pub verdict: Option<Verdict>,
    /// Sign of U(MFT) − U(FFT) with Φ applied to each encoding length.
    pub phi_verdict: Option<Verdict>,
}

impl BoundReport {
    pub fn signs_disagree(&self) -> bool {
        matches!((self.verdict, self.phi_verdict), (Some(a), Some(b)) if a != b)
    }

    pub fn to_text(&self) -> String {
        let c = &self.complexity;
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"));
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<24}{v}\n"));
        line("b", self.inputs.b.to_string());
        line("d", self.inputs.d.to_string());
        line("z", self.inputs.z.to_string());
        line("p", format!("{:.6}", self.p));
        line("n", self.inputs.n.map_or_else(|| "-".into(), |n| n.to_string()));
        line("delta", self.inputs.delta.map_or_else(|| "-".into(), |d| d.to_string()));
        line("train_loss_fft", opt(self.inputs.train_loss_fft));
        line("train_loss_mft", opt(self.inputs.train_loss_mft));
        line("delta_train", opt(self.delta_train));
        line("H(p)", format!("{:.6}", self.h_p));
        line("complexity_per_weight", format!("{:.6}", c.per_weight));
        line("complexity_total", format!("{:.6}", c.total));
        line("C_fft_bits", format!("{:.3}", c.c_fft));
        line("C_smft_bits", format!("{:.3}", c.c_smft));
        line("C_smft_exact_bits", c.c_smft_exact.map_or_else(|| "-".into(), |x| format!("{x:.3}")));
        line("phi_fft", opt(self.phi.map(|p| p.0)));
        line("phi_mft", opt(self.phi.map(|p| p.1)));
        line("verdict", self.verdict.map_or_else(|| "-".into(), |v| v.to_string()));
        line("phi_verdict", self.phi_verdict.map_or_else(|| "-".into(), |v| v.to_string()));
        if self.signs_disagree() {
            s.push_str("note: linear and phi-based bound differences disagree in sign\n");
        }
        s
    }
}

pub fn bound_comparison(inputs: &BoundInputs) -> Result<BoundReport> {
    inputs.validate()?;
    let p = inputs.p();
    let complexity = complexity_delta(p, inputs.b, inputs.d)?;
    let delta_train = inputs.train_loss_mft.zip(inputs.train_loss_fft).map(|(m, f)| m - f);
    let phi = match (inputs.n, inputs.delta) {
        (Some(n), Some(delta)) => Some((
            pac_phi(complexity.c_fft, n, delta)?,
            pac_phi(complexity.c_smft, n, delta)?,
        )),
        _ => None,
    };
    Ok(BoundReport {
        inputs: *inputs,
        p,
        h_p: binary_entropy(p)?,
        complexity,
        delta_train,
        phi,
        verdict: delta_train.map(|t| Verdict::of(t + complexity.total)),
        phi_verdict: delta_train.zip(phi).map(|(t, (f, m))| Verdict::of(t + (m - f))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_endpoints_and_midpoint() {
        assert_eq!(binary_entropy(0.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(1.0).unwrap(), 0.0);
        assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
        assert!(binary_entropy(-0.1).is_err());
        assert!(binary_entropy(1.5).is_err());
    }

    #[test]
    fn entropy_at_three_percent() {
        // independent evaluation with natural logs
        let p: f64 = 0.03;
        let want = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln()) / std::f64::consts::LN_2;
        let h = binary_entropy(p).unwrap();
        assert!((h - want).abs() < 1e-14);
        assert!((h - 0.19439).abs() < 1e-5);
    }

    #[test]
    fn per_weight_delta_matches_worked_example() {
        let c = complexity_delta(0.03, 8.0, 1).unwrap();
        assert!((c.per_weight - (-0.0456)).abs() < 1e-4);
        assert!(c.per_weight > -0.0466 && c.per_weight < -0.0446);
        assert_eq!(complexity_delta(0.0, 8.0, 100).unwrap().total, 0.0);
    }

    #[test]
    fn encodings_reconcile() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let c = complexity_delta(p, 8.0, 1000).unwrap();
            assert!((c.c_smft - c.c_fft - c.total).abs() < 1e-9 * c.c_fft);
        }
    }

    #[test]
    fn exact_binomial_tracks_entropy_estimate() {
        assert_eq!(log2_binomial(10, 0).unwrap(), 0.0);
        assert!((log2_binomial(10, 3).unwrap() - 120f64.log2()).abs() < 1e-12);
        let c = complexity_delta(0.03, 8.0, 100_000).unwrap();
        let exact = c.c_smft_exact.unwrap();
        // Stirling gap is O(log d)
        assert!((exact - c.c_smft).abs() < 20.0);
        assert!(complexity_delta(0.03, 8.0, 2_000_000).unwrap().c_smft_exact.is_none());
    }

    #[test]
    fn breakeven_for_eight_bits() {
        // Newton iteration on g(p) = H(p) - 8p from the right of the root
        let g = |p: f64| binary_entropy(p).unwrap() - 8.0 * p;
        let dg = |p: f64| ((1.0 - p) / p).log2() - 8.0;
        let mut x: f64 = 0.02;
        for _ in 0..50 {
            x -= g(x) / dg(x);
        }
        let p = breakeven_p(8.0).unwrap();
        assert!((p - x).abs() < 1e-12, "{p} vs {x}");
        assert!(p > 0.0105 && p < 0.0107, "{p}");
        assert!(g(0.5 * p) > 0.0 && g(2.0 * p) < 0.0);
    }

    #[test]
    fn phi_values() {
        assert_eq!(pac_phi(0.0, 10, 1.0).unwrap(), 0.0);
        let want = ((100.0 + 20f64.ln()) / 20000.0).sqrt();
        assert!((pac_phi(100.0, 10001, 0.05).unwrap() - want).abs() < 1e-15);
        let a = pac_phi(5.0, 11, 0.1).unwrap();
        let b = pac_phi(5.0, 21, 0.1).unwrap();
        assert!((b - a / 2f64.sqrt()).abs() < 1e-15);
        assert!(pac_phi(1.0, 1, 0.1).is_err());
    }

    #[test]
    fn reported_loss_difference() {
        let r = bound_comparison(&BoundInputs {
            b: 8.0,
            d: 1_000_000,
            z: 30_000,
            n: Some(1000),
            delta: Some(0.05),
            train_loss_fft: Some(1.0414),
            train_loss_mft: Some(0.9731),
        })
        .unwrap();
        assert!((r.delta_train.unwrap() + 0.0683).abs() < 1e-4);
        assert_eq!(r.verdict, Some(Verdict::Negative));
    }

    #[test]
    fn equal_losses_without_mask_tie() {
        let r = bound_comparison(&BoundInputs {
            b: 8.0,
            d: 1000,
            z: 0,
            n: Some(100),
            delta: Some(0.05),
            train_loss_fft: Some(0.7),
            train_loss_mft: Some(0.7),
        })
        .unwrap();
        assert_eq!(r.verdict, Some(Verdict::Tie));
        assert_eq!(r.phi_verdict, Some(Verdict::Tie));
    }

    #[test]
    fn suppressed_beyond_total_rejected() {
        let bad = BoundInputs {
            b: 8.0,
            d: 10,
            z: 11,
            n: None,
            delta: None,
            train_loss_fft: None,
            train_loss_mft: None,
        };
        assert!(bound_comparison(&bad).is_err());
        let only_complexity = BoundInputs { z: 3, d: 100, ..bad };
        let r = bound_comparison(&only_complexity).unwrap();
        assert!(r.verdict.is_none() && r.phi.is_none());
    }
}
