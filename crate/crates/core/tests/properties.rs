mod common;

use mft::analysis::{binary_entropy, breakeven_p, complexity_delta};
use mft::autodiff::Tape;
use mft::masking::{hard_mask, ScoreMatrix};
use mft::Tensor;
use proptest::prelude::*;

/// Root of H(p) = b·p by Newton's method. H − bp is concave and negative
/// near 1, so iterates approach the root monotonically from the right.
fn newton_breakeven(b: f64) -> f64 {
    let h = |p: f64| -p * p.log2() - (1.0 - p) * (1.0 - p).log2();
    let dh = |p: f64| ((1.0 - p) / p).log2();
    let mut p = 0.999;
    for _ in 0..200 {
        let step = (h(p) - b * p) / (dh(p) - b);
        p -= step;
        if step.abs() < 1e-16 {
            break;
        }
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hard_mask_cardinality_minimality_nesting((r, c, v, k, k2) in common::score_case()) {
        if let Err(msg) = common::hard_mask_case(r, c, &v, k, k2) {
            prop_assert!(false, "{}", msg);
        }
    }
}

proptest! {
    #[test]
    fn hard_mask_is_deterministic((r, c, v, k, _k2) in common::score_case()) {
        let s = ScoreMatrix::new(Tensor::new(vec![r, c], v).unwrap(), "w").unwrap();
        prop_assert_eq!(hard_mask(&s, k).unwrap(), hard_mask(&s, k).unwrap());
    }

    #[test]
    fn binary_entropy_symmetric(p in 0.0f64..=1.0) {
        let a = binary_entropy(p).unwrap();
        let b = binary_entropy(1.0 - p).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "H({}) = {}, H(1-p) = {}", p, a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn complexity_sign_pattern_around_breakeven(b in 1.0f64..32.0, t in 0.01f64..0.99) {
        let star = newton_breakeven(b);
        let found = breakeven_p(b).unwrap();
        prop_assert!((found - star).abs() < 1e-9 * star.max(1e-12) + 1e-15, "{} vs {}", found, star);
        // t < 0.5 probes below p*, t ≥ 0.5 above it.
        let p = if t < 0.5 { star * (0.02 + 1.9 * t) } else { star + (1.0 - star) * (t - 0.5) * 1.9 + 1e-3 * (1.0 - star) };
        let delta = complexity_delta(p.min(1.0), b, 1_000_000_000).unwrap();
        if p < star {
            prop_assert!(delta.per_weight > 0.0, "p={} p*={} delta={}", p, star, delta.per_weight);
        } else {
            prop_assert!(delta.per_weight < 0.0, "p={} p*={} delta={}", p, star, delta.per_weight);
        }
    }

    #[test]
    fn encoding_lengths_reconcile(p in 0.0f64..=1.0, b in 1.0f64..32.0, d in 1u64..10_000_000) {
        let c = complexity_delta(p, b, d).unwrap();
        let lhs = c.c_smft - c.c_fft;
        let scale = b * d as f64;
        prop_assert!((lhs - c.total).abs() <= 1e-12 * scale, "{} vs {}", lhs, c.total);
        prop_assert!((c.total - d as f64 * c.per_weight).abs() <= 1e-12 * scale);
    }

    #[test]
    fn backward_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = common::rng(seed);
        let x = Tensor::randn(&[4, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 5], 1.0, &mut r);
        let l1 = |t: &mut Tape, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul_t(v, wv).unwrap();
            let s = t.silu(y);
            t.sum(s)
        };
        let l2 = |t: &mut Tape, v| {
            let s = t.sigmoid(v);
            let p = t.mul(s, v).unwrap();
            t.sum(p)
        };
        let grad = |f: &dyn Fn(&mut Tape, mft::autodiff::Var) -> mft::autodiff::Var| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), true);
            let out = f(&mut t, v);
            t.backward(out).unwrap().get(v).cloned().unwrap()
        };
        let g1 = grad(&l1);
        let g2 = grad(&l2);
        let gc = grad(&|t, v| {
            let a = l1(t, v);
            let b = l2(t, v);
            let a = t.scale(a, alpha);
            let b = t.scale(b, beta);
            t.add(a, b).unwrap()
        });
        for ((c, a), b) in gc.data().iter().zip(g1.data()).zip(g2.data()) {
            let want = alpha * a + beta * b;
            prop_assert!((c - want).abs() <= 1e-12 * (1.0 + want.abs()), "{} vs {}", c, want);
        }
    }
}

#[test]
fn binary_entropy_half_is_one() {
    assert_eq!(binary_entropy(0.5).unwrap(), 1.0);
}
