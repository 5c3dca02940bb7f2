use mxscale::accum::ExactSum;
use mxscale::scaling::{
    block_sse_exact, hierarchical_wrap, scale_abs_max, scale_brute_force, scale_four_over_six,
    scale_mx_pow2, scale_prevent_zero, FP4_MAX,
};
use mxscale::{FormatSpec, ScaleKind, ScaleStrategy};
use proptest::prelude::*;

const SCALE_FORMATS: [FormatSpec; 3] = [FormatSpec::E4M3, FormatSpec::UE5M3, FormatSpec::E8M0];

/// Blocks whose magnitudes span tiny to large, with some exact zeros.
fn block(len: usize) -> impl Strategy<Value = Vec<f64>> {
    (
        -30i32..12,
        proptest::collection::vec((-1.0f64..1.0, 0u8..10), len),
    )
        .prop_map(|(e, xs)| {
            let s = 2f64.powi(e);
            xs.into_iter()
                .map(|(x, z)| if z == 0 { 0.0 } else { x * s })
                .collect()
        })
}

/// Exhaustive search over every positive value with exact error sums;
/// ties go to the smallest scale.
fn brute_oracle(block: &[f64], fmt: &FormatSpec) -> (f64, ExactSum) {
    let mut best: Option<(f64, ExactSum)> = None;
    for cv in fmt.positive_values() {
        let sse = block_sse_exact(block, cv.value);
        if best.as_ref().is_none_or(|(_, b)| sse < *b) {
            best = Some((cv.value, sse));
        }
    }
    best.unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(600))]

    #[test]
    fn brute_matches_exhaustive_search(b in block(8), fi in 0usize..3) {
        let fmt = SCALE_FORMATS[fi];
        let got = scale_brute_force(&b, &fmt).unwrap();
        let (scale, sse) = brute_oracle(&b, &fmt);
        prop_assert_eq!(got.value(), scale);
        prop_assert_eq!(block_sse_exact(&b, got.value()), sse);
    }

    #[test]
    fn dominance_chain(b in block(16), fi in 0usize..3) {
        let fmt = SCALE_FORMATS[fi];
        let abs = scale_abs_max(&b, FP4_MAX, &fmt).unwrap();
        let fos = scale_four_over_six(&b, &fmt).unwrap();
        let brute = scale_brute_force(&b, &fmt).unwrap();
        let e = |s: f64| block_sse_exact(&b, s);
        prop_assert!(e(brute.value()) <= e(fos.value()));
        prop_assert!(e(fos.value()) <= e(abs.value()));
    }

    #[test]
    fn prevent_zero_only_changes_zero_scales(b in block(8), fi in 0usize..2) {
        let fmt = SCALE_FORMATS[fi];
        let abs = scale_abs_max(&b, FP4_MAX, &fmt).unwrap();
        let pz = scale_prevent_zero(&b, FP4_MAX, &fmt).unwrap();
        if abs.value() != 0.0 {
            prop_assert_eq!(abs.scale.code, pz.scale.code);
        } else {
            prop_assert_eq!(pz.value(), fmt.min_positive());
            prop_assert!(block_sse_exact(&b, pz.value()) <= block_sse_exact(&b, 0.0));
        }
    }

    #[test]
    fn four_over_six_provenance(b in block(16), fi in 0usize..3) {
        let fmt = SCALE_FORMATS[fi];
        let r = scale_four_over_six(&b, &fmt).unwrap();
        let s4 = scale_abs_max(&b, 4.0, &fmt).unwrap().value();
        let s6 = scale_abs_max(&b, 6.0, &fmt).unwrap().value();
        let (e4, e6) = (block_sse_exact(&b, s4), block_sse_exact(&b, s6));
        let (want_m, want_s) = if e4 < e6 { (4.0, s4) } else { (6.0, s6) };
        prop_assert_eq!(r.chosen_max, want_m);
        prop_assert_eq!(r.value(), want_s);
    }

    #[test]
    fn mx_pow2_brackets_ratio(b in block(8)) {
        let r = scale_mx_pow2(&b, FP4_MAX).unwrap();
        let s = r.value();
        prop_assert_eq!(s.log2().fract(), 0.0);
        let ratio = b.iter().fold(0.0f64, |a, v| a.max(v.abs())) / FP4_MAX;
        if ratio >= FormatSpec::E8M0.min_positive() {
            prop_assert!(s <= ratio && ratio < 2.0 * s, "s={s} ratio={ratio}");
        }
    }

    /// Splitting a block can only help the optimal scale: each half may
    /// reuse the parent's scale.
    #[test]
    fn brute_refines_monotonically(b in block(32), fi in 0usize..3) {
        let fmt = SCALE_FORMATS[fi];
        let total = |bs: usize| -> ExactSum {
            let mut acc = ExactSum::new();
            for chunk in b.chunks(bs) {
                let s = scale_brute_force(chunk, &fmt).unwrap().value();
                acc.merge(&block_sse_exact(chunk, s));
            }
            acc
        };
        let (t32, t16, t8, t4) = (total(32), total(16), total(8), total(4));
        prop_assert!(t16 <= t32);
        prop_assert!(t8 <= t16);
        prop_assert!(t4 <= t8);
    }

    #[test]
    fn hierarchical_scales_never_clip(e in -6i32..=20, xs in proptest::collection::vec(-1.0f64..1.0, 64)) {
        let peak = 2f64.powi(e);
        let amax = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        prop_assume!(amax > 0.0);
        let tensor: Vec<f64> = xs.iter().map(|v| v / amax * peak).collect();
        let inner = ScaleStrategy::new(ScaleKind::AbsMax, FormatSpec::E4M3);
        let scales = hierarchical_wrap(&tensor, 16, &inner).unwrap();
        for (chunk, r) in tensor.chunks(16).zip(&scales) {
            let bmax = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            prop_assert!((bmax / r.tensor_scale) / FP4_MAX <= FormatSpec::E4M3.max_value());
        }
    }
}

#[test]
fn all_zero_blocks() {
    let z = [0.0; 8];
    for fmt in SCALE_FORMATS {
        assert_eq!(
            scale_brute_force(&z, &fmt).unwrap().value(),
            fmt.min_positive()
        );
        assert_eq!(
            scale_prevent_zero(&z, FP4_MAX, &fmt).unwrap().value(),
            fmt.min_positive()
        );
        assert!(block_sse_exact(&z, 0.0).is_zero());
    }
    assert_eq!(
        scale_abs_max(&z, FP4_MAX, &FormatSpec::E4M3)
            .unwrap()
            .value(),
        0.0
    );
}

#[test]
fn every_recipe_label_round_trips() {
    for label in [
        "e4m3",
        "e4m3+H",
        "e4m3+4o6",
        "e4m3+4o6+H",
        "ue5m3",
        "ue5m3+H",
        "ue5m3+4o6",
        "ue5m3+4o6+H",
    ] {
        let s = ScaleStrategy::from_label(label).unwrap();
        assert_eq!(s.label(), label);
    }
    assert!(ScaleStrategy::from_label("e4m3+what").is_err());
}
