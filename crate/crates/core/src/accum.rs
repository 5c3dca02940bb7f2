//! Exact summation of non-negative `f64` values.
//!
//! Squared errors are accumulated into a fixed-point superaccumulator that
//! spans the entire `f64` range, so the sum of a multiset of terms is the
//! same regardless of grouping or order. Ordering comparisons between two
//! sums are exact, and [`ExactSum::to_f64`] rounds to nearest, ties to even.

use std::cmp::Ordering;

const LIMB_BITS: u32 = 32;
const LIMB_MASK: u64 = (1 << LIMB_BITS) - 1;
/// Bit 0 of limb 0 has weight 2^-1074 (the smallest subnormal).
const LIMBS: usize = 68;
/// Adds allowed between carry normalizations; each add contributes < 2^32 per limb.
const MAX_PENDING: u32 = 1 << 30;

#[derive(Clone)]
pub struct ExactSum {
    limbs: [u64; LIMBS],
    pending: u32,
}

impl Default for ExactSum {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ExactSum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("ExactSum").field(&self.to_f64()).finish()
    }
}

impl ExactSum {
    pub const fn new() -> Self {
        Self {
            limbs: [0; LIMBS],
            pending: 0,
        }
    }

    /// Adds a non-negative finite value.
    ///
    /// Panics on negative or non-finite input; callers only feed squares.
    pub fn add(&mut self, x: f64) {
        assert!(
            x >= 0.0 && x.is_finite(),
            "ExactSum accepts non-negative finite values, got {x}"
        );
        if x == 0.0 {
            return;
        }
        let bits = x.to_bits();
        let field = ((bits >> 52) & 0x7ff) as usize;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, offset) = if field == 0 {
            (frac, 0)
        } else {
            (frac | (1u64 << 52), field - 1)
        };
        let limb = offset / LIMB_BITS as usize;
        let wide = (mant as u128) << (offset % LIMB_BITS as usize);
        self.limbs[limb] += (wide as u64) & LIMB_MASK;
        self.limbs[limb + 1] += ((wide >> 32) as u64) & LIMB_MASK;
        self.limbs[limb + 2] += (wide >> 64) as u64;
        self.bump();
    }

    pub fn merge(&mut self, other: &ExactSum) {
        let mut other = other.clone();
        other.normalize();
        self.normalize();
        for (a, b) in self.limbs.iter_mut().zip(other.limbs.iter()) {
            *a += *b;
        }
        self.bump();
    }

    pub fn is_zero(&self) -> bool {
        self.limbs.iter().all(|&l| l == 0)
    }

    fn bump(&mut self) {
        self.pending += 1;
        if self.pending >= MAX_PENDING {
            self.normalize();
        }
    }

    fn normalize(&mut self) {
        let mut carry = 0u64;
        for limb in self.limbs.iter_mut() {
            let v = *limb + carry;
            *limb = v & LIMB_MASK;
            carry = v >> LIMB_BITS;
        }
        debug_assert_eq!(carry, 0, "superaccumulator overflow");
        self.pending = 0;
    }

    fn normalized(&self) -> [u64; LIMBS] {
        let mut c = self.clone();
        c.normalize();
        c.limbs
    }

    /// The sum rounded to nearest `f64`, ties to even. Overflows to infinity.
    pub fn to_f64(&self) -> f64 {
        let limbs = self.normalized();
        let Some(top) = limbs.iter().rposition(|&l| l != 0) else {
            return 0.0;
        };
        // Gather up to three limbs below and including `top` (96 bits).
        let lo_idx = top.saturating_sub(2);
        let mut window: u128 = 0;
        for i in (lo_idx..=top).rev() {
            window = (window << LIMB_BITS) | limbs[i] as u128;
        }
        let sticky = limbs[..lo_idx].iter().any(|&l| l != 0);
        let base = (lo_idx as i32) * LIMB_BITS as i32 - 1074;
        let width = 128 - window.leading_zeros() as i32;
        let top_exp = base + width - 1;
        if top_exp > 1023 {
            return f64::INFINITY;
        }
        let keep = if top_exp >= -1022 { 53 } else { top_exp + 1075 };
        let shift = width - keep;
        let (mant, exp) = if shift <= 0 {
            (window as u64, base)
        } else {
            let mut mant = (window >> shift) as u64;
            let rem = window & ((1u128 << shift) - 1);
            let half = 1u128 << (shift - 1);
            let round_up = rem > half || (rem == half && (sticky || mant & 1 == 1));
            if round_up {
                mant += 1;
            }
            (mant, base + shift)
        };
        compose(mant, exp)
    }
}

/// Builds `mant * 2^exp`, which the caller guarantees is representable.
fn compose(mut mant: u64, mut exp: i32) -> f64 {
    if mant == 0 {
        return 0.0;
    }
    while mant >= 1 << 53 {
        debug_assert_eq!(mant & 1, 0);
        mant >>= 1;
        exp += 1;
    }
    while mant < 1 << 52 && exp > -1074 {
        mant <<= 1;
        exp -= 1;
    }
    if mant < 1 << 52 {
        return f64::from_bits(mant);
    }
    let biased = exp + 52 + 1023;
    if biased >= 2047 {
        return f64::INFINITY;
    }
    f64::from_bits(((biased as u64) << 52) | (mant - (1 << 52)))
}

impl PartialEq for ExactSum {
    fn eq(&self, other: &Self) -> bool {
        self.normalized() == other.normalized()
    }
}

impl Eq for ExactSum {}

impl PartialOrd for ExactSum {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ExactSum {
    fn cmp(&self, other: &Self) -> Ordering {
        let a = self.normalized();
        let b = other.normalized();
        a.iter().rev().cmp(b.iter().rev())
    }
}

impl FromIterator<f64> for ExactSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nonneg_f64() -> impl Strategy<Value = f64> {
        prop_oneof![
            (0u64..0x7ff0_0000_0000_0000).prop_map(f64::from_bits),
            (0.0f64..1e6),
            (0u64..1 << 52).prop_map(f64::from_bits),
        ]
    }

    #[test]
    fn empty_is_zero() {
        assert_eq!(ExactSum::new().to_f64(), 0.0);
        assert!(ExactSum::new().is_zero());
    }

    #[test]
    fn extremes_round_trip() {
        for x in [f64::MIN_POSITIVE, 5e-324, f64::MAX, 1.0, 0.1, 2.5e-310] {
            let s: ExactSum = [x].into_iter().collect();
            assert_eq!(s.to_f64(), x);
        }
    }

    #[test]
    fn overflow_to_infinity() {
        let s: ExactSum = [f64::MAX, f64::MAX].into_iter().collect();
        assert_eq!(s.to_f64(), f64::INFINITY);
    }

    #[test]
    fn tiny_addend_breaks_tie() {
        // 1 + 2^-53 is a tie that rounds to 1; any extra sticky bit rounds up.
        let s: ExactSum = [1.0, 2f64.powi(-53)].into_iter().collect();
        assert_eq!(s.to_f64(), 1.0);
        let s: ExactSum = [1.0, 2f64.powi(-53), 5e-324].into_iter().collect();
        assert_eq!(s.to_f64(), 1.0 + f64::EPSILON);
    }

    proptest! {
        // A correctly rounded two-term sum is exactly IEEE addition.
        #[test]
        fn two_term_matches_ieee(a in nonneg_f64(), b in nonneg_f64()) {
            let s: ExactSum = [a, b].into_iter().collect();
            prop_assert_eq!(s.to_f64().to_bits(), (a + b).to_bits());
        }

        #[test]
        fn order_independent(mut xs in proptest::collection::vec(nonneg_f64(), 0..40)) {
            let fwd: ExactSum = xs.iter().copied().collect();
            xs.reverse();
            let (left, right) = xs.split_at(xs.len() / 2);
            let mut grouped: ExactSum = left.iter().copied().collect();
            grouped.merge(&right.iter().copied().collect());
            prop_assert_eq!(&fwd, &grouped);
            prop_assert_eq!(fwd.to_f64().to_bits(), grouped.to_f64().to_bits());
        }

        #[test]
        fn ordering_is_monotone(xs in proptest::collection::vec(nonneg_f64(), 1..20), extra in nonneg_f64()) {
            let base: ExactSum = xs.iter().copied().collect();
            let mut more = base.clone();
            more.add(extra);
            prop_assert!(more >= base);
            prop_assert_eq!(more == base, extra == 0.0);
            prop_assert!(more.to_f64() >= base.to_f64());
        }
    }
}
