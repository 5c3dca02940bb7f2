//! Minifloat format descriptors and bit-exact rounding.
//!
//! A [`FormatSpec`] describes a sign/exponent/mantissa layout of at most
//! eight bits. Every value set, limit and rounding decision is derived from
//! those fields. Rounding is nearest-value with ties resolved to the even
//! code (equivalently, the even mantissa field) and saturates at the largest
//! finite magnitude.
//!
//! Formats without mantissa bits (E8M0) are exponent-only: every code is a
//! power of two, there is no zero and no subnormal range.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialPolicy {
    /// Every code is a finite value.
    None,
    /// The all-ones magnitude code is NaN (OCP FN style, no infinities).
    NanAtMaxCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FormatSpec {
    pub name: &'static str,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub signed: bool,
    pub bias: i32,
    pub special_policy: SpecialPolicy,
}

/// A raw code in some format together with its decoded value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodeValue {
    pub code: u8,
    pub value: f64,
}

impl FormatSpec {
    /// OCP FP4: magnitudes {0, 0.5, 1, 1.5, 2, 3, 4, 6}.
    pub const E2M1: FormatSpec = FormatSpec {
        name: "e2m1",
        exponent_bits: 2,
        mantissa_bits: 1,
        signed: true,
        bias: 1,
        special_policy: SpecialPolicy::None,
    };

    /// OCP OFP8 E4M3: max 448, min subnormal 2^-9, NaN at S.1111.111.
    pub const E4M3: FormatSpec = FormatSpec {
        name: "e4m3",
        exponent_bits: 4,
        mantissa_bits: 3,
        signed: true,
        bias: 7,
        special_policy: SpecialPolicy::NanAtMaxCode,
    };

    /// Unsigned 5-bit exponent, 3-bit mantissa scale format. Bias 15,
    /// subnormals enabled, no reserved codes: range 2^-17 ..= 1.875 * 2^16.
    pub const UE5M3: FormatSpec = FormatSpec {
        name: "ue5m3",
        exponent_bits: 5,
        mantissa_bits: 3,
        signed: false,
        bias: 15,
        special_policy: SpecialPolicy::None,
    };

    /// MX power-of-two scale: 2^-127 ..= 2^127, code 0xFF is NaN.
    pub const E8M0: FormatSpec = FormatSpec {
        name: "e8m0",
        exponent_bits: 8,
        mantissa_bits: 0,
        signed: false,
        bias: 127,
        special_policy: SpecialPolicy::NanAtMaxCode,
    };

    pub const BUILTIN: [FormatSpec; 4] = [Self::E2M1, Self::E4M3, Self::UE5M3, Self::E8M0];

    pub fn new(
        name: &'static str,
        exponent_bits: u32,
        mantissa_bits: u32,
        signed: bool,
        bias: i32,
        special_policy: SpecialPolicy,
    ) -> Result<Self> {
        let spec = FormatSpec {
            name,
            exponent_bits,
            mantissa_bits,
            signed,
            bias,
            special_policy,
        };
        if spec.width() > 8 {
            return Err(Error::Config(format!(
                "format {name} is {} bits wide; at most 8 are supported",
                spec.width()
            )));
        }
        if exponent_bits + mantissa_bits == 0 {
            return Err(Error::Config(format!(
                "format {name} has no magnitude bits"
            )));
        }
        Ok(spec)
    }

    /// Looks up a built-in format by its lowercase name.
    pub fn parse(name: &str) -> Result<Self> {
        Self::BUILTIN
            .into_iter()
            .find(|f| f.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownName {
                kind: "format",
                value: name.to_string(),
            })
    }

    pub fn width(&self) -> u32 {
        self.exponent_bits + self.mantissa_bits + u32::from(self.signed)
    }

    fn magnitude_mask(&self) -> u8 {
        ((1u16 << (self.exponent_bits + self.mantissa_bits)) - 1) as u8
    }

    fn sign_bit(&self) -> u8 {
        if self.signed {
            1 << (self.exponent_bits + self.mantissa_bits)
        } else {
            0
        }
    }

    pub fn is_exponent_only(&self) -> bool {
        self.mantissa_bits == 0
    }

    fn top_finite_magnitude(&self) -> u8 {
        match self.special_policy {
            SpecialPolicy::None => self.magnitude_mask(),
            SpecialPolicy::NanAtMaxCode => self.magnitude_mask() - 1,
        }
    }

    pub fn is_nan_code(&self, code: u8) -> bool {
        self.special_policy == SpecialPolicy::NanAtMaxCode
            && code & self.magnitude_mask() == self.magnitude_mask()
    }

    /// Decodes a code; `None` for NaN codes or codes wider than the format.
    pub fn decode(&self, code: u8) -> Option<f64> {
        if u32::from(code) >= 1 << self.width() || self.is_nan_code(code) {
            return None;
        }
        let mag = self.decode_magnitude(code & self.magnitude_mask());
        Some(if code & self.sign_bit() != 0 {
            -mag
        } else {
            mag
        })
    }

    fn decode_magnitude(&self, mag: u8) -> f64 {
        let m = self.mantissa_bits;
        let efield = i32::from(mag >> m);
        let mfield = u64::from(mag & ((1u16 << m) - 1) as u8);
        if self.is_exponent_only() {
            pow2(efield - self.bias)
        } else if efield == 0 {
            mfield as f64 * pow2(1 - self.bias - m as i32)
        } else {
            ((1u64 << m) + mfield) as f64 * pow2(efield - self.bias - m as i32)
        }
    }

    pub fn max_value(&self) -> f64 {
        self.decode_magnitude(self.top_finite_magnitude())
    }

    /// Smallest positive value (the subnormal step, or 2^-bias when exponent-only).
    pub fn min_positive(&self) -> f64 {
        if self.is_exponent_only() {
            self.decode_magnitude(0)
        } else {
            self.decode_magnitude(1)
        }
    }

    /// Smallest positive normal value.
    pub fn min_normal(&self) -> f64 {
        pow2(1 - self.bias)
    }

    /// All finite values in ascending order. Negative zero is folded into a
    /// single zero entry with code 0; NaN codes are excluded.
    pub fn enumerate_values(&self) -> Vec<CodeValue> {
        let top = self.top_finite_magnitude();
        let positives = (0..=top).map(|code| CodeValue {
            code,
            value: self.decode_magnitude(code),
        });
        let mut out = Vec::with_capacity(2 * top as usize + 2);
        if self.signed {
            let first_nonzero = if self.is_exponent_only() { 0 } else { 1 };
            out.extend((first_nonzero..=top).rev().map(|code| CodeValue {
                code: code | self.sign_bit(),
                value: -self.decode_magnitude(code),
            }));
        }
        out.extend(positives);
        out
    }

    /// Positive finite values in ascending order (the usable scale candidates).
    pub fn positive_values(&self) -> Vec<CodeValue> {
        self.enumerate_values()
            .into_iter()
            .filter(|cv| cv.value > 0.0)
            .collect()
    }

    /// Rounds `v` to the nearest representable value, ties to the even code,
    /// saturating at `±max_value`. Negative inputs to unsigned formats round
    /// to the smallest non-negative value.
    pub fn round(&self, v: f64) -> Result<CodeValue> {
        if !v.is_finite() {
            return Err(Error::NonFinite(v));
        }
        let negative = self.signed && v.is_sign_negative();
        let a = if v < 0.0 && !self.signed {
            0.0
        } else {
            v.abs()
        };
        let mag = self.round_magnitude(a);
        let code = if negative { mag | self.sign_bit() } else { mag };
        let value = self.decode_magnitude(mag);
        Ok(CodeValue {
            code,
            value: if negative { -value } else { value },
        })
    }

    fn round_magnitude(&self, a: f64) -> u8 {
        let top = self.top_finite_magnitude();
        if a >= self.max_value() {
            return top;
        }
        let bias = self.bias;
        if self.is_exponent_only() {
            let min_exp = -bias;
            if a == 0.0 || floor_log2(a) < min_exp {
                return 0;
            }
            let e = floor_log2(a);
            let lo = (e + bias) as u8;
            let mid = 1.5 * pow2(e);
            return if a < mid || (a == mid && lo.is_multiple_of(2)) {
                lo
            } else {
                lo + 1
            };
        }
        let m = self.mantissa_bits as i32;
        let emin = 1 - bias;
        let e = if a == 0.0 {
            emin
        } else {
            floor_log2(a).max(emin)
        };
        let q = (a / pow2(e - m)).round_ties_even() as u64;
        let mag = if q < 1 << m {
            q
        } else if q == 1 << (m + 1) {
            ((e + bias + 1) as u64) << m
        } else {
            (((e + bias) as u64) << m) | (q - (1 << m))
        };
        (mag.min(u64::from(top))) as u8
    }
}

impl std::fmt::Display for FormatSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name)
    }
}

/// Rounds `v` into `spec`. Free-function form of [`FormatSpec::round`].
pub fn round_to_format(spec: &FormatSpec, v: f64) -> Result<CodeValue> {
    spec.round(v)
}

/// Encodes an already-scaled element into E2M1, clipping at ±6.
pub fn encode_element_fp4(v_scaled: f64) -> Result<CodeValue> {
    if !v_scaled.is_finite() {
        return Err(Error::NonFinite(v_scaled));
    }
    let (code, value) = fp4_nearest(v_scaled);
    Ok(CodeValue { code, value })
}

/// E2M1 magnitudes indexed by code.
pub const FP4_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

/// Threshold form of E2M1 rounding used on hot paths. Midpoints listed with
/// `<=` resolve to the lower neighbour because its code is even.
#[inline]
pub(crate) fn fp4_nearest(x: f64) -> (u8, f64) {
    let a = x.abs();
    let mag: u8 = if a <= 0.25 {
        0
    } else if a < 0.75 {
        1
    } else if a <= 1.25 {
        2
    } else if a < 1.75 {
        3
    } else if a <= 2.5 {
        4
    } else if a < 3.5 {
        5
    } else if a <= 5.0 {
        6
    } else {
        7
    };
    let value = FP4_MAGNITUDES[mag as usize];
    if x.is_sign_negative() {
        (mag | 0x8, -value)
    } else {
        (mag, value)
    }
}

/// Renders the format's value table as CSV (`code,bits,value`).
pub fn format_table_csv(spec: &FormatSpec, magnitudes_only: bool) -> String {
    let mut out = String::from("code,bits,value\n");
    for cv in spec.enumerate_values() {
        if magnitudes_only && cv.value < 0.0 {
            continue;
        }
        let _ = writeln!(
            out,
            "{},{:0width$b},{}",
            cv.code,
            cv.code,
            cv.value,
            width = spec.width() as usize
        );
    }
    out
}

/// Exact 2^k for k in the normal f64 exponent range.
pub(crate) fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// floor(log2(a)) for finite a > 0, exact including subnormals.
pub(crate) fn floor_log2(a: f64) -> i32 {
    let bits = a.to_bits();
    let field = ((bits >> 52) & 0x7ff) as i32;
    if field == 0 {
        let frac = bits & ((1u64 << 52) - 1);
        -1074 + (63 - frac.leading_zeros() as i32)
    } else {
        field - 1023
    }
}
