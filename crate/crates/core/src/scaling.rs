//! Block scale selection.
//!
//! Every strategy maps a block of working-precision values to a scale that
//! is representable in the strategy's scale format. Candidate scales are
//! compared by the block's squared dequantization error; comparisons that
//! are too close to call in `f64` fall back to exact summation so that the
//! dominance relations between strategies hold without rounding slop.

use std::fmt;

use crate::accum::ExactSum;
use crate::error::{check_finite, Error, Result};
use crate::formats::{floor_log2, fp4_nearest, CodeValue, FormatSpec};

/// Largest E2M1 magnitude; the default target maximum.
pub const FP4_MAX: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScaleKind {
    AbsMax,
    PreventZero,
    FourOverSix,
    /// 4-over-6 with each candidate clamped away from zero.
    FourOverSixPreventZero,
    MxPow2,
    BruteForce,
}

impl ScaleKind {
    pub const ALL: [ScaleKind; 6] = [
        ScaleKind::AbsMax,
        ScaleKind::PreventZero,
        ScaleKind::FourOverSix,
        ScaleKind::FourOverSixPreventZero,
        ScaleKind::MxPow2,
        ScaleKind::BruteForce,
    ];

    pub fn id(self) -> &'static str {
        match self {
            ScaleKind::AbsMax => "absmax",
            ScaleKind::PreventZero => "pz",
            ScaleKind::FourOverSix => "4o6",
            ScaleKind::FourOverSixPreventZero => "pz4o6",
            ScaleKind::MxPow2 => "mxpow2",
            ScaleKind::BruteForce => "brute",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownName {
                kind: "strategy",
                value: s.to_string(),
            })
    }
}

impl fmt::Display for ScaleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

/// A scale-selection recipe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleStrategy {
    pub kind: ScaleKind,
    /// Target maximum M for abs-max style recipes. 4-over-6 ignores it.
    pub target_max: f64,
    pub scale_format: FormatSpec,
    pub hierarchical: bool,
}

impl ScaleStrategy {
    /// A strategy with M = 6. `MxPow2` always uses E8M0 scales.
    pub fn new(kind: ScaleKind, scale_format: FormatSpec) -> Self {
        let scale_format = if kind == ScaleKind::MxPow2 {
            FormatSpec::E8M0
        } else {
            scale_format
        };
        Self {
            kind,
            target_max: FP4_MAX,
            scale_format,
            hierarchical: false,
        }
    }

    pub fn with_target_max(mut self, m: f64) -> Self {
        self.target_max = m;
        self
    }

    pub fn with_hierarchical(mut self, on: bool) -> Self {
        self.hierarchical = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_max > 0.0 && self.target_max.is_finite()) {
            return Err(Error::InvalidTargetMax(self.target_max));
        }
        if self.kind == ScaleKind::MxPow2 && self.scale_format != FormatSpec::E8M0 {
            return Err(Error::Config("mxpow2 requires e8m0 scales".into()));
        }
        Ok(())
    }

    /// Recipe label such as `e4m3+4o6+H`. Abs-max is implied when no
    /// strategy token is present.
    pub fn label(&self) -> String {
        let mut label = self.scale_format.name.to_string();
        if self.kind != ScaleKind::AbsMax {
            label.push('+');
            label.push_str(self.kind.id());
        }
        if self.hierarchical {
            label.push_str("+H");
        }
        label
    }

    pub fn from_label(label: &str) -> Result<Self> {
        let mut parts = label.split('+').map(str::trim);
        let format = FormatSpec::parse(parts.next().unwrap_or_default())?;
        let mut kind = ScaleKind::AbsMax;
        let mut hierarchical = false;
        for part in parts {
            if part == "H" || part == "h" {
                hierarchical = true;
            } else {
                kind = ScaleKind::parse(part)?;
            }
        }
        Ok(Self::new(kind, format).with_hierarchical(hierarchical))
    }
}

/// The scale chosen for one block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleResult {
    pub scale: CodeValue,
    /// The target maximum that produced the scale (4 or 6 for 4-over-6).
    pub chosen_max: f64,
    /// Per-tensor factor, 1.0 unless hierarchical.
    pub tensor_scale: f64,
    /// The abs-max style scale rounded to zero (or below the E8M0 range)
    /// before any prevent-zero adjustment.
    pub underflowed: bool,
}

impl ScaleResult {
    pub fn value(&self) -> f64 {
        self.scale.value
    }
}

pub(crate) fn validate_block(block: &[f64]) -> Result<()> {
    if block.is_empty() {
        return Err(Error::Empty);
    }
    check_finite(block)
}

fn validate_target(m: f64) -> Result<()> {
    if m > 0.0 && m.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTargetMax(m))
    }
}

pub(crate) fn abs_max(block: &[f64]) -> f64 {
    block.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn scale_abs_max(block: &[f64], m: f64, scale_format: &FormatSpec) -> Result<ScaleResult> {
    validate_block(block)?;
    validate_target(m)?;
    Ok(abs_max_scale(abs_max(block), m, scale_format))
}

pub fn scale_prevent_zero(block: &[f64], m: f64, scale_format: &FormatSpec) -> Result<ScaleResult> {
    validate_block(block)?;
    validate_target(m)?;
    Ok(prevent_zero(
        abs_max_scale(abs_max(block), m, scale_format),
        scale_format,
    ))
}

pub fn scale_four_over_six(block: &[f64], scale_format: &FormatSpec) -> Result<ScaleResult> {
    validate_block(block)?;
    Ok(four_over_six(block, scale_format, false))
}

pub fn scale_mx_pow2(block: &[f64], m: f64) -> Result<ScaleResult> {
    validate_block(block)?;
    validate_target(m)?;
    Ok(mx_pow2(abs_max(block), m))
}

pub fn scale_brute_force(block: &[f64], scale_format: &FormatSpec) -> Result<ScaleResult> {
    validate_block(block)?;
    let candidates = scale_format.positive_values();
    Ok(brute_force(block, &candidates))
}

/// Per-tensor factor so the largest block abs-max scale lands exactly on the
/// scale format's maximum. All-zero tensors get 1.0.
pub fn tensor_scale(tensor_abs_max: f64, scale_format: &FormatSpec) -> f64 {
    if tensor_abs_max == 0.0 {
        return 1.0;
    }
    let smax = scale_format.max_value();
    let mut t = tensor_abs_max / (FP4_MAX * smax);
    // Guard the last ulp so the scaled maximum never exceeds the format.
    while (tensor_abs_max / t) / FP4_MAX > smax {
        t = t.next_up();
    }
    t
}

/// Two-level scaling: divide by the per-tensor factor, then select a scale
/// for each consecutive block with the inner strategy.
pub fn hierarchical_wrap(
    tensor: &[f64],
    block_size: usize,
    inner: &ScaleStrategy,
) -> Result<Vec<ScaleResult>> {
    validate_block(tensor)?;
    inner.validate()?;
    if block_size == 0 {
        return Err(Error::InvalidBlockSize);
    }
    let t = tensor_scale(abs_max(tensor), &inner.scale_format);
    let ctx = SelectContext::new(inner);
    let mut scaled = Vec::with_capacity(block_size);
    Ok(tensor
        .chunks(block_size)
        .map(|chunk| {
            scaled.clear();
            scaled.extend(chunk.iter().map(|v| v / t));
            let mut r = ctx.select(&scaled);
            r.tensor_scale = t;
            r
        })
        .collect())
}

/// Precomputed per-strategy state for selecting scales of many blocks.
pub(crate) struct SelectContext {
    strategy: ScaleStrategy,
    candidates: Vec<CodeValue>,
}

impl SelectContext {
    pub(crate) fn new(strategy: &ScaleStrategy) -> Self {
        let candidates = if strategy.kind == ScaleKind::BruteForce {
            strategy.scale_format.positive_values()
        } else {
            Vec::new()
        };
        Self {
            strategy: *strategy,
            candidates,
        }
    }

    /// Selects a scale for a validated, non-empty block.
    pub(crate) fn select(&self, block: &[f64]) -> ScaleResult {
        let s = &self.strategy;
        let fmt = &s.scale_format;
        match s.kind {
            ScaleKind::AbsMax => abs_max_scale(abs_max(block), s.target_max, fmt),
            ScaleKind::PreventZero => {
                prevent_zero(abs_max_scale(abs_max(block), s.target_max, fmt), fmt)
            }
            ScaleKind::FourOverSix => four_over_six(block, fmt, false),
            ScaleKind::FourOverSixPreventZero => four_over_six(block, fmt, true),
            ScaleKind::MxPow2 => mx_pow2(abs_max(block), s.target_max),
            ScaleKind::BruteForce => brute_force(block, &self.candidates),
        }
    }
}

fn abs_max_scale(amax: f64, m: f64, fmt: &FormatSpec) -> ScaleResult {
    let scale = fmt
        .round(amax / m)
        .expect("finite block yields a finite abs-max ratio");
    ScaleResult {
        scale,
        chosen_max: m,
        tensor_scale: 1.0,
        underflowed: scale.value == 0.0,
    }
}

fn prevent_zero(mut r: ScaleResult, fmt: &FormatSpec) -> ScaleResult {
    if r.scale.value == 0.0 {
        r.scale = fmt
            .round(fmt.min_positive())
            .expect("min positive is representable");
    }
    r
}

fn mx_pow2(amax: f64, m: f64) -> ScaleResult {
    let fmt = FormatSpec::E8M0;
    let lo = -fmt.bias;
    let hi = fmt.bias;
    let ratio = amax / m;
    let (exp, underflowed) = if ratio == 0.0 {
        (lo, true)
    } else {
        let e = floor_log2(ratio);
        (e.clamp(lo, hi), e < lo)
    };
    let code = (exp + fmt.bias) as u8;
    ScaleResult {
        scale: CodeValue {
            code,
            value: fmt.decode(code).expect("clamped exponent is finite"),
        },
        chosen_max: m,
        tensor_scale: 1.0,
        underflowed,
    }
}

fn four_over_six(block: &[f64], fmt: &FormatSpec, keep_nonzero: bool) -> ScaleResult {
    let amax = abs_max(block);
    let adjust = |r: ScaleResult| {
        if keep_nonzero {
            prevent_zero(r, fmt)
        } else {
            r
        }
    };
    let six = adjust(abs_max_scale(amax, FP4_MAX, fmt));
    let four = adjust(abs_max_scale(amax, 4.0, fmt));
    if four.scale.value == six.scale.value {
        return six;
    }
    match compare_sse(block, four.scale.value, six.scale.value) {
        std::cmp::Ordering::Less => four,
        _ => six,
    }
}

/// Exhaustive search over positive scales, ties to the smallest scale.
///
/// Candidates at or above 4·amax quantize every element to zero and cannot
/// beat any smaller scale; candidates far below amax/6 are cut off once the
/// clipping error of the largest element alone exceeds the best total.
fn brute_force(block: &[f64], candidates: &[CodeValue]) -> ScaleResult {
    let amax = abs_max(block);
    let pick = |scale: CodeValue| ScaleResult {
        scale,
        chosen_max: if scale.value > 0.0 {
            amax / scale.value
        } else {
            0.0
        },
        tensor_scale: 1.0,
        underflowed: false,
    };
    let window_end = candidates.partition_point(|c| c.value < 4.0 * amax);
    if window_end == 0 {
        return pick(candidates[0]);
    }
    let n = block.len();
    let lead = block
        .iter()
        .position(|v| v.abs() == amax)
        .expect("non-empty block");
    // Seed `best` near the abs-max scale so later candidates abort early.
    let seed = candidates[..window_end]
        .partition_point(|c| c.value * FP4_MAX < amax)
        .min(window_end - 1);
    let mut best = f64::INFINITY;
    let mut finished: Vec<(usize, f64)> = Vec::new();
    let mut evaluate = |idx: usize, best: &mut f64| -> bool {
        let c = candidates[idx].value;
        let limit = upper_margin(*best, n);
        let clip_max = amax - FP4_MAX * c;
        if clip_max > 0.0 && clip_max * clip_max > limit {
            return false;
        }
        if let Some(e) = sse_f64_lead(block, lead, c, limit) {
            *best = best.min(e);
            finished.push((idx, e));
        }
        true
    };
    evaluate(seed, &mut best);
    for idx in (0..window_end).rev() {
        if idx != seed && !evaluate(idx, &mut best) {
            break;
        }
    }
    finished.sort_unstable_by_key(|f| std::cmp::Reverse(f.0));
    let limit = upper_margin(best, n);
    finished.retain(|&(_, e)| e <= limit);
    // `finished` is in descending scale order; walk ascending for ties.
    let winner = if finished.len() == 1 {
        finished[0].0
    } else {
        let mut best_idx = usize::MAX;
        let mut best_exact: Option<ExactSum> = None;
        for &(idx, _) in finished.iter().rev() {
            let e = sse_exact(block, candidates[idx].value);
            if best_exact.as_ref().is_none_or(|b| e < *b) {
                best_exact = Some(e);
                best_idx = idx;
            }
        }
        best_idx
    };
    pick(candidates[winner])
}

fn relative_tolerance(n: usize) -> f64 {
    4.0 * (n as f64 + 1.0) * f64::EPSILON
}

/// Any f64 block sum above this is provably larger, in exact arithmetic,
/// than a block sum whose f64 value is `best`.
fn upper_margin(best: f64, n: usize) -> f64 {
    best * (1.0 + relative_tolerance(n)) + f64::MIN_POSITIVE
}

/// Squared error of one element quantized against `scale` (0 means the
/// whole block collapses to zero).
#[inline]
pub(crate) fn element_sq_error(v: f64, scale: f64) -> f64 {
    if scale == 0.0 {
        return v * v;
    }
    let (_, q) = fp4_nearest(v / scale);
    let d = v - q * scale;
    d * d
}

/// Block SSE in f64, or `None` once the running sum exceeds `limit`.
pub(crate) fn sse_f64(block: &[f64], scale: f64, limit: f64) -> Option<f64> {
    let mut acc = 0.0;
    for &v in block {
        acc += element_sq_error(v, scale);
        if acc > limit {
            return None;
        }
    }
    Some(acc)
}

/// Like [`sse_f64`] but starts with element `lead`.
fn sse_f64_lead(block: &[f64], lead: usize, scale: f64, limit: f64) -> Option<f64> {
    let mut acc = element_sq_error(block[lead], scale);
    if acc > limit {
        return None;
    }
    for (i, &v) in block.iter().enumerate() {
        if i != lead {
            acc += element_sq_error(v, scale);
            if acc > limit {
                return None;
            }
        }
    }
    Some(acc)
}

pub(crate) fn sse_exact(block: &[f64], scale: f64) -> ExactSum {
    block.iter().map(|&v| element_sq_error(v, scale)).collect()
}

/// Orders two scales by block SSE, exactly.
pub(crate) fn compare_sse(block: &[f64], a: f64, b: f64) -> std::cmp::Ordering {
    let ea = sse_f64(block, a, f64::INFINITY).unwrap_or(f64::INFINITY);
    let eb = sse_f64(block, b, f64::INFINITY).unwrap_or(f64::INFINITY);
    let n = block.len();
    if ea > upper_margin(eb, n) {
        std::cmp::Ordering::Greater
    } else if eb > upper_margin(ea, n) {
        std::cmp::Ordering::Less
    } else {
        sse_exact(block, a).cmp(&sse_exact(block, b))
    }
}

/// Mean squared error of a block under a fixed scale (no tensor factor).
pub fn block_mse(block: &[f64], scale: f64) -> f64 {
    sse_exact(block, scale).to_f64() / block.len() as f64
}

/// Exact block SSE under a fixed scale.
pub fn block_sse_exact(block: &[f64], scale: f64) -> ExactSum {
    sse_exact(block, scale)
}
