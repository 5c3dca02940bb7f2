//! Block quantize/dequantize and error accounting.
//!
//! A tensor is flattened row-major and cut into consecutive blocks; the last
//! block may be shorter. Squared errors are summed exactly, so aggregate
//! reports do not depend on block order or thread scheduling.

use rayon::prelude::*;

use crate::accum::ExactSum;
use crate::error::{check_finite, Error, Result};
use crate::formats::{fp4_nearest, CodeValue, FP4_MAGNITUDES};
use crate::scaling::{
    abs_max, tensor_scale, validate_block, ScaleResult, ScaleStrategy, SelectContext, FP4_MAX,
};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub element_codes: Vec<CodeValue>,
    pub scale: ScaleResult,
}

impl QuantizedBlock {
    pub fn len(&self) -> usize {
        self.element_codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.element_codes.is_empty()
    }

    /// `element * scale * tensor_scale` for every element.
    pub fn dequantize(&self) -> Vec<f64> {
        let s = self.scale.value();
        let t = self.scale.tensor_scale;
        self.element_codes
            .iter()
            .map(|c| (c.value * s) * t)
            .collect()
    }
}

/// Squared-error totals split into clipping and rounding parts.
///
/// The `f64` fields are derived from exact sums: `total_sse` is the
/// correctly rounded total, `clip_sse` the correctly rounded clipping part,
/// and `round_sse` is chosen so that `clip_sse + round_sse == total_sse`.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub total_sse: f64,
    pub clip_sse: f64,
    pub round_sse: f64,
    pub n: u64,
    /// Counts per E2M1 magnitude, indexed like [`FP4_MAGNITUDES`].
    pub entry_bin_counts: [u64; 8],
    pub clipped_count: u64,
    clip_exact: ExactSum,
    round_exact: ExactSum,
}

impl Default for ErrorReport {
    fn default() -> Self {
        Self::from_exact(ExactSum::new(), ExactSum::new(), 0, [0; 8], 0)
    }
}

impl ErrorReport {
    fn from_exact(
        clip_exact: ExactSum,
        round_exact: ExactSum,
        n: u64,
        entry_bin_counts: [u64; 8],
        clipped_count: u64,
    ) -> Self {
        let mut total = clip_exact.clone();
        total.merge(&round_exact);
        let total_sse = total.to_f64();
        let (clip_sse, round_sse) = split_total(total_sse, clip_exact.to_f64());
        Self {
            total_sse,
            clip_sse,
            round_sse,
            n,
            entry_bin_counts,
            clipped_count,
            clip_exact,
            round_exact,
        }
    }

    pub fn mse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.total_sse / self.n as f64
        }
    }

    /// The exact total squared error, for order comparisons.
    pub fn exact_total(&self) -> ExactSum {
        let mut total = self.clip_exact.clone();
        total.merge(&self.round_exact);
        total
    }

    pub fn exact_clip(&self) -> &ExactSum {
        &self.clip_exact
    }

    pub fn merge(&mut self, other: &ErrorReport) {
        let mut clip = std::mem::take(&mut self.clip_exact);
        clip.merge(&other.clip_exact);
        let mut round = std::mem::take(&mut self.round_exact);
        round.merge(&other.round_exact);
        let mut bins = self.entry_bin_counts;
        for (a, b) in bins.iter_mut().zip(other.entry_bin_counts) {
            *a += b;
        }
        *self = Self::from_exact(
            clip,
            round,
            self.n + other.n,
            bins,
            self.clipped_count + other.clipped_count,
        );
    }

    /// Fraction of entries per FP4 magnitude bin.
    pub fn entry_fraction(&self, magnitude: f64) -> f64 {
        let idx = FP4_MAGNITUDES
            .iter()
            .position(|&m| m == magnitude)
            .expect("magnitude must be an E2M1 value");
        if self.n == 0 {
            0.0
        } else {
            self.entry_bin_counts[idx] as f64 / self.n as f64
        }
    }
}

/// Splits `total` into `(a, b)` with `a + b == total` in f64, `a` equal to
/// `part` when possible and `b` the nearest value to `total - part` that
/// satisfies the identity. Under ties-to-even some `(total, part)` pairs admit
/// no such `b`; `part` then moves toward zero one ulp at a time.
pub(crate) fn split_total(total: f64, part: f64) -> (f64, f64) {
    let mut part = part.clamp(0.0, total);
    loop {
        let guess = total - part;
        let mut below = guess;
        let mut above = guess;
        for _ in 0..4 {
            if part + below == total {
                return (part, below);
            }
            if part + above == total {
                return (part, above);
            }
            below = below.next_down();
            above = above.next_up();
        }
        part = part.next_down().max(0.0);
    }
}

pub fn quantize_block(block: &[f64], strategy: &ScaleStrategy) -> Result<QuantizedBlock> {
    validate_block(block)?;
    strategy.validate()?;
    let t = if strategy.hierarchical {
        tensor_scale(abs_max(block), &strategy.scale_format)
    } else {
        1.0
    };
    let ctx = SelectContext::new(strategy);
    Ok(quantize_with(block, &ctx, t))
}

fn quantize_with(block: &[f64], ctx: &SelectContext, t: f64) -> QuantizedBlock {
    let scaled: Vec<f64>;
    let inputs = if t == 1.0 {
        block
    } else {
        scaled = block.iter().map(|v| v / t).collect();
        &scaled
    };
    let mut scale = ctx.select(inputs);
    scale.tensor_scale = t;
    let s = scale.value();
    let element_codes = inputs
        .iter()
        .map(|&x| {
            if s == 0.0 {
                CodeValue {
                    code: 0,
                    value: 0.0,
                }
            } else {
                let (code, value) = fp4_nearest(x / s);
                CodeValue { code, value }
            }
        })
        .collect();
    QuantizedBlock {
        element_codes,
        scale,
    }
}

pub fn dequantize_block(q: &QuantizedBlock) -> Vec<f64> {
    q.dequantize()
}

/// Error of `q` against `original`. An element counts as clipped when the
/// scale is nonzero and its scaled magnitude exceeds 6 before rounding;
/// everything else, including zero-scale underflow, is rounding error.
pub fn error_report(original: &[f64], q: &QuantizedBlock) -> Result<ErrorReport> {
    if original.len() != q.len() {
        return Err(Error::LengthMismatch {
            original: original.len(),
            quantized: q.len(),
        });
    }
    check_finite(original)?;
    Ok(report_unchecked(original, q))
}

fn report_unchecked(original: &[f64], q: &QuantizedBlock) -> ErrorReport {
    let mut acc = Accumulator::default();
    acc.add_block(original, q);
    acc.finish()
}

/// Running exact totals over many blocks.
#[derive(Default)]
struct Accumulator {
    clip: ExactSum,
    round: ExactSum,
    bins: [u64; 8],
    clipped: u64,
    n: u64,
}

impl Accumulator {
    fn add_block(&mut self, original: &[f64], q: &QuantizedBlock) {
        let s = q.scale.value();
        let t = q.scale.tensor_scale;
        self.n += original.len() as u64;
        for (&v, code) in original.iter().zip(&q.element_codes) {
            self.bins[(code.code & 0x7) as usize] += 1;
            if s == 0.0 {
                self.round.add(v * v);
                continue;
            }
            let deq = (code.value * s) * t;
            let d = v - deq;
            if ((v / t) / s).abs() > FP4_MAX {
                self.clipped += 1;
                self.clip.add(d * d);
            } else {
                self.round.add(d * d);
            }
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        self.clip.merge(&other.clip);
        self.round.merge(&other.round);
        for (a, b) in self.bins.iter_mut().zip(other.bins) {
            *a += b;
        }
        self.clipped += other.clipped;
        self.n += other.n;
    }

    fn finish(self) -> ErrorReport {
        ErrorReport::from_exact(self.clip, self.round, self.n, self.bins, self.clipped)
    }
}

/// Blocks handled per parallel task.
const BLOCKS_PER_TASK: usize = 256;

/// Quantized blocks of a tensor plus their aggregate error.
#[derive(Debug, Clone)]
pub struct TensorQuantization {
    pub blocks: Vec<QuantizedBlock>,
    pub report: ErrorReport,
    pub tensor_scale: f64,
}

impl TensorQuantization {
    pub fn dequantize(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(|b| b.dequantize()).collect()
    }

    pub fn zero_scale_fraction(&self) -> f64 {
        let zeros = self
            .blocks
            .iter()
            .filter(|b| b.scale.value() == 0.0)
            .count();
        zeros as f64 / self.blocks.len() as f64
    }
}

pub fn quantize_tensor(
    tensor: &[f64],
    block_size: usize,
    strategy: &ScaleStrategy,
) -> Result<TensorQuantization> {
    validate_block(tensor)?;
    quantize_tensor_against(tensor, tensor, block_size, strategy)
}

/// Quantizes `input` but measures the error against `reference`, which must
/// have the same length. Used by the masking ablation.
pub(crate) fn quantize_tensor_against(
    input: &[f64],
    reference: &[f64],
    block_size: usize,
    strategy: &ScaleStrategy,
) -> Result<TensorQuantization> {
    strategy.validate()?;
    if block_size == 0 {
        return Err(Error::InvalidBlockSize);
    }
    if input.is_empty() {
        return Err(Error::Empty);
    }
    if input.len() != reference.len() {
        return Err(Error::LengthMismatch {
            original: reference.len(),
            quantized: input.len(),
        });
    }
    let t = if strategy.hierarchical {
        tensor_scale(abs_max(input), &strategy.scale_format)
    } else {
        1.0
    };
    let ctx = SelectContext::new(strategy);
    let span = block_size * BLOCKS_PER_TASK;
    let parts: Vec<(Vec<QuantizedBlock>, Accumulator)> = input
        .par_chunks(span)
        .zip(reference.par_chunks(span))
        .map(|(inp, orig)| {
            let mut acc = Accumulator::default();
            let mut blocks = Vec::with_capacity(BLOCKS_PER_TASK);
            for (chunk, orig) in inp.chunks(block_size).zip(orig.chunks(block_size)) {
                let q = quantize_with(chunk, &ctx, t);
                acc.add_block(orig, &q);
                blocks.push(q);
            }
            (blocks, acc)
        })
        .collect();
    let mut total = Accumulator::default();
    let mut blocks = Vec::with_capacity(input.len().div_ceil(block_size));
    for (part, acc) in parts {
        total.merge(&acc);
        blocks.extend(part);
    }
    Ok(TensorQuantization {
        blocks,
        report: total.finish(),
        tensor_scale: t,
    })
}
