//! Seeded Gaussian block-size study.
//!
//! For each distribution scale σ one sample vector is drawn and reused for
//! every block size, strategy and scale format, so all comparisons within a
//! σ are paired. Samples come from ChaCha8 keyed by `(seed, stream)`, which
//! makes every cell independent of evaluation order and worker count.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::formats::{FormatSpec, FP4_MAGNITUDES};
use crate::quantizer::{quantize_tensor, split_total, TensorQuantization};
use crate::scaling::{ScaleKind, ScaleStrategy};

pub const SWEEP_HEADER: &str =
    "sigma,block_size,strategy,scale_format,mse,mse_over_variance,clip_mse,round_mse,zero_scale_fraction";
pub const HIST_HEADER: &str = "region,sigma,block_size,strategy,bin_kind,bin_value,count";

/// Streams at or above this offset are reserved for histogram regions.
const REGION_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub sigmas: Vec<f64>,
    pub block_sizes: Vec<usize>,
    pub strategies: Vec<ScaleKind>,
    pub scale_formats: Vec<FormatSpec>,
    pub hierarchical: bool,
    pub samples_per_sigma: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            sigmas: sigma_grid(-24, 4, 8),
            block_sizes: vec![4, 8, 16, 32],
            strategies: vec![
                ScaleKind::AbsMax,
                ScaleKind::PreventZero,
                ScaleKind::FourOverSix,
                ScaleKind::FourOverSixPreventZero,
                ScaleKind::BruteForce,
            ],
            scale_formats: vec![FormatSpec::E4M3],
            hierarchical: false,
            samples_per_sigma: 1 << 16,
            seed: 0,
        }
    }
}

/// `2^(lo + k/per_octave)` for k = 0 ..= (hi - lo) * per_octave.
pub fn sigma_grid(lo_log2: i32, hi_log2: i32, per_octave: u32) -> Vec<f64> {
    let steps = (hi_log2 - lo_log2).max(0) as u32 * per_octave.max(1);
    (0..=steps)
        .map(|k| (lo_log2 as f64 + k as f64 / per_octave.max(1) as f64).exp2())
        .collect()
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.sigmas.is_empty() || self.block_sizes.is_empty() || self.strategies.is_empty() {
            return fail("sigma grid, block sizes and strategies must be non-empty".into());
        }
        if self.scale_formats.is_empty() {
            return fail("at least one scale format is required".into());
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail("sigmas must be positive and finite".into());
        }
        if self.sigmas.windows(2).any(|w| w[0] >= w[1]) {
            return fail("sigma grid must be strictly increasing".into());
        }
        if self.block_sizes.contains(&0) {
            return fail("block sizes must be positive".into());
        }
        let largest = *self.block_sizes.iter().max().expect("non-empty");
        if self.samples_per_sigma == 0 || !self.samples_per_sigma.is_multiple_of(largest) {
            return fail(format!(
                "samples_per_sigma ({}) must be a positive multiple of the largest block size ({largest})",
                self.samples_per_sigma
            ));
        }
        Ok(())
    }

    /// The (strategy, scale format) pairs evaluated per cell. `mxpow2` only
    /// ever runs with E8M0 and appears once.
    pub fn strategy_grid(&self) -> Vec<ScaleStrategy> {
        let mut out: Vec<ScaleStrategy> = Vec::new();
        for &kind in &self.strategies {
            for fmt in &self.scale_formats {
                let s = ScaleStrategy::new(kind, *fmt).with_hierarchical(self.hierarchical);
                if !out.contains(&s) {
                    out.push(s);
                }
            }
        }
        out
    }

    /// One-line provenance record written at the top of every CSV.
    pub fn describe(&self) -> String {
        let join = |items: Vec<String>| items.join(";");
        format!(
            "# seed={} samples_per_sigma={} sigmas={} [{}..{}] block_sizes={} strategies={} scale_formats={} hierarchical={}",
            self.seed,
            self.samples_per_sigma,
            self.sigmas.len(),
            self.sigmas.first().copied().unwrap_or(0.0),
            self.sigmas.last().copied().unwrap_or(0.0),
            join(self.block_sizes.iter().map(|b| b.to_string()).collect()),
            join(self.strategies.iter().map(|s| s.id().to_string()).collect()),
            join(self.scale_formats.iter().map(|f| f.name.to_string()).collect()),
            self.hierarchical,
        )
    }
}

/// Draws `n` samples of N(0, σ²) from the stream `(seed, stream)`.
pub fn sample_gaussian(seed: u64, stream: u64, sigma: f64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sigma
        })
        .collect()
}

/// The paired sample vector for σ index `i` of a sweep.
pub fn sweep_samples(config: &StudyConfig, sigma_index: usize) -> Vec<f64> {
    sample_gaussian(
        config.seed,
        sigma_index as u64,
        config.sigmas[sigma_index],
        config.samples_per_sigma,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    pub block_size: usize,
    pub strategy: ScaleKind,
    pub scale_format: FormatSpec,
    pub mse: f64,
    pub mse_over_variance: f64,
    pub clip_mse: f64,
    pub round_mse: f64,
    pub zero_scale_fraction: f64,
}

impl SweepRow {
    pub fn from_quantization(
        sigma: f64,
        variance: f64,
        block_size: usize,
        strategy: &ScaleStrategy,
        tq: &TensorQuantization,
    ) -> Self {
        let n = tq.report.n as f64;
        let mse = tq.report.total_sse / n;
        let (clip_mse, round_mse) = split_total(mse, tq.report.clip_sse / n);
        Self {
            sigma,
            block_size,
            strategy: strategy.kind,
            scale_format: strategy.scale_format,
            mse,
            mse_over_variance: if variance > 0.0 { mse / variance } else { 0.0 },
            clip_mse,
            round_mse,
            zero_scale_fraction: tq.zero_scale_fraction(),
        }
    }
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.sigma,
            self.block_size,
            self.strategy.id(),
            self.scale_format.name,
            self.mse,
            self.mse_over_variance,
            self.clip_mse,
            self.round_mse,
            self.zero_scale_fraction
        )
    }
}

fn sweep_cell(config: &StudyConfig, sigma_index: usize) -> Result<Vec<SweepRow>> {
    let sigma = config.sigmas[sigma_index];
    let samples = sweep_samples(config, sigma_index);
    let strategies = config.strategy_grid();
    let mut rows = Vec::with_capacity(config.block_sizes.len() * strategies.len());
    for &bs in &config.block_sizes {
        for strategy in &strategies {
            let tq = quantize_tensor(&samples, bs, strategy)?;
            rows.push(SweepRow::from_quantization(
                sigma,
                sigma * sigma,
                bs,
                strategy,
                &tq,
            ));
        }
    }
    Ok(rows)
}

/// Runs every (σ, block size, strategy, scale format) cell. Rows are ordered
/// by σ index, then block size, then strategy, then scale format.
pub fn run_sweep(config: &StudyConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let cells: Vec<Vec<SweepRow>> = (0..config.sigmas.len())
        .into_par_iter()
        .map(|i| sweep_cell(config, i))
        .collect::<Result<_>>()?;
    Ok(cells.into_iter().flatten().collect())
}

pub fn sweep_csv(config: &StudyConfig, rows: &[SweepRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", config.describe());
    let _ = writeln!(out, "{SWEEP_HEADER}");
    for row in rows {
        let _ = writeln!(out, "{row}");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Region {
    A,
    B,
    C,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::A, Region::B, Region::C];

    pub fn label(self) -> char {
        match self {
            Region::A => 'A',
            Region::B => 'B',
            Region::C => 'C',
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Region::A),
            "B" | "b" => Ok(Region::B),
            "C" | "c" => Ok(Region::C),
            other => Err(Error::UnknownName {
                kind: "region",
                value: other.to_string(),
            }),
        }
    }

    fn stream(self) -> u64 {
        REGION_STREAM_BASE + self as u64
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// Representative σ per region, for E4M3 scales and E2M1 elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionExemplars {
    /// Abs-max scales underflow to zero.
    pub a: f64,
    /// Abs-max scales sit in the E4M3 subnormal range.
    pub b: f64,
    /// Abs-max scales are normal.
    pub c: f64,
}

impl RegionExemplars {
    pub fn sigma(&self, region: Region) -> f64 {
        match region {
            Region::A => self.a,
            Region::B => self.b,
            Region::C => self.c,
        }
    }
}

pub fn region_exemplars() -> RegionExemplars {
    RegionExemplars {
        a: 2f64.powi(-11),
        b: 2f64.powi(-6),
        c: 1.0,
    }
}

/// Region sample vector shared by validation and histograms.
pub fn region_samples(seed: u64, region: Region, sigma: f64, n: usize) -> Vec<f64> {
    sample_gaussian(seed, region.stream(), sigma, n)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

/// Checks each exemplar against its defining predicate under E4M3 abs-max:
/// A has more than 90% zero scales at block size 32; B has a nonzero median
/// scale below the smallest E4M3 normal at every block size; C has no zero
/// scales and a normal median scale at every block size.
pub fn validate_regions(
    exemplars: &RegionExemplars,
    block_sizes: &[usize],
    samples: usize,
    seed: u64,
) -> Result<RegionExemplars> {
    let absmax = ScaleStrategy::new(ScaleKind::AbsMax, FormatSpec::E4M3);
    let min_normal = FormatSpec::E4M3.min_normal();
    let fail = |region: Region, reason: String| {
        Err(Error::RegionValidation {
            region: region.label(),
            sigma: exemplars.sigma(region),
            reason,
        })
    };
    let run = |region: Region, bs: usize| -> Result<TensorQuantization> {
        let xs = region_samples(seed, region, exemplars.sigma(region), samples);
        quantize_tensor(&xs, bs, &absmax)
    };

    let zf = run(Region::A, 32)?.zero_scale_fraction();
    if zf <= 0.9 {
        return fail(
            Region::A,
            format!("zero-scale fraction {zf} at block size 32 is not above 0.9"),
        );
    }
    for &bs in block_sizes {
        let tq = run(Region::B, bs)?;
        let med = median(tq.blocks.iter().map(|b| b.scale.value()).collect());
        if !(med > 0.0 && med < min_normal) {
            return fail(
                Region::B,
                format!("median scale {med} at block size {bs} is not an E4M3 subnormal"),
            );
        }
        let tq = run(Region::C, bs)?;
        let zf = tq.zero_scale_fraction();
        let med = median(tq.blocks.iter().map(|b| b.scale.value()).collect());
        if zf != 0.0 || med < min_normal {
            return fail(
                Region::C,
                format!("block size {bs}: zero-scale fraction {zf}, median scale {med}"),
            );
        }
    }
    Ok(*exemplars)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Entry,
    Scale,
}

impl BinKind {
    pub fn id(self) -> &'static str {
        match self {
            BinKind::Entry => "entry",
            BinKind::Scale => "scale",
        }
    }
}

/// One histogram bin. `region` is `A`, `B`, `C`, or a free-form label for
/// ingested tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramRow {
    pub region: String,
    pub sigma: f64,
    pub block_size: usize,
    pub strategy: ScaleKind,
    pub bin_kind: BinKind,
    pub bin_value: f64,
    pub count: u64,
}

impl fmt::Display for HistogramRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.region,
            self.sigma,
            self.block_size,
            self.strategy.id(),
            self.bin_kind.id(),
            self.bin_value,
            self.count
        )
    }
}

/// Entry rows (all eight FP4 magnitudes) and scale rows (every distinct
/// scale value, ascending) for one quantized tensor.
pub fn histogram_rows(
    region: &str,
    sigma: f64,
    block_size: usize,
    strategy: ScaleKind,
    tq: &TensorQuantization,
) -> Vec<HistogramRow> {
    let row = |bin_kind, bin_value, count| HistogramRow {
        region: region.to_string(),
        sigma,
        block_size,
        strategy,
        bin_kind,
        bin_value,
        count,
    };
    let mut rows: Vec<HistogramRow> = FP4_MAGNITUDES
        .iter()
        .zip(tq.report.entry_bin_counts)
        .map(|(&mag, count)| row(BinKind::Entry, mag, count))
        .collect();
    let mut scales: BTreeMap<u64, u64> = BTreeMap::new();
    for b in &tq.blocks {
        // Non-negative f64 order matches bit order.
        *scales.entry(b.scale.value().abs().to_bits()).or_default() += 1;
    }
    rows.extend(
        scales
            .into_iter()
            .map(|(bits, count)| row(BinKind::Scale, f64::from_bits(bits), count)),
    );
    rows
}

/// Histograms for each region × block size × strategy. Requires a single
/// scale format so each row is unambiguous.
pub fn run_histograms(
    config: &StudyConfig,
    regions: &RegionExemplars,
) -> Result<Vec<HistogramRow>> {
    config.validate()?;
    if config.scale_formats.len() != 1 {
        return Err(Error::Config(
            "histograms take exactly one scale format".into(),
        ));
    }
    let strategies = config.strategy_grid();
    let mut tasks = Vec::new();
    for region in Region::ALL {
        for &bs in &config.block_sizes {
            for s in &strategies {
                tasks.push((region, bs, *s));
            }
        }
    }
    let per_region: BTreeMap<Region, Vec<f64>> = Region::ALL
        .into_par_iter()
        .map(|r| {
            let xs = region_samples(config.seed, r, regions.sigma(r), config.samples_per_sigma);
            (r, xs)
        })
        .collect();
    let chunks: Vec<Vec<HistogramRow>> = tasks
        .par_iter()
        .map(|(region, bs, strategy)| {
            let sigma = regions.sigma(*region);
            let tq = quantize_tensor(&per_region[region], *bs, strategy)?;
            Ok(histogram_rows(
                &region.to_string(),
                sigma,
                *bs,
                strategy.kind,
                &tq,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// CSV for the rows of one region label.
pub fn histogram_csv(config_line: &str, rows: &[HistogramRow], region: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{config_line}");
    let _ = writeln!(out, "{HIST_HEADER}");
    for row in rows.iter().filter(|r| r.region == region) {
        let _ = writeln!(out, "{row}");
    }
    out
}
