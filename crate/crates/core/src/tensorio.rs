//! Tensor files and the magnitude-masking ablation.
//!
//! Tensors are exchanged as NPY version 1.0 files restricted to
//! little-endian `<f4`/`<f8`, C order. Values are held as `f64`; saving an
//! `F32` tensor narrows each value, which is lossless for data that was
//! loaded from an `F32` file.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::quantizer::{quantize_tensor_against, TensorQuantization};
use crate::scaling::ScaleStrategy;
use crate::study::{histogram_rows, HistogramRow, SweepRow, SWEEP_HEADER};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const HEADER_ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F32 => "<f4",
            Dtype::F64 => "<f8",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Config(format!(
                "shape {shape:?} holds {count} values but {} were given",
                data.len()
            )));
        }
        crate::error::check_finite(&data)?;
        Ok(Self { dtype, shape, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn npy_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Npy {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_npy(&bytes, path)
}

pub fn save_tensor(path: impl AsRef<Path>, tensor: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_npy(tensor)).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses NPY bytes; `path` is only used in error messages.
pub fn parse_npy(bytes: &[u8], path: &Path) -> Result<TensorFile> {
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(npy_err(path, "missing \\x93NUMPY magic"));
    }
    if (bytes[6], bytes[7]) != (1, 0) {
        return Err(npy_err(
            path,
            format!(
                "unsupported version {}.{}; only 1.0 is read",
                bytes[6], bytes[7]
            ),
        ));
    }
    let header_len = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let data_start = 10 + header_len;
    if bytes.len() < data_start {
        return Err(npy_err(path, "truncated header"));
    }
    let header = std::str::from_utf8(&bytes[10..data_start])
        .map_err(|_| npy_err(path, "header is not ASCII"))?;
    let header = parse_header(header).map_err(|reason| npy_err(path, reason))?;
    if header.fortran_order {
        return Err(npy_err(path, "fortran_order arrays are not supported"));
    }
    let dtype = match header.descr.as_str() {
        "<f4" => Dtype::F32,
        "<f8" => Dtype::F64,
        other => {
            return Err(npy_err(
                path,
                format!("unsupported dtype '{other}'; expected '<f4' or '<f8'"),
            ))
        }
    };
    let count = header
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| npy_err(path, "shape overflows"))?;
    let payload = &bytes[data_start..];
    if payload.len() != count * dtype.size() {
        return Err(npy_err(
            path,
            format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                count * dtype.size()
            ),
        ));
    }
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(npy_err(
            path,
            format!("non-finite value {} at flat index {pos}", data[pos]),
        ));
    }
    Ok(TensorFile {
        dtype,
        shape: header.shape,
        data,
    })
}

pub fn encode_npy(tensor: &TensorFile) -> Vec<u8> {
    let shape = match tensor.shape.as_slice() {
        [] => "()".to_string(),
        [d] => format!("({d},)"),
        dims => format!(
            "({})",
            dims.iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut header = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {shape}, }}",
        tensor.dtype.descr()
    );
    let unpadded = 10 + header.len() + 1;
    let padded = unpadded.div_ceil(HEADER_ALIGN) * HEADER_ALIGN;
    header.extend(std::iter::repeat_n(' ', padded - unpadded));
    header.push('\n');

    let mut out = Vec::with_capacity(padded + tensor.len() * tensor.dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    match tensor.dtype {
        Dtype::F32 => {
            for &v in &tensor.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in &tensor.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

#[derive(Debug, PartialEq)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<usize>,
}

/// Parses the Python dict literal of an NPY header.
fn parse_header(text: &str) -> std::result::Result<Header, String> {
    let body = text
        .trim()
        .strip_prefix('{')
        .and_then(|t| t.strip_suffix('}'))
        .ok_or("header is not a dict literal")?;
    let mut descr = None;
    let mut fortran_order = None;
    let mut shape = None;
    let mut rest = body.trim();
    while !rest.is_empty() {
        let (key, after) = take_quoted(rest)?;
        let after = after
            .trim_start()
            .strip_prefix(':')
            .ok_or_else(|| format!("expected ':' after key '{key}'"))?
            .trim_start();
        let (value_end, consumed) = match after.chars().next() {
            Some('(') => {
                let close = after.find(')').ok_or("unterminated shape tuple")?;
                (close + 1, close + 1)
            }
            Some('\'') | Some('"') => {
                let (_, tail) = take_quoted(after)?;
                let n = after.len() - tail.len();
                (n, n)
            }
            _ => {
                let n = after.find(',').unwrap_or(after.len());
                (n, n)
            }
        };
        let value = after[..value_end].trim();
        match key.as_str() {
            "descr" => descr = Some(take_quoted(value)?.0),
            "fortran_order" => {
                fortran_order = Some(match value {
                    "True" => true,
                    "False" => false,
                    other => return Err(format!("fortran_order must be True/False, got {other}")),
                })
            }
            "shape" => shape = Some(parse_shape(value)?),
            other => return Err(format!("unexpected header key '{other}'")),
        }
        rest = after[consumed..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(Header {
        descr: descr.ok_or("missing 'descr'")?,
        fortran_order: fortran_order.ok_or("missing 'fortran_order'")?,
        shape: shape.ok_or("missing 'shape'")?,
    })
}

fn take_quoted(s: &str) -> std::result::Result<(String, &str), String> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"');
    let quote = quote.ok_or_else(|| format!("expected a quoted string at '{s}'"))?;
    let inner = &s[1..];
    let end = inner
        .find(quote)
        .ok_or_else(|| "unterminated string".to_string())?;
    Ok((inner[..end].to_string(), &inner[end + 1..]))
}

fn parse_shape(value: &str) -> std::result::Result<Vec<usize>, String> {
    let inner = value
        .strip_prefix('(')
        .and_then(|v| v.strip_suffix(')'))
        .ok_or_else(|| format!("shape must be a tuple, got {value}"))?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|d| !d.is_empty())
        .map(|d| {
            d.parse::<usize>()
                .map_err(|_| format!("bad dimension '{d}'"))
        })
        .collect()
}

/// Zeroes values whose magnitude falls in `[lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    lower: f64,
    upper: f64,
}

impl MaskSpec {
    /// `upper` may be infinite; `lower` must be finite.
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if !(lower >= 0.0 && lower.is_finite() && upper > lower) {
            return Err(Error::InvalidMask { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn contains(&self, v: f64) -> bool {
        let a = v.abs();
        self.lower <= a && a < self.upper
    }
}

/// Returns the masked tensor and the fraction of entries zeroed.
pub fn mask_range(tensor: &TensorFile, spec: &MaskSpec) -> (TensorFile, f64) {
    let mut zeroed = 0usize;
    let data = tensor
        .data
        .iter()
        .map(|&v| {
            if spec.contains(v) {
                zeroed += 1;
                0.0
            } else {
                v
            }
        })
        .collect();
    let fraction = if tensor.is_empty() {
        0.0
    } else {
        zeroed as f64 / tensor.len() as f64
    };
    (
        TensorFile {
            dtype: tensor.dtype,
            shape: tensor.shape.clone(),
            data,
        },
        fraction,
    )
}

/// Quantization outcome for an ingested tensor, in study CSV shapes.
#[derive(Debug, Clone)]
pub struct TensorReport {
    pub quantization: TensorQuantization,
    /// `sigma` is the tensor's population standard deviation.
    pub row: SweepRow,
    pub histogram: Vec<HistogramRow>,
}

/// Region label used in histogram rows for ingested tensors.
pub const TENSOR_REGION: &str = "T";

fn population_variance(data: &[f64]) -> f64 {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn report_tensor_error(
    tensor: &TensorFile,
    block_size: usize,
    strategy: &ScaleStrategy,
) -> Result<TensorReport> {
    report_against(&tensor.data, &tensor.data, block_size, strategy)
}

fn report_against(
    input: &[f64],
    reference: &[f64],
    block_size: usize,
    strategy: &ScaleStrategy,
) -> Result<TensorReport> {
    let quantization = quantize_tensor_against(input, reference, block_size, strategy)?;
    let variance = population_variance(reference);
    let sigma = variance.sqrt();
    let row = SweepRow::from_quantization(sigma, variance, block_size, strategy, &quantization);
    let histogram = histogram_rows(
        TENSOR_REGION,
        sigma,
        block_size,
        strategy.kind,
        &quantization,
    );
    Ok(TensorReport {
        quantization,
        row,
        histogram,
    })
}

/// One cell of the masking ablation: error of the quantized masked tensor
/// measured against the unmasked original.
#[derive(Debug, Clone)]
pub struct MaskRow {
    pub lower: f64,
    pub upper: f64,
    pub masked_fraction: f64,
    pub row: SweepRow,
}

impl fmt::Display for MaskRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{}",
            self.lower, self.upper, self.masked_fraction, self.row
        )
    }
}

pub const MASK_HEADER_PREFIX: &str = "lower,upper,masked_fraction";

/// Evaluates every `lower < upper` pair drawn from `thresholds`.
pub fn mask_ablation(
    tensor: &TensorFile,
    thresholds: &[f64],
    block_size: usize,
    strategy: &ScaleStrategy,
) -> Result<Vec<MaskRow>> {
    let mut rows = Vec::new();
    for (i, &lower) in thresholds.iter().enumerate() {
        for &upper in &thresholds[i + 1..] {
            let spec = MaskSpec::new(lower, upper)?;
            let (masked, masked_fraction) = mask_range(tensor, &spec);
            let report = report_against(&masked.data, &tensor.data, block_size, strategy)?;
            rows.push(MaskRow {
                lower,
                upper,
                masked_fraction,
                row: report.row,
            });
        }
    }
    Ok(rows)
}

pub fn mask_csv(config_line: &str, rows: &[MaskRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{config_line}");
    let _ = writeln!(out, "{MASK_HEADER_PREFIX},{SWEEP_HEADER}");
    for row in rows {
        let _ = writeln!(out, "{row}");
    }
    out
}

/// Inclusive arithmetic grid `start, start+step, ..., <= stop`.
pub fn threshold_grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && start.is_finite() && stop.is_finite() && stop >= start) {
        return Err(Error::Config(format!(
            "invalid threshold grid {start}:{stop}:{step}"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|k| start + k as f64 * step).collect())
}

/// Output path helper: `<dir>/<name>`.
pub fn output_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
