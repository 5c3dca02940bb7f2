//! C ABI for mxscale.
//!
//! Every fallible function returns an [`MxStatus`]. On failure a message is
//! kept per thread and can be read with [`mx_last_error_message`]. Handles
//! are opaque and must be released with their matching `*_free` function.
//! Output pointers marked nullable may be NULL to skip that output.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mxscale::tensorio::{self, Dtype, MaskSpec, TensorFile};
use mxscale::{Error, FormatSpec, ScaleKind, ScaleStrategy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NonFinite = 3,
    Io = 4,
    MalformedFile = 5,
    Panic = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxFormat {
    E2M1 = 0,
    E4M3 = 1,
    UE5M3 = 2,
    E8M0 = 3,
}

impl MxFormat {
    fn spec(self) -> FormatSpec {
        match self {
            MxFormat::E2M1 => FormatSpec::E2M1,
            MxFormat::E4M3 => FormatSpec::E4M3,
            MxFormat::UE5M3 => FormatSpec::UE5M3,
            MxFormat::E8M0 => FormatSpec::E8M0,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxScaleKind {
    AbsMax = 0,
    PreventZero = 1,
    FourOverSix = 2,
    FourOverSixPreventZero = 3,
    MxPow2 = 4,
    BruteForce = 5,
}

impl MxScaleKind {
    fn kind(self) -> ScaleKind {
        match self {
            MxScaleKind::AbsMax => ScaleKind::AbsMax,
            MxScaleKind::PreventZero => ScaleKind::PreventZero,
            MxScaleKind::FourOverSix => ScaleKind::FourOverSix,
            MxScaleKind::FourOverSixPreventZero => ScaleKind::FourOverSixPreventZero,
            MxScaleKind::MxPow2 => ScaleKind::MxPow2,
            MxScaleKind::BruteForce => ScaleKind::BruteForce,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MxDtype {
    F32 = 0,
    F64 = 1,
}

/// Aggregate error of one quantization call.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MxErrorReport {
    pub total_sse: f64,
    /// `clip_sse + round_sse == total_sse` exactly.
    pub clip_sse: f64,
    pub round_sse: f64,
    pub n: u64,
    /// Counts per E2M1 magnitude 0, 0.5, 1, 1.5, 2, 3, 4, 6.
    pub entry_bin_counts: [u64; 8],
    pub clipped_count: u64,
    pub zero_scale_fraction: f64,
    /// 1.0 unless hierarchical.
    pub tensor_scale: f64,
}

/// Opaque quantization recipe plus block size.
pub struct MxQuantizer {
    strategy: ScaleStrategy,
    block_size: usize,
}

/// Opaque tensor.
pub struct MxTensor {
    inner: TensorFile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: MxStatus, msg: impl Into<String>) -> MxStatus {
    set_error(msg.into());
    status
}

fn status_of(err: &Error) -> MxStatus {
    match err {
        Error::NonFinite(_) => MxStatus::NonFinite,
        Error::Io { .. } => MxStatus::Io,
        Error::Npy { .. } => MxStatus::MalformedFile,
        _ => MxStatus::InvalidArgument,
    }
}

fn from_error(err: Error) -> MxStatus {
    fail(status_of(&err), err.to_string())
}

/// Runs `f`, turning panics into `MxStatus::Panic`.
fn guard(f: impl FnOnce() -> MxStatus) -> MxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(MxStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, MxStatus> {
    if path.is_null() {
        return Err(fail(MxStatus::NullPointer, "path is NULL"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(MxStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// Message for the last failure on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mx_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Rounds `value` to the nearest value of `format` (ties to the even code).
#[no_mangle]
pub unsafe extern "C" fn mx_round_to_format(
    format: MxFormat,
    value: f64,
    code_out: *mut u8,
    value_out: *mut f64,
) -> MxStatus {
    guard(|| match format.spec().round(value) {
        Ok(cv) => {
            if !code_out.is_null() {
                *code_out = cv.code;
            }
            if !value_out.is_null() {
                *value_out = cv.value;
            }
            MxStatus::Ok
        }
        Err(e) => from_error(e),
    })
}

/// Creates a quantizer. `mx_pow2` always uses E8M0 scales.
#[no_mangle]
pub unsafe extern "C" fn mx_quantizer_new(
    kind: MxScaleKind,
    scale_format: MxFormat,
    hierarchical: bool,
    block_size: usize,
    out: *mut *mut MxQuantizer,
) -> MxStatus {
    guard(|| {
        let strategy =
            ScaleStrategy::new(kind.kind(), scale_format.spec()).with_hierarchical(hierarchical);
        make_quantizer(strategy, block_size, out)
    })
}

/// Creates a quantizer from a recipe label such as `ue5m3+4o6+H`.
#[no_mangle]
pub unsafe extern "C" fn mx_quantizer_from_label(
    label: *const c_char,
    block_size: usize,
    out: *mut *mut MxQuantizer,
) -> MxStatus {
    guard(|| {
        let label = match path_arg(label) {
            Ok(l) => l,
            Err(s) => return s,
        };
        match ScaleStrategy::from_label(label) {
            Ok(strategy) => make_quantizer(strategy, block_size, out),
            Err(e) => from_error(e),
        }
    })
}

unsafe fn make_quantizer(
    strategy: ScaleStrategy,
    block_size: usize,
    out: *mut *mut MxQuantizer,
) -> MxStatus {
    if out.is_null() {
        return fail(MxStatus::NullPointer, "out is NULL");
    }
    if block_size == 0 {
        return fail(MxStatus::InvalidArgument, "block size must be at least 1");
    }
    if let Err(e) = strategy.validate() {
        return from_error(e);
    }
    *out = Box::into_raw(Box::new(MxQuantizer {
        strategy,
        block_size,
    }));
    MxStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn mx_quantizer_free(q: *mut MxQuantizer) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// Number of blocks (and scales) produced for `len` values.
#[no_mangle]
pub unsafe extern "C" fn mx_quantizer_num_blocks(q: *const MxQuantizer, len: usize) -> usize {
    if q.is_null() {
        return 0;
    }
    len.div_ceil((*q).block_size)
}

/// Quantizes `len` values in blocks.
///
/// Nullable outputs: `element_codes_out` (len E2M1 codes), `scales_out`
/// (one decoded scale per block), `dequantized_out` (len values),
/// `report_out`.
#[no_mangle]
pub unsafe extern "C" fn mx_quantize(
    q: *const MxQuantizer,
    data: *const f64,
    len: usize,
    element_codes_out: *mut u8,
    scales_out: *mut f64,
    dequantized_out: *mut f64,
    report_out: *mut MxErrorReport,
) -> MxStatus {
    guard(|| {
        if q.is_null() || data.is_null() {
            return fail(MxStatus::NullPointer, "quantizer or data is NULL");
        }
        let q = &*q;
        let values = slice::from_raw_parts(data, len);
        let tq = match mxscale::quantize_tensor(values, q.block_size, &q.strategy) {
            Ok(tq) => tq,
            Err(e) => return from_error(e),
        };
        if !element_codes_out.is_null() {
            let out = slice::from_raw_parts_mut(element_codes_out, len);
            let codes = tq.blocks.iter().flat_map(|b| b.element_codes.iter());
            for (o, c) in out.iter_mut().zip(codes) {
                *o = c.code;
            }
        }
        if !scales_out.is_null() {
            let out = slice::from_raw_parts_mut(scales_out, tq.blocks.len());
            for (o, b) in out.iter_mut().zip(&tq.blocks) {
                *o = b.scale.value();
            }
        }
        if !dequantized_out.is_null() {
            let out = slice::from_raw_parts_mut(dequantized_out, len);
            out.copy_from_slice(&tq.dequantize());
        }
        if !report_out.is_null() {
            let r = &tq.report;
            *report_out = MxErrorReport {
                total_sse: r.total_sse,
                clip_sse: r.clip_sse,
                round_sse: r.round_sse,
                n: r.n,
                entry_bin_counts: r.entry_bin_counts,
                clipped_count: r.clipped_count,
                zero_scale_fraction: tq.zero_scale_fraction(),
                tensor_scale: tq.tensor_scale,
            };
        }
        MxStatus::Ok
    })
}

unsafe fn put_tensor(inner: TensorFile, out: *mut *mut MxTensor) {
    *out = Box::into_raw(Box::new(MxTensor { inner }));
}

/// Loads an NPY file (`<f4` or `<f8`, C order).
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_load(path: *const c_char, out: *mut *mut MxTensor) -> MxStatus {
    guard(|| {
        if out.is_null() {
            return fail(MxStatus::NullPointer, "out is NULL");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match tensorio::load_tensor(path) {
            Ok(t) => {
                put_tensor(t, out);
                MxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Copies `len` values into a new tensor of the given shape.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_from_data(
    data: *const f64,
    len: usize,
    shape: *const usize,
    ndim: usize,
    dtype: MxDtype,
    out: *mut *mut MxTensor,
) -> MxStatus {
    guard(|| {
        if out.is_null() || (data.is_null() && len > 0) || (shape.is_null() && ndim > 0) {
            return fail(MxStatus::NullPointer, "data, shape or out is NULL");
        }
        let values = if len == 0 {
            Vec::new()
        } else {
            slice::from_raw_parts(data, len).to_vec()
        };
        let dims = if ndim == 0 {
            Vec::new()
        } else {
            slice::from_raw_parts(shape, ndim).to_vec()
        };
        let dtype = match dtype {
            MxDtype::F32 => Dtype::F32,
            MxDtype::F64 => Dtype::F64,
        };
        match TensorFile::new(dtype, dims, values) {
            Ok(t) => {
                put_tensor(t, out);
                MxStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mx_tensor_save(t: *const MxTensor, path: *const c_char) -> MxStatus {
    guard(|| {
        if t.is_null() {
            return fail(MxStatus::NullPointer, "tensor is NULL");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match tensorio::save_tensor(path, &(*t).inner) {
            Ok(()) => MxStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn mx_tensor_len(t: *const MxTensor) -> usize {
    if t.is_null() {
        0
    } else {
        (*t).inner.len()
    }
}

/// Row-major values, valid while the tensor lives.
#[no_mangle]
pub unsafe extern "C" fn mx_tensor_data(t: *const MxTensor) -> *const f64 {
    if t.is_null() {
        ptr::null()
    } else {
        (*t).inner.data.as_ptr()
    }
}

#[no_mangle]
pub unsafe extern "C" fn mx_tensor_ndim(t: *const MxTensor) -> usize {
    if t.is_null() {
        0
    } else {
        (*t).inner.shape.len()
    }
}

#[no_mangle]
pub unsafe extern "C" fn mx_tensor_shape(t: *const MxTensor) -> *const usize {
    if t.is_null() {
        ptr::null()
    } else {
        (*t).inner.shape.as_ptr()
    }
}

#[no_mangle]
pub unsafe extern "C" fn mx_tensor_free(t: *mut MxTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Zeroes magnitudes in `[lower, upper)` into a new tensor. `upper` may be
/// `INFINITY`.
#[no_mangle]
pub unsafe extern "C" fn mx_mask_range(
    t: *const MxTensor,
    lower: f64,
    upper: f64,
    out: *mut *mut MxTensor,
    masked_fraction_out: *mut f64,
) -> MxStatus {
    guard(|| {
        if t.is_null() || out.is_null() {
            return fail(MxStatus::NullPointer, "tensor or out is NULL");
        }
        let spec = match MaskSpec::new(lower, upper) {
            Ok(s) => s,
            Err(e) => return from_error(e),
        };
        let (masked, fraction) = tensorio::mask_range(&(*t).inner, &spec);
        put_tensor(masked, out);
        if !masked_fraction_out.is_null() {
            *masked_fraction_out = fraction;
        }
        MxStatus::Ok
    })
}
