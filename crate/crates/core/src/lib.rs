//! FP4 microscaling quantization.
//!
//! Emulated minifloat formats ([`formats`]), block scale-selection recipes
//! ([`scaling`]), block quantization with clipping/rounding error accounting
//! ([`quantizer`]), a seeded Gaussian block-size study ([`study`]) and NPY
//! tensor ingestion with a magnitude-masking ablation ([`tensorio`]).

pub mod accum;
pub mod cli;
pub mod error;
pub mod formats;
pub mod quantizer;
pub mod scaling;
pub mod study;
pub mod tensorio;

pub use error::{Error, Result};
pub use formats::{encode_element_fp4, round_to_format, CodeValue, FormatSpec, SpecialPolicy};
pub use quantizer::{
    dequantize_block, error_report, quantize_block, quantize_tensor, ErrorReport, QuantizedBlock,
    TensorQuantization,
};
pub use scaling::{ScaleKind, ScaleResult, ScaleStrategy};
