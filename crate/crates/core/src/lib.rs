//! Dual precision post-training quantization: weights stored as INT4 with
//! per-group scale/zero-point, computed in FP8 (E4M3) at inference time.
//!
//! The layer quantizer compensates the error of both quantization levels
//! using the calibration Hessian, optionally with Group-Aware Reordering so
//! that group parameters stay aligned with the stored column order.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![cfg_attr(test, allow(clippy::approx_constant))]

pub mod calib;
pub mod cli_io;
pub mod dpq;
pub mod error;
pub mod gar;
pub mod linalg;
pub mod numerics;
pub mod quant_params;
pub mod simeval;
pub mod synth;

pub use calib::{accumulate_hessian, calibrate_activation_scale, finalize_hessian, HessianState};
pub use dpq::{
    dpq_quantize_layer, gptq_int4only_quantize_layer, rtn_quantize_layer, Compensation,
    QuantizedLayer, QuantizerConfig,
};
pub use error::{DpqError, Result};
pub use gar::{GarPermutation, ReorderMode};
pub use linalg::Matrix;
pub use numerics::{round_to_bf16, round_to_fp8, Fp8Format, Fp8Grid, Fp8Variant};
