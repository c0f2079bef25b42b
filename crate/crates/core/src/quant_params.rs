//! Scale and zero-point computation for the two quantization levels, the
//! elementwise quantize/dequantize kernels, and INT4 nibble packing.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, DpqError, Result};
use crate::linalg::Matrix;
use crate::numerics::{bf16_nearest, Fp8Format};

/// Largest unsigned INT4 code.
pub const Q_MAX: u8 = 15;

/// Per-(row, group) parameters of the FP8 to INT4 step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Int4GroupParams {
    pub scale: f64,
    pub zero_point: u8,
    pub group_index: usize,
    pub row_index: usize,
}

impl Int4GroupParams {
    pub fn new(scale: f64, zero_point: u8) -> Self {
        Int4GroupParams {
            scale,
            zero_point,
            group_index: 0,
            row_index: 0,
        }
    }

    pub fn at(mut self, row_index: usize, group_index: usize) -> Self {
        self.row_index = row_index;
        self.group_index = group_index;
        self
    }

    /// Scale snapped to `f32`, the precision it is stored with on disk.
    pub fn storable(mut self) -> Self {
        self.scale = self.scale as f32 as f64;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleGranularity {
    PerTensor,
    /// One scale per output channel (matrix row).
    PerChannel,
}

/// Symmetric FP8 scale, either a single value or one per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fp8TensorScale {
    pub scales: Vec<f64>,
    pub granularity: ScaleGranularity,
    pub pow2_rounded: bool,
}

impl Fp8TensorScale {
    pub fn per_tensor(scale: f64) -> Self {
        Fp8TensorScale {
            scales: vec![scale],
            granularity: ScaleGranularity::PerTensor,
            pow2_rounded: false,
        }
    }

    pub fn for_row(&self, row: usize) -> f64 {
        match self.granularity {
            ScaleGranularity::PerTensor => self.scales[0],
            ScaleGranularity::PerChannel => self.scales[row],
        }
    }

    /// The single scale of a per-tensor scale.
    pub fn scale(&self) -> f64 {
        self.scales[0]
    }

    pub fn storable(mut self) -> Self {
        for s in &mut self.scales {
            *s = *s as f32 as f64;
        }
        self
    }
}

/// Smallest power of two that is `>= x` (x > 0, finite).
pub fn pow2_ceil(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mantissa = bits & ((1u64 << 52) - 1);
    let exp_field = (bits >> 52) & 0x7ff;
    if exp_field == 0 {
        // subnormal input: walk up from the smallest normal power
        let mut p = f64::MIN_POSITIVE;
        while p / 2.0 >= x {
            p /= 2.0;
        }
        return p;
    }
    if mantissa == 0 {
        x
    } else {
        f64::from_bits((exp_field + 1) << 52)
    }
}

fn fp8_scale_from_max(max_abs: f64, fmt: &Fp8Format, pow2: bool) -> f64 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let s = max_abs / fmt.max_magnitude;
    if pow2 {
        pow2_ceil(s)
    } else {
        s
    }
}

/// `max|values| / Z_max`, per tensor or per row, optionally rounded up to a
/// power of two. All-zero tensors (or rows) get scale 1.
pub fn compute_fp8_scale(
    values: &Matrix,
    fmt: &Fp8Format,
    granularity: ScaleGranularity,
    pow2: bool,
) -> Result<Fp8TensorScale> {
    if values.as_slice().is_empty() {
        return Err(DpqError::InvalidArgument("fp8 scale of an empty tensor".into()));
    }
    for &v in values.as_slice() {
        check_finite(v, "fp8 scale input")?;
    }
    let scales = match granularity {
        ScaleGranularity::PerTensor => vec![fp8_scale_from_max(values.max_abs(), fmt, pow2)],
        ScaleGranularity::PerChannel => (0..values.rows())
            .map(|r| {
                let m = values.row(r).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                fp8_scale_from_max(m, fmt, pow2)
            })
            .collect(),
    };
    Ok(Fp8TensorScale {
        scales,
        granularity,
        pow2_rounded: pow2,
    })
}

/// Asymmetric INT4 parameters for a `[lo, hi]` range that contains zero.
pub(crate) fn int4_params_for_range(lo: f64, hi: f64) -> Int4GroupParams {
    if hi == lo {
        let zp = (-lo).round_ties_even().clamp(0.0, Q_MAX as f64) as u8;
        return Int4GroupParams::new(1.0, zp);
    }
    let scale = (hi - lo) / Q_MAX as f64;
    let zp = (-lo / scale).round_ties_even().clamp(0.0, Q_MAX as f64) as u8;
    Int4GroupParams::new(scale, zp)
}

pub(crate) fn range_with_zero(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((0.0f64, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Scale `(max - min) / 15` and zero-point `round(-min / scale)` of a group
/// of FP8-domain values. The range is widened to include zero so the
/// zero-point is always a valid INT4 code.
pub fn compute_int4_group_params(group_fp8_values: &[f64]) -> Result<Int4GroupParams> {
    if group_fp8_values.is_empty() {
        return Err(DpqError::InvalidArgument("empty quantization group".into()));
    }
    for &v in group_fp8_values {
        check_finite(v, "int4 group values")?;
    }
    let (lo, hi) = range_with_zero(group_fp8_values);
    Ok(int4_params_for_range(lo, hi))
}

#[inline]
pub fn quantize_int4(w8: f64, p: &Int4GroupParams) -> u8 {
    (w8 / p.scale + p.zero_point as f64)
        .round_ties_even()
        .clamp(0.0, Q_MAX as f64) as u8
}

#[inline]
pub fn dequantize_int4_to_fp8domain(q: u8, p: &Int4GroupParams) -> f64 {
    (q as f64 - p.zero_point as f64) * p.scale
}

/// `w8hat * s`, rounded to BF16. `scale` is the row's FP8 scale.
#[inline]
pub fn dequantize_fp8_to_bf16domain(w8hat: f64, scale: f64) -> f64 {
    bf16_nearest(w8hat * scale)
}

/// Packs a row-major `rows x cols` tensor of 4-bit codes. Even columns go to
/// the low nibble, odd columns to the high nibble; odd-length rows are padded
/// with a zero high nibble.
pub fn pack_nibbles(values: &[u8], rows: usize, cols: usize) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(DpqError::shape("nibble tensor", rows * cols, values.len()));
    }
    let row_bytes = cols.div_ceil(2);
    let mut out = Vec::with_capacity(rows * row_bytes);
    for row in values.chunks(cols.max(1)).take(rows) {
        for pair in row.chunks(2) {
            let lo = pair[0];
            let hi = pair.get(1).copied().unwrap_or(0);
            if lo > Q_MAX {
                return Err(DpqError::NibbleRange(lo as u32));
            }
            if hi > Q_MAX {
                return Err(DpqError::NibbleRange(hi as u32));
            }
            out.push(lo | (hi << 4));
        }
    }
    Ok(out)
}

pub fn unpack_nibbles(bytes: &[u8], rows: usize, cols: usize) -> Result<Vec<u8>> {
    let row_bytes = cols.div_ceil(2);
    if bytes.len() != rows * row_bytes {
        return Err(DpqError::shape("packed nibble bytes", rows * row_bytes, bytes.len()));
    }
    let mut out = Vec::with_capacity(rows * cols);
    for row in bytes.chunks(row_bytes.max(1)).take(rows) {
        for c in 0..cols {
            let b = row[c / 2];
            out.push(if c % 2 == 0 { b & 0x0f } else { b >> 4 });
        }
    }
    Ok(out)
}

/// Row-major nibble-packed INT4 weights with their group parameters.
///
/// `params` is row-major over `(row, group)`; group `g` covers columns
/// `[g * group_size, (g + 1) * group_size)` of the stored column order unless
/// the owning layer carries an explicit column-to-group map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackedInt4Tensor {
    pub rows: usize,
    pub cols: usize,
    pub group_size: usize,
    pub data: Vec<u8>,
    pub params: Vec<Int4GroupParams>,
    pub fp8_scale: Fp8TensorScale,
}

impl PackedInt4Tensor {
    pub fn groups_per_row(&self) -> usize {
        self.cols.div_ceil(self.group_size)
    }

    pub fn codes(&self) -> Result<Vec<u8>> {
        unpack_nibbles(&self.data, self.rows, self.cols)
    }

    pub fn param(&self, row: usize, group: usize) -> &Int4GroupParams {
        &self.params[row * self.groups_per_row() + group]
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(DpqError::InvalidArgument("group_size must be >= 1".into()));
        }
        let expected = self.rows * self.groups_per_row();
        if self.params.len() != expected {
            return Err(DpqError::shape("group parameter count", expected, self.params.len()));
        }
        if self.data.len() != self.rows * self.cols.div_ceil(2) {
            return Err(DpqError::shape(
                "packed data length",
                self.rows * self.cols.div_ceil(2),
                self.data.len(),
            ));
        }
        if self.params.iter().any(|p| !(p.scale > 0.0) || p.zero_point > Q_MAX) {
            return Err(DpqError::InvalidArgument("group parameter out of range".into()));
        }
        Ok(())
    }
}
