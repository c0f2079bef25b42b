//! Layer quantizer: two-level (BF16 -> FP8 -> INT4) quantization with
//! Hessian-guided error compensation, plus the RTN and INT4-only baselines.
//!
//! Columns are processed left to right in (optionally reordered) order, all
//! rows at once. At the first column of each group the group's current,
//! already-compensated weights are snapped to the FP8 grid and its INT4
//! parameters are fixed. Each weight then goes through
//!
//! ```text
//! w8   = nearest_fp8(w16 / s_w)
//! q    = clamp(round(w8 / s_g + z_g), 0, 15)
//! w8^  = (q - z_g) * s_g
//! w16^ = bf16(w8^ * s_w)
//! ```
//!
//! and the error `(w16 - w16^) / U[q,q]` is pushed onto the remaining columns
//! through row `q` of `U`, the upper Cholesky factor of the dampened inverse
//! Hessian. Updates inside a block of `block_size` columns are applied
//! eagerly; the rest of the matrix is updated once per block.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calib::{HessianState, DEFAULT_DAMP};
use crate::error::{check_finite, DpqError, Result};
use crate::gar::{permutation_for_mode, GarPermutation, GroupRanking, ReorderMode, Segment};
use crate::linalg::{dot, inverse_upper_factor, Matrix};
use crate::numerics::{Fp8Format, Fp8Grid, Fp8Variant};
use crate::quant_params::{
    compute_fp8_scale, dequantize_fp8_to_bf16domain, dequantize_int4_to_fp8domain,
    int4_params_for_range, pack_nibbles, quantize_int4, range_with_zero, Int4GroupParams,
    PackedInt4Tensor, ScaleGranularity,
};

/// Which reconstruction the compensation step targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compensation {
    /// Full two-level error (DPQ).
    #[default]
    Dual,
    /// Error of INT4 quantization alone, ignoring the FP8 snap (naive GPTQ in W4A8).
    Int4Only,
    /// No compensation (round to nearest).
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub group_size: usize,
    pub reorder_mode: ReorderMode,
    pub group_ranking: GroupRanking,
    pub scale_search: bool,
    pub search_grid: usize,
    /// Smallest shrink factor tried by the scale search.
    pub max_shrink: f64,
    pub damp_factor: f64,
    pub fp8_variant: Fp8Variant,
    pub fp8_granularity: ScaleGranularity,
    pub pow2_scales: bool,
    pub compensation: Compensation,
    pub block_size: usize,
    /// Snap the INT4 -> FP8 dequantized value back onto the E4M3 grid.
    pub redequant_round: bool,
    /// Diagnostic: keep FP8 saturation but skip mantissa rounding.
    pub ideal_fp8: bool,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            group_size: 128,
            reorder_mode: ReorderMode::Gar,
            group_ranking: GroupRanking::MaxDiagonal,
            scale_search: true,
            search_grid: 100,
            max_shrink: 0.20,
            damp_factor: DEFAULT_DAMP,
            fp8_variant: Fp8Variant::Extended,
            fp8_granularity: ScaleGranularity::PerTensor,
            pow2_scales: false,
            compensation: Compensation::Dual,
            block_size: 128,
            redequant_round: false,
            ideal_fp8: false,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 1 {
            return Err(DpqError::InvalidArgument("group_size must be >= 1".into()));
        }
        if self.block_size < 1 {
            return Err(DpqError::InvalidArgument("block_size must be >= 1".into()));
        }
        if self.search_grid < 1 {
            return Err(DpqError::InvalidArgument("search_grid must be >= 1".into()));
        }
        if !(self.max_shrink > 0.0 && self.max_shrink <= 1.0) {
            return Err(DpqError::InvalidArgument(format!(
                "max_shrink {} outside (0, 1]",
                self.max_shrink
            )));
        }
        if !(self.damp_factor >= 0.0) || !self.damp_factor.is_finite() {
            return Err(DpqError::InvalidArgument(format!("damp_factor {}", self.damp_factor)));
        }
        Ok(())
    }

    pub fn fp8_format(&self) -> Fp8Format {
        Fp8Format::e4m3(self.fp8_variant)
    }

    pub fn fp8_grid(&self) -> Fp8Grid {
        let fmt = self.fp8_format();
        if self.ideal_fp8 {
            Fp8Grid::Ideal {
                max_magnitude: fmt.max_magnitude,
            }
        } else {
            Fp8Grid::E4M3(fmt)
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// One quantized linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub name: String,
    pub packed: PackedInt4Tensor,
    pub compensation: Compensation,
    pub permutation: GarPermutation,
    /// Per original column parameter slot; only present for `ReorderMode::Full`,
    /// where groups are no longer contiguous in storage order.
    pub column_groups: Option<Vec<usize>>,
    /// `||W X - W^ X||_F^2` on the calibration inputs, i.e. `tr(D H D^T)` with
    /// `D = W - W^`; plain `||W - W^||_F^2` when no Hessian was used.
    pub reconstruction_error: f64,
    /// Grid the INT4 -> FP8 dequantized value is snapped to, if any.
    pub redequant: Option<Fp8Grid>,
    pub config_hash: String,
}

impl QuantizedLayer {
    pub fn rows(&self) -> usize {
        self.packed.rows
    }

    pub fn cols(&self) -> usize {
        self.packed.cols
    }

    pub fn reorder_mode(&self) -> ReorderMode {
        self.permutation.mode
    }

    pub fn group_of(&self, col: usize) -> usize {
        match &self.column_groups {
            Some(map) => map[col],
            None => col / self.packed.group_size,
        }
    }

    /// INT4 -> FP8-domain dequantization of every weight.
    pub fn dequantize_fp8(&self) -> Result<Matrix> {
        let codes = self.packed.codes()?;
        let (rows, cols) = (self.rows(), self.cols());
        let groups: Vec<usize> = (0..cols).map(|c| self.group_of(c)).collect();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let p = self.packed.param(r, groups[c]);
                let mut v = dequantize_int4_to_fp8domain(codes[r * cols + c], p);
                if let Some(grid) = &self.redequant {
                    v = grid.nearest(v);
                }
                out[(r, c)] = v;
            }
        }
        Ok(out)
    }

    /// Full dequantization to the BF16 domain.
    pub fn dequantize(&self) -> Result<Matrix> {
        let mut w8 = self.dequantize_fp8()?;
        for r in 0..w8.rows() {
            let s = self.packed.fp8_scale.for_row(r);
            for v in w8.row_mut(r) {
                *v = dequantize_fp8_to_bf16domain(*v, s);
            }
        }
        Ok(w8)
    }
}

/// Result of a quantization run together with the weights each column held
/// at the moment it was quantized (original column order).
#[derive(Debug, Clone)]
pub struct QuantizationTrace {
    pub layer: QuantizedLayer,
    pub quantized_inputs: Matrix,
}

/// Group parameters minimizing the squared INT4 round-trip error over
/// `search_grid` shrink factors evenly spaced from 1 down to `max_shrink`.
/// Ties keep the larger factor.
pub fn mse_scale_search(group_values: &[f64], search_grid: usize, max_shrink: f64) -> Result<Int4GroupParams> {
    if group_values.is_empty() {
        return Err(DpqError::InvalidArgument("empty quantization group".into()));
    }
    if search_grid < 1 || !(max_shrink > 0.0 && max_shrink <= 1.0) {
        return Err(DpqError::InvalidArgument("invalid scale search grid".into()));
    }
    for &v in group_values {
        check_finite(v, "scale search input")?;
    }
    Ok(search_params(group_values, search_grid, max_shrink))
}

fn shrink_factor(i: usize, search_grid: usize, max_shrink: f64) -> f64 {
    if search_grid == 1 {
        1.0
    } else {
        1.0 - (1.0 - max_shrink) * i as f64 / (search_grid - 1) as f64
    }
}

fn search_params(values: &[f64], search_grid: usize, max_shrink: f64) -> Int4GroupParams {
    let (lo, hi) = range_with_zero(values);
    let mut best = int4_params_for_range(lo, hi);
    if search_grid == 1 || lo == hi {
        return best;
    }
    let mut best_err = f64::INFINITY;
    for i in 0..search_grid {
        let p = shrink_factor(i, search_grid, max_shrink);
        let params = int4_params_for_range(p * lo, p * hi);
        let err: f64 = values
            .iter()
            .map(|&w| {
                let d = w - dequantize_int4_to_fp8domain(quantize_int4(w, &params), &params);
                d * d
            })
            .sum();
        if err < best_err {
            best_err = err;
            best = params;
        }
    }
    best
}

fn group_params(values: &[f64], cfg: &QuantizerConfig) -> Int4GroupParams {
    if cfg.scale_search {
        search_params(values, cfg.search_grid, cfg.max_shrink)
    } else {
        let (lo, hi) = range_with_zero(values);
        int4_params_for_range(lo, hi)
    }
}

/// Two-level quantization with full (FP8 + INT4) error compensation.
pub fn dpq_quantize_layer(w: &Matrix, hess: &HessianState, cfg: &QuantizerConfig) -> Result<QuantizedLayer> {
    Ok(quantize_with_trace(w, Some(hess), cfg)?.layer)
}

/// Plain round-to-nearest through the same two-level value path. No Hessian,
/// no reordering.
pub fn rtn_quantize_layer(w: &Matrix, cfg: &QuantizerConfig) -> Result<QuantizedLayer> {
    let cfg = QuantizerConfig {
        compensation: Compensation::None,
        reorder_mode: ReorderMode::None,
        ..cfg.clone()
    };
    Ok(quantize_with_trace(w, None, &cfg)?.layer)
}

/// GPTQ run naively in the W4A8 setting: only the INT4 error is compensated.
pub fn gptq_int4only_quantize_layer(
    w: &Matrix,
    hess: &HessianState,
    cfg: &QuantizerConfig,
) -> Result<QuantizedLayer> {
    let cfg = QuantizerConfig {
        compensation: Compensation::Int4Only,
        ..cfg.clone()
    };
    Ok(quantize_with_trace(w, Some(hess), &cfg)?.layer)
}

/// Applies one column's compensation: every remaining column `v` of
/// `residual` (one row per column, one entry per output row) receives
/// `-err * factor_row[v]`.
pub fn compensation_update(residual: &mut Matrix, err: &[f64], factor_row: &[f64]) -> Result<()> {
    if residual.cols() != err.len() {
        return Err(DpqError::shape("compensation error vector", residual.cols(), err.len()));
    }
    if residual.rows() != factor_row.len() {
        return Err(DpqError::shape("compensation factor row", residual.rows(), factor_row.len()));
    }
    for (v, &f) in factor_row.iter().enumerate() {
        axpy(residual.row_mut(v), -f, err);
    }
    Ok(())
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if a == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Runs the quantizer described by `cfg`. `hess` must be finalized when the
/// compensation mode needs it or reordering is requested.
pub fn quantize_with_trace(
    w: &Matrix,
    hess: Option<&HessianState>,
    cfg: &QuantizerConfig,
) -> Result<QuantizationTrace> {
    cfg.validate()?;
    let (d_out, d_in) = w.shape();
    if d_in == 0 || d_out == 0 {
        return Err(DpqError::InvalidArgument("empty weight matrix".into()));
    }
    for &v in w.as_slice() {
        check_finite(v, "weights")?;
    }
    if let Some(h) = hess {
        if h.dim() != d_in {
            return Err(DpqError::shape("hessian dimension vs weight columns", d_in, h.dim()));
        }
        if !h.is_finalized() {
            return Err(DpqError::NotFinalized);
        }
    } else if cfg.compensation != Compensation::None {
        return Err(DpqError::InvalidArgument("error compensation requires a hessian".into()));
    }

    let grid = cfg.fp8_grid();
    let fmt = cfg.fp8_format();
    let redequant = cfg.redequant_round.then_some(grid);

    let perm = match hess {
        Some(h) if cfg.reorder_mode != ReorderMode::None => permutation_for_mode(
            cfg.reorder_mode,
            &h.matrix().diagonal(),
            cfg.group_size,
            cfg.group_ranking,
        )?,
        _ => GarPermutation::identity(d_in, cfg.group_size),
    };

    let compensate = cfg.compensation != Compensation::None;
    let (factor, dead) = match hess {
        Some(h) if compensate => {
            let factor = if perm.is_identity() {
                h.inv_factor().expect("finalized").clone()
            } else {
                inverse_upper_factor(&h.damped().expect("finalized").permute_symmetric(&perm.order))?
            };
            let dead = perm.permute(h.dead_features().expect("finalized"))?;
            (Some(factor), dead)
        }
        _ => (None, vec![false; d_in]),
    };

    let fp8_scale = compute_fp8_scale(w, &fmt, cfg.fp8_granularity, cfg.pow2_scales)?.storable();
    let row_scale: Vec<f64> = (0..d_out).map(|r| fp8_scale.for_row(r)).collect();

    // Work in column-major permuted layout: row j of `work` is permuted column j.
    let mut work = Matrix::from_fn(d_in, d_out, |j, r| w[(r, perm.order[j])]);
    let mut taken = Matrix::zeros(d_in, d_out);
    let mut dequant = Matrix::zeros(d_in, d_out);
    let mut codes = vec![0u8; d_in * d_out];

    let segments = perm.segments();
    let groups_per_row = d_in.div_ceil(cfg.group_size);
    let mut params = vec![Int4GroupParams::new(1.0, 0); d_out * groups_per_row];
    let mut segment_at: Vec<Option<&Segment>> = vec![None; d_in];
    for seg in &segments {
        segment_at[seg.start] = Some(seg);
    }
    let mut active: Vec<Int4GroupParams> = vec![Int4GroupParams::new(1.0, 0); d_out];

    let block = cfg.block_size;
    let mut b0 = 0;
    while b0 < d_in {
        let b1 = (b0 + block).min(d_in);
        let mut errs = Matrix::zeros(b1 - b0, d_out);

        for j in b0..b1 {
            if let Some(seg) = segment_at[j] {
                let seg_end = seg.start + seg.len;
                let mut values = vec![0.0; seg.len];
                for r in 0..d_out {
                    for (k, c) in (seg.start..seg_end).enumerate() {
                        let mut v = work[(c, r)];
                        if c >= b1 {
                            // lazy updates from this block have not reached column c yet
                            if let Some(u) = &factor {
                                for i in b0..j {
                                    v -= errs[(i - b0, r)] * u[(i, c)];
                                }
                            }
                        }
                        values[k] = grid.nearest(v / row_scale[r]);
                    }
                    let p = group_params(&values, cfg)
                        .storable()
                        .at(r, seg.stored_group);
                    active[r] = p;
                    params[r * groups_per_row + seg.stored_group] = p;
                }
            }

            let pivot = factor.as_ref().map(|u| u[(j, j)]);
            let mut err = vec![0.0; d_out];
            for r in 0..d_out {
                let s = row_scale[r];
                let p = &active[r];
                let w16 = work[(j, r)];
                let w8 = grid.nearest(w16 / s);
                let q = quantize_int4(w8, p);
                let w8_hat = snap(dequantize_int4_to_fp8domain(q, p), redequant);
                let w16_hat = dequantize_fp8_to_bf16domain(w8_hat, s);
                taken[(j, r)] = w16;
                dequant[(j, r)] = w16_hat;
                codes[j * d_out + r] = q;

                let target = match cfg.compensation {
                    Compensation::None => continue,
                    Compensation::Dual => w16_hat,
                    Compensation::Int4Only => {
                        let q_direct = quantize_int4(w16 / s, p);
                        let w8_direct = snap(dequantize_int4_to_fp8domain(q_direct, p), redequant);
                        dequantize_fp8_to_bf16domain(w8_direct, s)
                    }
                };
                if !dead[j] {
                    err[r] = (w16 - target) / pivot.expect("factor present when compensating");
                }
            }

            if let Some(u) = &factor {
                for v in j + 1..b1 {
                    axpy(work.row_mut(v), -u[(j, v)], &err);
                }
            }
            errs.row_mut(j - b0).copy_from_slice(&err);
        }

        if let Some(u) = &factor {
            if b1 < d_in {
                let tail = &mut work.as_mut_slice()[b1 * d_out..];
                tail.par_chunks_mut(d_out).enumerate().for_each(|(off, col)| {
                    let v = b1 + off;
                    for i in b0..b1 {
                        axpy(col, -u[(i, v)], errs.row(i - b0));
                    }
                });
            }
        }
        b0 = b1;
    }

    // Back to original column order, row-major.
    let mut stored_codes = vec![0u8; d_out * d_in];
    let mut w_hat = Matrix::zeros(d_out, d_in);
    let mut quantized_inputs = Matrix::zeros(d_out, d_in);
    for j in 0..d_in {
        let c = perm.order[j];
        for r in 0..d_out {
            stored_codes[r * d_in + c] = codes[j * d_out + r];
            w_hat[(r, c)] = dequant[(j, r)];
            quantized_inputs[(r, c)] = taken[(j, r)];
        }
    }

    let reconstruction_error = objective(w, &w_hat, hess.map(HessianState::matrix))?;
    let packed = PackedInt4Tensor {
        rows: d_out,
        cols: d_in,
        group_size: cfg.group_size,
        data: pack_nibbles(&stored_codes, d_out, d_in)?,
        params,
        fp8_scale,
    };
    let column_groups = (perm.mode == ReorderMode::Full).then(|| perm.column_groups());
    Ok(QuantizationTrace {
        layer: QuantizedLayer {
            name: String::new(),
            packed,
            compensation: cfg.compensation,
            permutation: perm,
            column_groups,
            reconstruction_error,
            redequant,
            config_hash: cfg.config_hash(),
        },
        quantized_inputs,
    })
}

#[inline]
fn snap(v: f64, grid: Option<Fp8Grid>) -> f64 {
    match grid {
        Some(g) => g.nearest(v),
        None => v,
    }
}

/// `||(W - W^) X||_F^2 = sum_r d_r H d_r^T`, or `||W - W^||_F^2` without `H`.
pub fn objective(w: &Matrix, w_hat: &Matrix, h: Option<&Matrix>) -> Result<f64> {
    let delta = w.sub(w_hat)?;
    match h {
        None => Ok(delta.frobenius_norm_sq()),
        Some(h) => {
            let dh = delta.matmul(h)?;
            Ok((0..delta.rows()).map(|r| dot(delta.row(r), dh.row(r))).sum::<f64>().max(0.0))
        }
    }
}
