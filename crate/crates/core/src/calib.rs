//! Calibration: layer Hessians `X X^T` and static activation scales.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, DpqError, Result};
use crate::linalg::{inverse_upper_factor, Matrix};
use crate::numerics::Fp8Format;
use crate::quant_params::{pow2_ceil, Fp8TensorScale, ScaleGranularity};

pub const DEFAULT_DAMP: f64 = 0.01;

/// Accumulated `X X^T` of one layer's inputs, plus the factorization the
/// quantizer consumes once finalized.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianState {
    dim: usize,
    h: Matrix,
    sample_count: u64,
    damp_factor: f64,
    finalized: Option<Finalized>,
}

#[derive(Debug, Clone, PartialEq)]
struct Finalized {
    damped: Matrix,
    inv_factor: Matrix,
    dead: Vec<bool>,
}

impl HessianState {
    pub fn new(dim: usize) -> Self {
        HessianState {
            dim,
            h: Matrix::zeros(dim, dim),
            sample_count: 0,
            damp_factor: DEFAULT_DAMP,
            finalized: None,
        }
    }

    /// Wraps an already accumulated (symmetric) Hessian.
    pub fn from_matrix(h: Matrix, sample_count: u64) -> Result<Self> {
        if h.rows() != h.cols() {
            return Err(DpqError::shape("hessian", "square", format!("{:?}", h.shape())));
        }
        for &v in h.as_slice() {
            check_finite(v, "hessian entries")?;
        }
        Ok(HessianState {
            dim: h.rows(),
            h,
            sample_count,
            damp_factor: DEFAULT_DAMP,
            finalized: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &Matrix {
        &self.h
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn damp_factor(&self) -> f64 {
        self.damp_factor
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized.is_some()
    }

    /// Dampened Hessian, available after [`finalize_hessian`].
    pub fn damped(&self) -> Option<&Matrix> {
        self.finalized.as_ref().map(|f| &f.damped)
    }

    /// Upper-triangular `U` with `U^T U = H_d^-1`.
    pub fn inv_factor(&self) -> Option<&Matrix> {
        self.finalized.as_ref().map(|f| &f.inv_factor)
    }

    /// Features whose raw diagonal is zero (never activated).
    pub fn dead_features(&self) -> Option<&[bool]> {
        self.finalized.as_ref().map(|f| f.dead.as_slice())
    }

    pub fn merge(mut self, other: &HessianState) -> Result<Self> {
        if other.dim != self.dim {
            return Err(DpqError::shape("hessian merge", self.dim, other.dim));
        }
        for (a, b) in self.h.as_mut_slice().iter_mut().zip(other.h.as_slice()) {
            *a += b;
        }
        self.sample_count += other.sample_count;
        self.finalized = None;
        Ok(self)
    }
}

/// `H += X X^T` where `x` is `d_in x n` (columns are samples).
pub fn accumulate_hessian(mut state: HessianState, x: &Matrix) -> Result<HessianState> {
    if x.rows() != state.dim {
        return Err(DpqError::shape("calibration activations (rows = d_in)", state.dim, x.rows()));
    }
    for &v in x.as_slice() {
        check_finite(v, "calibration activations")?;
    }
    let g = x.gram();
    for (a, b) in state.h.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *a += b;
    }
    state.sample_count += x.cols() as u64;
    state.finalized = None;
    Ok(state)
}

/// `H_d = H + damp * mean(diag H) * I`, then the upper Cholesky factor of
/// `H_d^-1`. Zero-diagonal features get `mean(diag)` on their diagonal first;
/// an all-zero diagonal yields `H_d = I`.
pub fn finalize_hessian(mut state: HessianState, damp_factor: f64) -> Result<HessianState> {
    if !(damp_factor >= 0.0) || !damp_factor.is_finite() {
        return Err(DpqError::InvalidArgument(format!("damp factor {damp_factor}")));
    }
    let n = state.dim;
    let diag = state.h.diagonal();
    let dead: Vec<bool> = diag.iter().map(|&d| d == 0.0).collect();
    let live: Vec<f64> = diag.iter().copied().filter(|&d| d != 0.0).collect();

    let damped = if live.is_empty() {
        Matrix::identity(n)
    } else {
        let mean = live.iter().sum::<f64>() / live.len() as f64;
        let mut d = state.h.clone();
        for i in 0..n {
            if dead[i] {
                d[(i, i)] = mean;
            }
            d[(i, i)] += damp_factor * mean;
        }
        d
    };
    let inv_factor = inverse_upper_factor(&damped)?;
    state.damp_factor = damp_factor;
    state.finalized = Some(Finalized {
        damped,
        inv_factor,
        dead,
    });
    Ok(state)
}

/// Static activation scale `max|X| / Z_max` over every calibration batch.
pub fn calibrate_activation_scale<'a>(
    batches: impl IntoIterator<Item = &'a Matrix>,
    fmt: &Fp8Format,
    pow2: bool,
) -> Result<Fp8TensorScale> {
    let mut running: Option<f64> = None;
    for batch in batches {
        for &v in batch.as_slice() {
            check_finite(v, "activation calibration")?;
        }
        let m = batch.max_abs();
        running = Some(running.map_or(m, |r| r.max(m)));
    }
    let max_abs = running.ok_or_else(|| DpqError::InvalidArgument("empty calibration set".into()))?;
    let mut scale = if max_abs == 0.0 { 1.0 } else { max_abs / fmt.max_magnitude };
    if pow2 {
        scale = pow2_ceil(scale);
    }
    Ok(Fp8TensorScale {
        scales: vec![scale],
        granularity: ScaleGranularity::PerTensor,
        pow2_rounded: pow2,
    })
}

/// Per-layer static activation scales.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationScaleSet {
    pub scales: BTreeMap<String, Fp8TensorScale>,
}
