//! Independent reference implementations used by the integration tests.
//! Nothing here calls the rounding or quantization code under test.

#![allow(dead_code)]

use dpq::linalg::Matrix;
use dpq::numerics::Fp8Variant;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Positive finite E4M3 values decoded from bit patterns, with the code of
/// each (for ties-to-even).
pub fn fp8_positive_codes(variant: Fp8Variant) -> Vec<(f64, u8)> {
    let mut out = Vec::new();
    for code in 1u8..0x80 {
        let e = (code >> 3) & 0xF;
        let m = code & 0x7;
        let reserved = match variant {
            Fp8Variant::IeeeReserved => e == 0xF,
            Fp8Variant::Extended => e == 0xF && m == 0x7,
        };
        if reserved {
            continue;
        }
        let v = if e == 0 {
            m as f64 * 2f64.powi(-9)
        } else {
            (1.0 + m as f64 / 8.0) * 2f64.powi(e as i32 - 7)
        };
        out.push((v, code));
    }
    out
}

pub fn fp8_values(variant: Fp8Variant) -> Vec<f64> {
    let pos: Vec<f64> = fp8_positive_codes(variant).into_iter().map(|(v, _)| v).collect();
    let mut all: Vec<f64> = pos.iter().map(|v| -v).collect();
    all.push(0.0);
    all.extend(pos);
    all.sort_by(f64::total_cmp);
    all
}

/// Brute-force nearest E4M3 value: ties go to the even code, magnitudes above
/// the maximum saturate.
pub fn oracle_fp8(x: f64, variant: Fp8Variant) -> f64 {
    let codes = fp8_positive_codes(variant);
    let max = codes.iter().map(|c| c.0).fold(0.0, f64::max);
    let a = x.abs();
    let mag = if a >= max {
        max
    } else {
        let mut best = (0.0f64, 0u8);
        let mut best_d = a;
        for &(v, code) in &codes {
            let d = (a - v).abs();
            if d < best_d || (d == best_d && code % 2 == 0 && best.1 % 2 == 1) {
                best = (v, code);
                best_d = d;
            }
        }
        best.0
    };
    if x < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Nearest E4M3 value on a grid with unlimited mantissa: clamp only.
pub fn oracle_ideal(x: f64, variant: Fp8Variant) -> f64 {
    let max = match variant {
        Fp8Variant::IeeeReserved => 240.0,
        Fp8Variant::Extended => 448.0,
    };
    x.clamp(-max, max)
}

fn bf16_from_bits(bits: u16) -> f64 {
    f32::from_bits((bits as u32) << 16) as f64
}

/// Nearest BF16 value by bracketing among the decoded bit patterns.
pub fn oracle_bf16(x: f64) -> f64 {
    let a = x.abs();
    let max_bits = 0x7F7Fu16;
    let max = bf16_from_bits(max_bits);
    let mag = if a >= max {
        max
    } else {
        // largest pattern with value <= a
        let (mut lo, mut hi) = (0u16, max_bits);
        while lo < hi {
            let mid = lo + (hi - lo).div_ceil(2);
            if bf16_from_bits(mid) <= a {
                lo = mid;
            } else {
                hi = mid - 1;
            }
        }
        let below = bf16_from_bits(lo);
        let above = bf16_from_bits(lo + 1);
        let (db, da) = (a - below, above - a);
        if db < da || (db == da && lo % 2 == 0) {
            below
        } else {
            above
        }
    };
    if x < 0.0 {
        -mag
    } else {
        mag
    }
}

/// Unrounded asymmetric min/max parameters on a zero-inclusive range.
pub fn oracle_params_for_range(lo: f64, hi: f64) -> (f64, u8) {
    if hi == lo {
        return (1.0, (-lo).round_ties_even().clamp(0.0, 15.0) as u8);
    }
    let scale = (hi - lo) / 15.0;
    (scale, (-lo / scale).round_ties_even().clamp(0.0, 15.0) as u8)
}

fn q4(v: f64, scale: f64, zp: u8) -> u8 {
    (v / scale + zp as f64).round_ties_even().clamp(0.0, 15.0) as u8
}

/// Group parameters (scale rounded to f32 for storage).
pub fn oracle_group_params(values: &[f64], search: Option<(usize, f64)>) -> (f64, u8) {
    let lo = values.iter().fold(0.0f64, |m, &v| m.min(v));
    let hi = values.iter().fold(0.0f64, |m, &v| m.max(v));
    let mut best = oracle_params_for_range(lo, hi);
    if let Some((grid, floor)) = search {
        if grid > 1 && lo != hi {
            let mut best_err = f64::INFINITY;
            for i in 0..grid {
                let p = 1.0 - (1.0 - floor) * i as f64 / (grid - 1) as f64;
                let (s, z) = oracle_params_for_range(p * lo, p * hi);
                let err: f64 = values
                    .iter()
                    .map(|&v| {
                        let d = v - (q4(v, s, z) as f64 - z as f64) * s;
                        d * d
                    })
                    .sum();
                if err < best_err {
                    best_err = err;
                    best = (s, z);
                }
            }
        }
    }
    (best.0 as f32 as f64, best.1)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleCfg {
    pub variant: Fp8Variant,
    pub ideal: bool,
    pub group_size: usize,
    pub search: Option<(usize, f64)>,
    /// Target of the compensated error: true = through the FP8 snap (DPQ),
    /// false = INT4-only.
    pub dual: bool,
}

impl OracleCfg {
    pub fn fp8(&self, x: f64) -> f64 {
        if self.ideal {
            oracle_ideal(x, self.variant)
        } else {
            oracle_fp8(x, self.variant)
        }
    }

    pub fn max(&self) -> f64 {
        oracle_ideal(f64::INFINITY, self.variant)
    }

    pub fn weight_scale(&self, w: &Matrix) -> f64 {
        let m = w.as_slice().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if m == 0.0 {
            1.0
        } else {
            (m / self.max()) as f32 as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub w_hat: Matrix,
    pub codes: Vec<u8>,
    /// `(scale, zero_point)` per `(row, group)`, row-major.
    pub params: Vec<(f64, u8)>,
    /// Weight values at the moment each was quantized.
    pub inputs: Matrix,
}

/// Row-by-row straight-line quantizer. `h_inv_per_step[q]` is the explicit
/// inverse of the damped Hessian restricted to columns `q..d`; `None` runs
/// plain round-to-nearest.
pub fn straight_line(w: &Matrix, cfg: OracleCfg, h_inv_per_step: Option<&[Matrix]>) -> OracleResult {
    let (rows, cols) = w.shape();
    let s_w = cfg.weight_scale(w);
    let groups = cols.div_ceil(cfg.group_size);
    let mut w_hat = Matrix::zeros(rows, cols);
    let mut inputs = Matrix::zeros(rows, cols);
    let mut codes = vec![0u8; rows * cols];
    let mut params = vec![(1.0, 0u8); rows * groups];
    for r in 0..rows {
        let mut cur = w.row(r).to_vec();
        let mut p = (1.0, 0u8);
        for q in 0..cols {
            if q % cfg.group_size == 0 {
                let end = (q + cfg.group_size).min(cols);
                let vals: Vec<f64> = cur[q..end].iter().map(|&v| cfg.fp8(v / s_w)).collect();
                p = oracle_group_params(&vals, cfg.search);
                params[r * groups + q / cfg.group_size] = p;
            }
            let w16 = cur[q];
            inputs[(r, q)] = w16;
            let code = q4(cfg.fp8(w16 / s_w), p.0, p.1);
            let w16_hat = oracle_bf16((code as f64 - p.1 as f64) * p.0 * s_w);
            codes[r * cols + q] = code;
            w_hat[(r, q)] = w16_hat;
            if let Some(invs) = h_inv_per_step {
                let target = if cfg.dual {
                    w16_hat
                } else {
                    let c = q4(w16 / s_w, p.0, p.1);
                    oracle_bf16((c as f64 - p.1 as f64) * p.0 * s_w)
                };
                let hinv = &invs[q];
                let err = (w16 - target) / hinv[(0, 0)];
                for k in 1..cols - q {
                    cur[q + k] -= err * hinv[(k, 0)];
                }
            }
        }
    }
    OracleResult {
        w_hat,
        codes,
        params,
        inputs,
    }
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs()))
            .unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        for v in m[c].iter_mut() {
            *v /= d;
        }
        for i in 0..n {
            if i != c {
                let f = m[i][c];
                if f != 0.0 {
                    let pivot_row = m[c].clone();
                    for (x, p) in m[i].iter_mut().zip(pivot_row) {
                        *x -= f * p;
                    }
                }
            }
        }
    }
    Matrix::from_fn(n, n, |i, j| m[i][n + j])
}

/// `H_d = H + damp * mean(diag) * I` (no dead features assumed).
pub fn damped(h: &Matrix, damp: f64) -> Matrix {
    let n = h.rows();
    let mean = h.diagonal().iter().sum::<f64>() / n as f64;
    Matrix::from_fn(n, n, |i, j| h[(i, j)] + if i == j { damp * mean } else { 0.0 })
}

/// Explicit inverses of the trailing principal submatrices `H[q.., q..]`.
pub fn trailing_inverses(h_d: &Matrix) -> Vec<Matrix> {
    let n = h_d.rows();
    (0..n)
        .map(|q| gauss_jordan_inverse(&Matrix::from_fn(n - q, n - q, |i, j| h_d[(q + i, q + j)])))
        .collect()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `A A^T + eps I` for a random `n x (n + 8)` Gaussian `A` (positive definite).
pub fn random_pd(n: usize, rng: &mut impl Rng) -> Matrix {
    let a = gaussian(n, n + 8, rng);
    let mut h = a.matmul(&a.transpose()).unwrap();
    for i in 0..n {
        h[(i, i)] += 1e-3;
    }
    h
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let d = a.sub(b).unwrap().frobenius_norm_sq().sqrt();
    let n = b.frobenius_norm_sq().sqrt();
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}
