//! Software emulation of the reduced-precision grids used throughout the
//! pipeline: the two E4M3 hardware variants and BF16.
//!
//! Values are carried as `f64`. Every grid member of both formats is exactly
//! representable in `f64`, so rounding is done by snapping to the binade's
//! quantum with round-half-to-even and no intermediate double rounding.

use serde::{Deserialize, Serialize};

use crate::error::{check_finite, Result};

/// How the top exponent of an E4M3 encoding is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fp8Variant {
    /// Top exponent reserved for Inf/NaN, range ±240 (Gaudi 2).
    IeeeReserved,
    /// Top exponent holds normal numbers (only S.1111.111 is NaN), range ±448 (Gaudi 3).
    Extended,
}

/// An 8-bit float grid with 4 exponent and 3 mantissa bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fp8Format {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub max_magnitude: f64,
    pub variant: Fp8Variant,
    pub subnormal_support: bool,
}

const E4M3_BIAS: i32 = 7;

impl Fp8Format {
    pub fn e4m3(variant: Fp8Variant) -> Self {
        let max_magnitude = match variant {
            Fp8Variant::IeeeReserved => 240.0,
            Fp8Variant::Extended => 448.0,
        };
        Fp8Format {
            exponent_bits: 4,
            mantissa_bits: 3,
            max_magnitude,
            variant,
            subnormal_support: true,
        }
    }

    pub fn gaudi2() -> Self {
        Self::e4m3(Fp8Variant::IeeeReserved)
    }

    pub fn gaudi3() -> Self {
        Self::e4m3(Fp8Variant::Extended)
    }

    fn min_normal_exponent(&self) -> i32 {
        1 - E4M3_BIAS
    }

    /// Nearest grid member with saturation; `x` must be finite.
    pub(crate) fn nearest(&self, x: f64) -> f64 {
        round_to_binary_grid(
            x,
            self.mantissa_bits as i32,
            self.min_normal_exponent(),
            self.max_magnitude,
        )
    }

    /// Rounds `x` to the nearest member of this grid, ties to even mantissa.
    /// Magnitudes beyond the grid saturate to `±max_magnitude`.
    pub fn round(&self, x: f64) -> Result<f64> {
        check_finite(x, "fp8 rounding")?;
        Ok(self.nearest(x))
    }
}

impl Default for Fp8Format {
    fn default() -> Self {
        Self::gaudi3()
    }
}

/// Rounds `x` to the nearest E4M3 value of `fmt`.
pub fn round_to_fp8(x: f64, fmt: &Fp8Format) -> Result<f64> {
    fmt.round(x)
}

/// Every finite value representable in `fmt`, strictly increasing.
pub fn enumerate_grid(fmt: &Fp8Format) -> Vec<f64> {
    let mantissa_steps = 1u32 << fmt.mantissa_bits;
    let top_field = (1u32 << fmt.exponent_bits) - 1;
    let mut positive = Vec::new();
    for exp_field in 0..=top_field {
        if exp_field == top_field && fmt.variant == Fp8Variant::IeeeReserved {
            break;
        }
        for mantissa in 0..mantissa_steps {
            if exp_field == top_field && mantissa == mantissa_steps - 1 {
                // S.1111.111 is NaN in the extended variant.
                continue;
            }
            let frac = mantissa as f64 / mantissa_steps as f64;
            let value = if exp_field == 0 {
                if !fmt.subnormal_support {
                    continue;
                }
                frac * pow2(1 - E4M3_BIAS)
            } else {
                (1.0 + frac) * pow2(exp_field as i32 - E4M3_BIAS)
            };
            if value > 0.0 {
                positive.push(value);
            }
        }
    }
    positive.sort_by(f64::total_cmp);
    positive.dedup();

    let mut grid: Vec<f64> = positive.iter().rev().map(|v| -v).collect();
    grid.push(0.0);
    grid.extend_from_slice(&positive);
    grid
}

/// Value grid of the FP8 compute domain.
///
/// `Ideal` keeps the saturation range but skips mantissa rounding; it exists
/// so tests and diagnostics can isolate the effect of the E4M3 snap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fp8Grid {
    E4M3(Fp8Format),
    Ideal { max_magnitude: f64 },
}

impl Fp8Grid {
    pub fn max_magnitude(&self) -> f64 {
        match self {
            Fp8Grid::E4M3(fmt) => fmt.max_magnitude,
            Fp8Grid::Ideal { max_magnitude } => *max_magnitude,
        }
    }

    pub(crate) fn nearest(&self, x: f64) -> f64 {
        match self {
            Fp8Grid::E4M3(fmt) => fmt.nearest(x),
            Fp8Grid::Ideal { max_magnitude } => x.clamp(-max_magnitude, *max_magnitude),
        }
    }

    pub fn round(&self, x: f64) -> Result<f64> {
        check_finite(x, "fp8 rounding")?;
        Ok(self.nearest(x))
    }
}

impl From<Fp8Format> for Fp8Grid {
    fn from(fmt: Fp8Format) -> Self {
        Fp8Grid::E4M3(fmt)
    }
}

pub const BF16_MANTISSA_BITS: i32 = 7;
pub const BF16_MIN_NORMAL_EXPONENT: i32 = -126;
/// Largest finite BF16 value, (2 - 2^-7) * 2^127.
pub const BF16_MAX: f64 = 3.389_531_389_251_535_5e38;

/// Marker for the fixed BF16 format (8 exponent bits, 7 mantissa bits).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Bf16Grid;

impl Bf16Grid {
    pub fn round(self, x: f64) -> Result<f64> {
        round_to_bf16(x)
    }

    /// Bit pattern of a value already on the BF16 grid.
    pub fn to_bits(self, value: f64) -> u16 {
        ((value as f32).to_bits() >> 16) as u16
    }

    pub fn from_bits(self, bits: u16) -> f64 {
        f32::from_bits((bits as u32) << 16) as f64
    }
}

/// Nearest BF16 value, ties to even, saturating at `±BF16_MAX`.
pub fn round_to_bf16(x: f64) -> Result<f64> {
    check_finite(x, "bf16 rounding")?;
    Ok(bf16_nearest(x))
}

#[inline]
pub(crate) fn bf16_nearest(x: f64) -> f64 {
    round_to_binary_grid(x, BF16_MANTISSA_BITS, BF16_MIN_NORMAL_EXPONENT, BF16_MAX)
}

#[inline]
fn pow2(k: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&k));
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Snaps `x` to a binary floating-point grid with `mantissa_bits` stored
/// mantissa bits, gradual underflow below `2^min_normal_exp`, and saturation
/// at `max_magnitude`.
#[inline]
fn round_to_binary_grid(x: f64, mantissa_bits: i32, min_normal_exp: i32, max_magnitude: f64) -> f64 {
    let mag = x.abs();
    if mag >= max_magnitude {
        return max_magnitude.copysign(x);
    }
    if mag == 0.0 {
        return x;
    }
    let biased = ((mag.to_bits() >> 52) & 0x7ff) as i32;
    let exponent = (biased - 1023).max(min_normal_exp);
    let quantum = pow2(exponent - mantissa_bits);
    let snapped = ((mag / quantum).round_ties_even() * quantum).min(max_magnitude);
    snapped.copysign(x)
}
