//! Seeded synthetic layers and calibration activations for desk-scale runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Shape of a synthetic activation distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    /// Number of shared latent factors mixed into every feature.
    pub factors: usize,
    /// Weight of the shared factors relative to the per-feature noise.
    pub factor_strength: f64,
    /// Per-feature scales are log-uniform over `[10^-spread/2, 10^spread/2]`.
    pub log10_scale_spread: f64,
    /// Randomly placed features multiplied by `outlier_gain`.
    pub outlier_features: usize,
    pub outlier_gain: f64,
}

impl Default for ActivationProfile {
    fn default() -> Self {
        ActivationProfile {
            factors: 16,
            factor_strength: 0.7,
            log10_scale_spread: 1.0,
            outlier_features: 0,
            outlier_gain: 1.0,
        }
    }
}

/// Per-feature multipliers of a profile, drawn once per layer.
pub fn feature_scales(d_in: usize, profile: &ActivationProfile, rng: &mut impl Rng) -> Vec<f64> {
    let half = profile.log10_scale_spread / 2.0;
    let mut scales: Vec<f64> = (0..d_in)
        .map(|_| 10f64.powf(rng.random_range(-half..=half)))
        .collect();
    let mut idx: Vec<usize> = (0..d_in).collect();
    for k in 0..profile.outlier_features.min(d_in) {
        let j = rng.random_range(k..d_in);
        idx.swap(k, j);
        scales[idx[k]] *= profile.outlier_gain;
    }
    scales
}

/// Correlated activations, `d_in x n` (columns are samples):
/// `x = diag(scales) (z + strength * F g)` with Gaussian `z`, `F`, `g`.
pub fn activations_with_scales(
    scales: &[f64],
    n: usize,
    profile: &ActivationProfile,
    rng: &mut impl Rng,
) -> Matrix {
    let d_in = scales.len();
    let k = profile.factors;
    let loadings = gaussian_matrix(d_in, k, 1.0 / (k.max(1) as f64).sqrt(), rng);
    let latent = gaussian_matrix(k, n, 1.0, rng);
    let shared = loadings.matmul(&latent).expect("shapes agree");
    let mut x = gaussian_matrix(d_in, n, 1.0, rng);
    for (r, &s) in scales.iter().enumerate() {
        for (v, f) in x.row_mut(r).iter_mut().zip(shared.row(r)) {
            *v = s * (*v + profile.factor_strength * f);
        }
    }
    x
}

pub fn correlated_activations(d_in: usize, n: usize, profile: &ActivationProfile, rng: &mut impl Rng) -> Matrix {
    let scales = feature_scales(d_in, profile, rng);
    activations_with_scales(&scales, n, profile, rng)
}
