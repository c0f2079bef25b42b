//! Simulated inference of a linear layer under BF16, W8A8, W4A16 and W4A8,
//! and the reconstruction metrics reported for each.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dpq::QuantizedLayer;
use crate::error::{DpqError, Result};
use crate::linalg::Matrix;
use crate::numerics::{bf16_nearest, Fp8Format, Fp8Grid};
use crate::quant_params::{compute_fp8_scale, Fp8TensorScale, ScaleGranularity};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Relative rounding of a scale stored as f32.
const SCALE_STORAGE_EPS: f64 = f32::EPSILON as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Bf16,
    W8A8,
    W4A16,
    W4A8,
}

impl SimMode {
    pub const ALL: [SimMode; 4] = [SimMode::Bf16, SimMode::W8A8, SimMode::W4A16, SimMode::W4A8];

    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Bf16 => "bf16",
            SimMode::W8A8 => "w8a8",
            SimMode::W4A16 => "w4a16",
            SimMode::W4A8 => "w4a8",
        }
    }

    fn quantizes_activations(self) -> bool {
        matches!(self, SimMode::W8A8 | SimMode::W4A8)
    }
}

impl fmt::Display for SimMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimMode {
    type Err = DpqError;

    fn from_str(s: &str) -> Result<Self> {
        SimMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| DpqError::InvalidArgument(format!("unknown mode `{s}`")))
    }
}

/// Knobs of the simulated hardware.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub grid: Fp8Grid,
    /// Power-of-two weight scale in the W8A8 path.
    pub pow2_scales: bool,
    /// Skip every quantization step (inputs, weights); output is still BF16.
    pub bypass_quantization: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            grid: Fp8Grid::E4M3(Fp8Format::gaudi3()),
            pow2_scales: false,
            bypass_quantization: false,
        }
    }
}

/// Operands available for one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerOperands<'a> {
    pub weights: Option<&'a Matrix>,
    pub artifact: Option<&'a QuantizedLayer>,
    pub act_scale: Option<&'a Fp8TensorScale>,
}

#[derive(Debug, Clone)]
pub struct QuantizedActivations {
    /// `nearest(X / s) * s` per element.
    pub values: Matrix,
    /// Grid values `nearest(X / s)`, before rescaling.
    pub grid_values: Matrix,
    pub saturation_rate: f64,
}

/// Static symmetric FP8 activation quantization. An element saturates when
/// `|x / s|` exceeds the grid maximum by more than the f32 storage precision
/// of `s`, so the calibration maximum itself never counts.
pub fn quantize_activations(x: &Matrix, s: &Fp8TensorScale, grid: &Fp8Grid) -> Result<QuantizedActivations> {
    let scale = s.scale();
    if !(scale > 0.0) {
        return Err(DpqError::InvalidArgument(format!("activation scale {scale}")));
    }
    let max = grid.max_magnitude();
    let limit = max * (1.0 + SCALE_STORAGE_EPS);
    let mut saturated = 0usize;
    let mut grid_values = Matrix::zeros(x.rows(), x.cols());
    for (g, &v) in grid_values.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let scaled = v / scale;
        if scaled.abs() > limit {
            saturated += 1;
        }
        *g = grid.round(scaled)?;
    }
    let n = x.as_slice().len();
    Ok(QuantizedActivations {
        values: grid_values.map(|g| g * scale),
        grid_values,
        saturation_rate: if n == 0 { 0.0 } else { saturated as f64 / n as f64 },
    })
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub output: Matrix,
    /// Weights as seen by the matmul, expressed in the original weight units.
    pub effective_weights: Matrix,
    pub saturation_rate: f64,
}

fn bf16_matrix(m: &Matrix) -> Matrix {
    m.map(bf16_nearest)
}

fn scale_rows(m: &mut Matrix, scale: impl Fn(usize) -> f64) {
    for r in 0..m.rows() {
        let s = scale(r);
        for v in m.row_mut(r) {
            *v *= s;
        }
    }
}

/// Runs one layer's matmul `W X` (`X` is `d_in x n`) under `mode`.
/// Accumulation is in `f64`; the output is rounded to BF16.
pub fn simulate_matmul(ops: LayerOperands<'_>, x: &Matrix, mode: SimMode, opts: &SimOptions) -> Result<SimOutput> {
    let need_dense = || {
        ops.weights
            .ok_or_else(|| DpqError::InvalidArgument(format!("mode {mode} needs dense weights")))
    };
    let need_artifact = || {
        ops.artifact
            .ok_or_else(|| DpqError::InvalidArgument(format!("mode {mode} needs a quantized artifact")))
    };
    let need_act_scale = || {
        ops.act_scale
            .ok_or_else(|| DpqError::InvalidArgument(format!("mode {mode} needs an activation scale")))
    };

    if opts.bypass_quantization {
        let w = match ops.weights {
            Some(w) => w.clone(),
            None => need_artifact()?.dequantize()?,
        };
        let y = w.matmul(x)?;
        return Ok(SimOutput {
            output: bf16_matrix(&y),
            effective_weights: w,
            saturation_rate: 0.0,
        });
    }

    let (mut product, effective_weights, saturation_rate) = match mode {
        SimMode::Bf16 => {
            let w = bf16_matrix(need_dense()?);
            let y = w.matmul(&bf16_matrix(x))?;
            (y, w, 0.0)
        }
        SimMode::W4A16 => {
            let w = need_artifact()?.dequantize()?;
            let y = w.matmul(&bf16_matrix(x))?;
            (y, w, 0.0)
        }
        SimMode::W8A8 => {
            let dense = need_dense()?;
            let fmt = Fp8Format { max_magnitude: opts.grid.max_magnitude(), ..Fp8Format::gaudi3() };
            let s_w = compute_fp8_scale(dense, &fmt, ScaleGranularity::PerTensor, opts.pow2_scales)?
                .storable()
                .scale();
            let w8 = Matrix::from_vec(
                dense.rows(),
                dense.cols(),
                dense
                    .as_slice()
                    .iter()
                    .map(|&v| opts.grid.nearest(v / s_w))
                    .collect(),
            )?;
            let acts = quantize_activations(x, need_act_scale()?, &opts.grid)?;
            let s_x = need_act_scale()?.scale();
            let mut y = w8.matmul(&acts.grid_values)?;
            scale_rows(&mut y, |_| s_w * s_x);
            (y, w8.map(|v| v * s_w), acts.saturation_rate)
        }
        SimMode::W4A8 => {
            let layer = need_artifact()?;
            let w8 = layer.dequantize_fp8()?;
            let acts = quantize_activations(x, need_act_scale()?, &opts.grid)?;
            let s_x = need_act_scale()?.scale();
            let mut y = w8.matmul(&acts.grid_values)?;
            let w_scale = &layer.packed.fp8_scale;
            scale_rows(&mut y, |r| w_scale.for_row(r) * s_x);
            let mut eff = w8;
            scale_rows(&mut eff, |r| w_scale.for_row(r));
            (y, eff, acts.saturation_rate)
        }
    };
    for v in product.as_mut_slice() {
        *v = bf16_nearest(*v);
    }
    Ok(SimOutput {
        output: product,
        effective_weights,
        saturation_rate,
    })
}

/// `||reference - output||_F^2 / ||reference||_F^2`. A zero reference yields
/// the absolute error energy.
pub fn relative_output_error(reference: &Matrix, output: &Matrix) -> Result<f64> {
    let err = reference.sub(output)?.frobenius_norm_sq();
    let energy = reference.frobenius_norm_sq();
    Ok(if energy == 0.0 { err } else { err / energy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRecord {
    pub layer: String,
    pub mode: SimMode,
    pub relative_output_error: f64,
    pub weight_mse: f64,
    pub max_abs_error: f64,
    pub activation_saturation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAggregate {
    pub layers: usize,
    pub median_relative_output_error: f64,
    pub median_weight_mse: f64,
    pub median_max_abs_error: f64,
    pub median_activation_saturation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub label: String,
    pub records: Vec<ModeRecord>,
    pub aggregate: BTreeMap<SimMode, ModeAggregate>,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl EvalReport {
    pub fn from_records(label: impl Into<String>, records: Vec<ModeRecord>) -> Self {
        let mut aggregate = BTreeMap::new();
        for mode in SimMode::ALL {
            let recs: Vec<&ModeRecord> = records.iter().filter(|r| r.mode == mode).collect();
            if recs.is_empty() {
                continue;
            }
            let pick = |f: fn(&ModeRecord) -> f64| median(&mut recs.iter().map(|r| f(r)).collect::<Vec<_>>());
            aggregate.insert(
                mode,
                ModeAggregate {
                    layers: recs.len(),
                    median_relative_output_error: pick(|r| r.relative_output_error),
                    median_weight_mse: pick(|r| r.weight_mse),
                    median_max_abs_error: pick(|r| r.max_abs_error),
                    median_activation_saturation_rate: pick(|r| r.activation_saturation_rate),
                },
            );
        }
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            label: label.into(),
            records,
            aggregate,
        }
    }
}

/// Evaluates `modes` on one layer against the exact product `W X`.
pub fn evaluate_layer(
    name: &str,
    w: &Matrix,
    ops: LayerOperands<'_>,
    x_eval: &Matrix,
    modes: &[SimMode],
    opts: &SimOptions,
) -> Result<Vec<ModeRecord>> {
    if x_eval.cols() == 0 {
        return Err(DpqError::InvalidArgument("empty evaluation activations".into()));
    }
    let reference = w.matmul(x_eval)?;
    let ops = LayerOperands {
        weights: Some(ops.weights.unwrap_or(w)),
        ..ops
    };
    modes
        .iter()
        .map(|&mode| {
            let sim = simulate_matmul(ops, x_eval, mode, opts)?;
            let diff = reference.sub(&sim.output)?;
            let weight_delta = w.sub(&sim.effective_weights)?;
            Ok(ModeRecord {
                layer: name.to_string(),
                mode,
                relative_output_error: relative_output_error(&reference, &sim.output)?,
                weight_mse: weight_delta.frobenius_norm_sq() / w.as_slice().len().max(1) as f64,
                max_abs_error: diff.max_abs(),
                activation_saturation_rate: if mode.quantizes_activations() { sim.saturation_rate } else { 0.0 },
            })
        })
        .collect()
}
