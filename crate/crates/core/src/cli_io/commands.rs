//! `dpq` subcommands.
//!
//! Weight directories are tensor containers with one 2-D tensor
//! `[d_out, d_in]` per layer, named after the layer. Activation directories
//! hold `[n, d_in]` tensors named `<layer>` or `<layer>@<k>` (several
//! batches of one layer).

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifact::{
    content_hash, load_artifact, write_layer, CalibratedLayer, CalibrationManifest, CalibrationSources,
    QuantManifest, QUANT_FORMAT, QUANT_MANIFEST_FILE, SCHEMA_VERSION, TOOL_VERSION,
};
use super::container::{read_json, write_json, TensorContainer, TensorWriter};
use crate::calib::{accumulate_hessian, calibrate_activation_scale, finalize_hessian, ActivationScaleSet, HessianState};
use crate::dpq::{quantize_with_trace, Compensation, QuantizerConfig};
use crate::error::{DpqError, Result};
use crate::gar::ReorderMode;
use crate::linalg::Matrix;
use crate::numerics::{Fp8Format, Fp8Variant};
use crate::quant_params::ScaleGranularity;
use crate::simeval::{evaluate_layer, EvalReport, LayerOperands, SimMode, SimOptions, REPORT_SCHEMA_VERSION};
use crate::synth::{activations_with_scales, feature_scales, gaussian_matrix, rng, ActivationProfile};

pub const THREADS_ENV: &str = "DPQ_THREADS";

#[derive(Debug, Parser)]
#[command(name = "dpq", version, about = "INT4-storage / FP8-compute post-training weight quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate seeded synthetic weights and activations.
    Synth(SynthArgs),
    /// Accumulate per-layer Hessians and static activation scales.
    Calibrate(CalibrateArgs),
    /// Quantize every layer of a weight container.
    Quantize(QuantizeArgs),
    /// Simulate inference modes and write an evaluation report.
    Eval(EvalArgs),
    /// Tabulate several evaluation reports side by side.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Gaudi2,
    Gaudi3,
}

impl From<VariantArg> for Fp8Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Gaudi2 => Fp8Variant::IeeeReserved,
            VariantArg::Gaudi3 => Fp8Variant::Extended,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReorderArg {
    None,
    Gar,
    Full,
}

impl From<ReorderArg> for ReorderMode {
    fn from(r: ReorderArg) -> Self {
        match r {
            ReorderArg::None => ReorderMode::None,
            ReorderArg::Gar => ReorderMode::Gar,
            ReorderArg::Full => ReorderMode::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompensationArg {
    Dual,
    Int4Only,
    None,
}

impl From<CompensationArg> for Compensation {
    fn from(c: CompensationArg) -> Self {
        match c {
            CompensationArg::Dual => Compensation::Dual,
            CompensationArg::Int4Only => Compensation::Int4Only,
            CompensationArg::None => Compensation::None,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Receives `weights/`, `calib_acts/` and `eval_acts/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub d_out: usize,
    #[arg(long, default_value_t = 128)]
    pub d_in: usize,
    #[arg(long, default_value_t = 512)]
    pub calib_samples: usize,
    #[arg(long, default_value_t = 256)]
    pub eval_samples: usize,
    /// Spread of per-feature activation scales, in decades.
    #[arg(long, default_value_t = 1.0)]
    pub scale_spread: f64,
    #[arg(long, default_value_t = 0)]
    pub outlier_features: usize,
    #[arg(long, default_value_t = 1.0)]
    pub outlier_gain: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Activations for the Hessians.
    #[arg(long)]
    pub acts: PathBuf,
    /// Activations for the static scales (defaults to `--acts`).
    #[arg(long)]
    pub scale_acts: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = crate::calib::DEFAULT_DAMP)]
    pub damp: f64,
    #[arg(long, value_enum, default_value_t = VariantArg::Gaudi3)]
    pub fp8_variant: VariantArg,
    #[arg(long)]
    pub pow2_scales: bool,
}

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Output of `calibrate`; required unless `--compensation none`.
    #[arg(long)]
    pub hessians: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 128)]
    pub group_size: usize,
    #[arg(long, value_enum, default_value_t = ReorderArg::Gar)]
    pub reorder: ReorderArg,
    #[arg(long, value_enum, default_value_t = CompensationArg::Dual)]
    pub compensation: CompensationArg,
    #[arg(long, value_enum, default_value_t = VariantArg::Gaudi3)]
    pub fp8_variant: VariantArg,
    #[arg(long)]
    pub pow2_scales: bool,
    #[arg(long, overrides_with = "no_scale_search")]
    pub scale_search: bool,
    #[arg(long, overrides_with = "scale_search")]
    pub no_scale_search: bool,
    #[arg(long)]
    pub per_channel_fp8: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 128)]
    pub block_size: usize,
    /// Override the dampening stored with the Hessians.
    #[arg(long)]
    pub damp: Option<f64>,
    #[arg(long)]
    pub redequant_round: bool,
    /// Skip FP8 mantissa rounding (diagnostics).
    #[arg(long, hide = true)]
    pub ideal_fp8: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub artifact: PathBuf,
    #[arg(long)]
    pub acts: PathBuf,
    /// Comma-separated subset of bf16,w8a8,w4a16,w4a8.
    #[arg(long, value_delimiter = ',', default_value = "bf16,w8a8,w4a16,w4a8")]
    pub modes: Vec<SimMode>,
    #[arg(long)]
    pub report: PathBuf,
    /// Report label (defaults to the artifact directory name).
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// Also write the table as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    let pool = thread_pool()?;
    pool.install(|| match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Calibrate(a) => calibrate(&a),
        Command::Quantize(a) => quantize(&a),
        Command::Eval(a) => eval(&a),
        Command::Compare(a) => compare(&a),
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| DpqError::InvalidArgument(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| DpqError::InvalidArgument(format!("thread pool: {e}")))
}

/// Layer names of a weight container, in manifest (sorted) order.
fn weight_layers(c: &TensorContainer) -> Result<Vec<String>> {
    let names: Vec<String> = c.names().map(str::to_string).collect();
    for n in &names {
        if c.entry(n)?.shape.len() != 2 {
            return Err(DpqError::validation(n, "weight tensors must be 2-D"));
        }
    }
    Ok(names)
}

/// All activation batches of `layer`, each transposed to `d_in x n`.
pub fn layer_batches(c: &TensorContainer, layer: &str, d_in: usize) -> Result<Vec<Matrix>> {
    let prefix = format!("{layer}@");
    let mut keyed = Vec::new();
    for name in c.names() {
        let key = if name == layer {
            Some(0)
        } else if let Some(k) = name.strip_prefix(&prefix) {
            Some(
                k.parse::<u64>()
                    .map_err(|_| DpqError::validation(name, "batch suffix must be an integer"))?
                    .saturating_add(1),
            )
        } else {
            None
        };
        if let Some(k) = key {
            keyed.push((k, name.to_string()));
        }
    }
    if keyed.is_empty() {
        return Err(DpqError::validation(layer, "no activations for layer"));
    }
    keyed.sort();
    keyed
        .into_iter()
        .map(|(_, name)| {
            let m = c.read_matrix(&name)?;
            if m.cols() != d_in {
                return Err(DpqError::validation(
                    &name,
                    format!("activations have {} features, layer expects {d_in}", m.cols()),
                ));
            }
            Ok(m.transpose())
        })
        .collect()
}

fn concat_columns(batches: &[Matrix]) -> Result<Matrix> {
    let rows = batches.first().map_or(0, Matrix::rows);
    let cols = batches.iter().map(Matrix::cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut offset = 0;
    for b in batches {
        for r in 0..rows {
            out.row_mut(r)[offset..offset + b.cols()].copy_from_slice(b.row(r));
        }
        offset += b.cols();
    }
    Ok(out)
}

fn columns(m: &Matrix, start: usize, len: usize) -> Matrix {
    Matrix::from_fn(m.rows(), len, |r, c| m[(r, start + c)])
}

fn synth(a: &SynthArgs) -> Result<()> {
    if a.layers == 0 || a.d_out == 0 || a.d_in == 0 || a.calib_samples == 0 || a.eval_samples == 0 {
        return Err(DpqError::InvalidArgument("synth sizes must be positive".into()));
    }
    let profile = ActivationProfile {
        log10_scale_spread: a.scale_spread,
        outlier_features: a.outlier_features,
        outlier_gain: a.outlier_gain,
        ..ActivationProfile::default()
    };
    let weights = TensorWriter::create(a.out.join("weights"))?;
    let calib = TensorWriter::create(a.out.join("calib_acts"))?;
    let evals = TensorWriter::create(a.out.join("eval_acts"))?;
    for i in 0..a.layers {
        let name = format!("layer{i}");
        let mut r = rng(a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let w = gaussian_matrix(a.d_out, a.d_in, 1.0 / (a.d_in as f64).sqrt(), &mut r);
        let scales = feature_scales(a.d_in, &profile, &mut r);
        let x = activations_with_scales(&scales, a.calib_samples + a.eval_samples, &profile, &mut r);
        weights.add_matrix_f32(&name, &w)?;
        calib.add_matrix_f32(&name, &columns(&x, 0, a.calib_samples).transpose())?;
        evals.add_matrix_f32(&name, &columns(&x, a.calib_samples, a.eval_samples).transpose())?;
    }
    weights.finish()?;
    calib.finish()?;
    evals.finish()?;
    println!("wrote {} layers to {}", a.layers, a.out.display());
    Ok(())
}

fn calibrate(a: &CalibrateArgs) -> Result<()> {
    let weights = TensorContainer::open(&a.weights)?;
    let acts = TensorContainer::open(&a.acts)?;
    let scale_acts = match &a.scale_acts {
        Some(p) => TensorContainer::open(p)?,
        None => acts.clone(),
    };
    let variant: Fp8Variant = a.fp8_variant.into();
    let fmt = Fp8Format::e4m3(variant);
    let writer = TensorWriter::create(&a.out)?;
    let layers = weight_layers(&weights)?;

    let results: Vec<(CalibratedLayer, crate::quant_params::Fp8TensorScale)> = layers
        .par_iter()
        .map(|name| {
            let d_in = weights.entry(name)?.shape[1];
            let mut state = HessianState::new(d_in);
            for x in layer_batches(&acts, name, d_in)? {
                state = accumulate_hessian(state, &x)?;
            }
            // Fail here rather than at quantize time if the Hessian is unusable.
            let state = finalize_hessian(state, a.damp)?;
            let tensor = format!("{name}.hessian");
            writer.add_matrix_f32(&tensor, state.matrix())?;
            let batches = layer_batches(&scale_acts, name, d_in)?;
            let scale = calibrate_activation_scale(&batches, &fmt, a.pow2_scales)?.storable();
            Ok((
                CalibratedLayer {
                    name: name.clone(),
                    dim: d_in,
                    sample_count: state.sample_count(),
                    hessian_tensor: tensor,
                },
                scale,
            ))
        })
        .collect::<Result<_>>()?;
    writer.finish()?;

    let mut activation_scales = ActivationScaleSet::default();
    let mut calibrated = Vec::new();
    for (layer, scale) in results {
        activation_scales.scales.insert(layer.name.clone(), scale);
        calibrated.push(layer);
    }
    let manifest = CalibrationManifest {
        schema_version: SCHEMA_VERSION,
        sources: CalibrationSources {
            hessian_activations: a.acts.display().to_string(),
            scale_activations: a.scale_acts.as_ref().unwrap_or(&a.acts).display().to_string(),
            damp_factor: a.damp,
        },
        fp8_variant: variant,
        pow2_scales: a.pow2_scales,
        layers: calibrated,
        activation_scales,
    };
    manifest.store(&a.out)?;
    println!("calibrated {} layers into {}", manifest.layers.len(), a.out.display());
    Ok(())
}

fn quantize(a: &QuantizeArgs) -> Result<()> {
    let weights = TensorContainer::open(&a.weights)?;
    let calibration = match &a.hessians {
        Some(dir) => Some((TensorContainer::open(dir)?, CalibrationManifest::load(dir)?)),
        None => None,
    };
    let compensation: Compensation = a.compensation.into();
    if calibration.is_none() && compensation != Compensation::None {
        return Err(DpqError::InvalidArgument(
            "--hessians is required unless --compensation none".into(),
        ));
    }
    let damp = a
        .damp
        .or(calibration.as_ref().map(|(_, m)| m.sources.damp_factor))
        .unwrap_or(crate::calib::DEFAULT_DAMP);
    let cfg = QuantizerConfig {
        group_size: a.group_size,
        reorder_mode: a.reorder.into(),
        scale_search: !a.no_scale_search,
        damp_factor: damp,
        fp8_variant: a.fp8_variant.into(),
        fp8_granularity: if a.per_channel_fp8 {
            ScaleGranularity::PerChannel
        } else {
            ScaleGranularity::PerTensor
        },
        pow2_scales: a.pow2_scales,
        compensation,
        block_size: a.block_size,
        redequant_round: a.redequant_round,
        ideal_fp8: a.ideal_fp8,
        ..QuantizerConfig::default()
    };
    cfg.validate()?;

    let writer = TensorWriter::create(&a.out)?;
    let layers = weight_layers(&weights)?;
    let entries = layers
        .par_iter()
        .map(|name| {
            let w = weights.read_matrix(name)?;
            let (hess, act_scale) = match &calibration {
                Some((c, m)) => {
                    let rec = m
                        .layers
                        .iter()
                        .find(|l| &l.name == name)
                        .ok_or_else(|| DpqError::validation(name, "layer missing from calibration"))?;
                    let h = c.read_matrix(&rec.hessian_tensor)?;
                    if h.rows() != w.cols() {
                        return Err(DpqError::validation(
                            &rec.hessian_tensor,
                            format!("hessian is {}x{}, weight has {} columns", h.rows(), h.cols(), w.cols()),
                        ));
                    }
                    let state = finalize_hessian(HessianState::from_matrix(h, rec.sample_count)?, damp)?;
                    (Some(state), m.activation_scales.scales.get(name).cloned())
                }
                None => (None, None),
            };
            let mut layer = quantize_with_trace(&w, hess.as_ref(), &cfg)?.layer;
            layer.name = name.clone();
            write_layer(&writer, &layer, name, act_scale)
        })
        .collect::<Result<Vec<_>>>()?;
    writer.finish()?;

    let container = TensorContainer::open(&a.out)?;
    let manifest = QuantManifest {
        format: QUANT_FORMAT.to_string(),
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        config_hash: cfg.config_hash(),
        config: cfg,
        seed: a.seed,
        calibration: calibration.map(|(_, m)| m.sources),
        content_hash: content_hash(&container, &entries)?,
        layers: entries,
    };
    write_json(&a.out.join(QUANT_MANIFEST_FILE), &manifest)?;
    for e in &manifest.layers {
        println!("{}\treconstruction_error={:.6e}", e.name, e.reconstruction_error);
    }
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.modes.is_empty() {
        return Err(DpqError::InvalidArgument("no modes requested".into()));
    }
    let weights = TensorContainer::open(&a.weights)?;
    let artifact = load_artifact(&a.artifact)?;
    let acts = TensorContainer::open(&a.acts)?;
    let cfg = &artifact.manifest.config;
    let opts = SimOptions {
        grid: cfg.fp8_grid(),
        pow2_scales: cfg.pow2_scales,
        bypass_quantization: false,
    };

    let per_layer = artifact
        .manifest
        .layers
        .par_iter()
        .zip(&artifact.layers)
        .map(|(entry, layer)| {
            let w = weights.read_matrix(&entry.weight_tensor)?;
            if w.shape() != (entry.rows, entry.cols) {
                return Err(DpqError::validation(
                    &entry.weight_tensor,
                    format!("weight shape {:?} differs from artifact {:?}", w.shape(), (entry.rows, entry.cols)),
                ));
            }
            let x = concat_columns(&layer_batches(&acts, &entry.name, entry.cols)?)?;
            let act_scale = match &entry.activation_scale {
                Some(s) => s.clone(),
                None => calibrate_activation_scale([&x], &cfg.fp8_format(), cfg.pow2_scales)?.storable(),
            };
            let ops = LayerOperands {
                weights: Some(&w),
                artifact: Some(layer),
                act_scale: Some(&act_scale),
            };
            evaluate_layer(&entry.name, &w, ops, &x, &a.modes, &opts)
        })
        .collect::<Result<Vec<_>>>()?;

    let label = a.label.clone().unwrap_or_else(|| {
        a.artifact
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| "artifact".into())
    });
    let report = EvalReport::from_records(label, per_layer.into_iter().flatten().collect());
    write_json(&a.report, &report)?;
    print!("{}", render_table(&[report]));
    Ok(())
}

/// Side-by-side medians of several reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub modes: Vec<SimMode>,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub layers: usize,
    pub median_relative_output_error: BTreeMap<SimMode, f64>,
    pub median_weight_mse: BTreeMap<SimMode, f64>,
}

pub fn comparison_table(reports: &[EvalReport]) -> ComparisonTable {
    let mut modes: Vec<SimMode> = reports.iter().flat_map(|r| r.aggregate.keys().copied()).collect();
    modes.sort();
    modes.dedup();
    let rows = reports
        .iter()
        .map(|r| ComparisonRow {
            label: r.label.clone(),
            layers: r.aggregate.values().map(|a| a.layers).max().unwrap_or(0),
            median_relative_output_error: r
                .aggregate
                .iter()
                .map(|(m, a)| (*m, a.median_relative_output_error))
                .collect(),
            median_weight_mse: r.aggregate.iter().map(|(m, a)| (*m, a.median_weight_mse)).collect(),
        })
        .collect();
    ComparisonTable {
        schema_version: REPORT_SCHEMA_VERSION,
        modes,
        rows,
    }
}

/// Text table: one row per report, one column per mode (median relative
/// output error).
pub fn render_table(reports: &[EvalReport]) -> String {
    let table = comparison_table(reports);
    let width = table.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "config");
    for m in &table.modes {
        out.push_str(&format!("  {:>12}", m.as_str()));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&format!("{:<width$}", row.label));
        for m in &table.modes {
            match row.median_relative_output_error.get(m) {
                Some(v) => out.push_str(&format!("  {v:>12.4e}")),
                None => out.push_str(&format!("  {:>12}", "-")),
            }
        }
        out.push('\n');
    }
    out
}

fn compare(a: &CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| {
            let r: EvalReport = read_json(p)?;
            if r.schema_version != REPORT_SCHEMA_VERSION {
                return Err(DpqError::validation(
                    p.display().to_string(),
                    format!("report schema {} (expected {REPORT_SCHEMA_VERSION})", r.schema_version),
                ));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let text = render_table(&reports);
    if let Some(path) = &a.json {
        write_json(path, &comparison_table(&reports))?;
    }
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| DpqError::io(Path::new("<stdout>"), e))
}
