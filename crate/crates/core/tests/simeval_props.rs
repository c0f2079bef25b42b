mod common;

use dpq::dpq::{Compensation, QuantizedLayer};
use dpq::gar::GarPermutation;
use dpq::linalg::Matrix;
use dpq::numerics::{round_to_bf16, Fp8Format, Fp8Grid};
use dpq::quant_params::{pack_nibbles, Fp8TensorScale, Int4GroupParams, PackedInt4Tensor};
use dpq::simeval::{
    evaluate_layer, quantize_activations, relative_output_error, simulate_matmul, EvalReport, LayerOperands,
    SimMode, SimOptions,
};
use dpq::synth::{gaussian_matrix, rng};
use proptest::prelude::*;

/// Hand-built artifact: one group per row, unit FP8 scale.
fn layer(codes: &[u8], rows: usize, cols: usize, p: Int4GroupParams) -> QuantizedLayer {
    QuantizedLayer {
        name: "l".into(),
        packed: PackedInt4Tensor {
            rows,
            cols,
            group_size: cols,
            data: pack_nibbles(codes, rows, cols).unwrap(),
            params: (0..rows).map(|r| p.at(r, 0)).collect(),
            fp8_scale: Fp8TensorScale::per_tensor(1.0),
        },
        compensation: Compensation::None,
        permutation: GarPermutation::identity(cols, cols),
        column_groups: None,
        reconstruction_error: 0.0,
        redequant: None,
        config_hash: String::new(),
    }
}

fn bf16(m: &Matrix) -> Matrix {
    m.map(|v| round_to_bf16(v).unwrap())
}

#[test]
fn single_element_w4a8() {
    // 0.3 quantized with step 1/16: code 5 -> 0.3125
    let l = layer(&[5], 1, 1, Int4GroupParams::new(0.0625, 0));
    let x = Matrix::from_rows(&[vec![1.0]]).unwrap();
    let one = Fp8TensorScale::per_tensor(1.0);
    let ops = LayerOperands {
        weights: None,
        artifact: Some(&l),
        act_scale: Some(&one),
    };
    let out = simulate_matmul(ops, &x, SimMode::W4A8, &SimOptions::default()).unwrap();
    assert_eq!(out.output.as_slice(), &[0.3125]);
    assert_eq!(out.saturation_rate, 0.0);
}

#[test]
fn activation_quantization_examples() {
    let grid = Fp8Grid::E4M3(Fp8Format::gaudi3());
    let s = Fp8TensorScale::per_tensor(1.0);
    let x = Matrix::from_rows(&[vec![0.3, 1.5, -2.0 * 448.0]]).unwrap();
    let q = quantize_activations(&x, &s, &grid).unwrap();
    assert_eq!(q.values.as_slice(), &[0.3125, 1.5, -448.0]);
    assert!((q.saturation_rate - 1.0 / 3.0).abs() < 1e-15);

    let s = Fp8TensorScale::per_tensor(0.5);
    let x = Matrix::from_rows(&[vec![3.0 * 0.5, 448.0]]).unwrap();
    let q = quantize_activations(&x, &s, &grid).unwrap();
    assert_eq!(q.values.as_slice(), &[1.5, 224.0]);
    assert_eq!(q.grid_values.as_slice(), &[3.0, 448.0]);
}

#[test]
fn metric_identities() {
    let mut r = rng(4);
    let w = gaussian_matrix(5, 7, 1.0, &mut r);
    let x = gaussian_matrix(7, 9, 1.0, &mut r);
    let y = w.matmul(&x).unwrap();
    assert_eq!(relative_output_error(&y, &y).unwrap(), 0.0);
    assert_eq!(relative_output_error(&y, &Matrix::zeros(5, 9)).unwrap(), 1.0);

    let opts = SimOptions {
        bypass_quantization: true,
        ..SimOptions::default()
    };
    let ops = LayerOperands {
        weights: Some(&w),
        artifact: None,
        act_scale: None,
    };
    for mode in SimMode::ALL {
        let out = simulate_matmul(ops, &x, mode, &opts).unwrap();
        assert_eq!(out.output, bf16(&y));
    }
}

#[test]
fn unit_scales_on_ideal_grid_reproduce_reference() {
    let mut r = rng(9);
    let (rows, cols) = (4, 6);
    let codes: Vec<u8> = (0..rows * cols).map(|i| (i * 7 % 16) as u8).collect();
    let l = layer(&codes, rows, cols, Int4GroupParams::new(1.0, 8));
    let x = gaussian_matrix(cols, 5, 3.0, &mut r);
    let one = Fp8TensorScale::per_tensor(1.0);
    let opts = SimOptions {
        grid: Fp8Grid::Ideal { max_magnitude: 448.0 },
        ..SimOptions::default()
    };
    let ops = LayerOperands {
        weights: None,
        artifact: Some(&l),
        act_scale: Some(&one),
    };
    let out = simulate_matmul(ops, &x, SimMode::W4A8, &opts).unwrap();
    let reference = l.dequantize().unwrap().matmul(&x).unwrap();
    assert_eq!(out.output, bf16(&reference));
}

#[test]
fn mode_errors_need_their_operands() {
    let x = Matrix::zeros(2, 2);
    let none = LayerOperands {
        weights: None,
        artifact: None,
        act_scale: None,
    };
    for mode in SimMode::ALL {
        assert!(simulate_matmul(none, &x, mode, &SimOptions::default()).is_err());
    }
    assert_eq!("W4A8".parse::<SimMode>().unwrap(), SimMode::W4A8);
    assert!("w2a2".parse::<SimMode>().is_err());
}

proptest! {
    #[test]
    fn report_fields_are_in_range(seed in 0u64..1000, cal_frac in 0.5f64..1.0) {
        let mut r = rng(seed);
        let w = gaussian_matrix(4, 16, 1.0, &mut r);
        let x = gaussian_matrix(16, 12, 1.0, &mut r);
        let cfg = dpq::dpq::QuantizerConfig { group_size: 8, ..Default::default() };
        let art = dpq::dpq::rtn_quantize_layer(&w, &cfg).unwrap();
        // a scale calibrated on a fraction of the range may saturate
        let s = Fp8TensorScale::per_tensor(cal_frac * x.max_abs() / 448.0);
        let ops = LayerOperands { weights: Some(&w), artifact: Some(&art), act_scale: Some(&s) };
        let recs = evaluate_layer("l", &w, ops, &x, &SimMode::ALL, &SimOptions::default()).unwrap();
        for rec in &recs {
            prop_assert!(rec.relative_output_error >= 0.0);
            prop_assert!(rec.weight_mse >= 0.0 && rec.max_abs_error >= 0.0);
            prop_assert!((0.0..=1.0).contains(&rec.activation_saturation_rate));
        }
        // calibrated on the eval data itself: nothing saturates
        let s = Fp8TensorScale::per_tensor(x.max_abs() / 448.0);
        let ops = LayerOperands { weights: Some(&w), artifact: Some(&art), act_scale: Some(&s) };
        let recs = evaluate_layer("l", &w, ops, &x, &SimMode::ALL, &SimOptions::default()).unwrap();
        prop_assert!(recs.iter().all(|r| r.activation_saturation_rate == 0.0));
        let report = EvalReport::from_records("t", recs);
        prop_assert_eq!(report.aggregate.len(), 4);
    }
}
