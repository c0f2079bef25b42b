use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dpq::cli_io::artifact::{load_artifact, QuantManifest, QUANT_MANIFEST_FILE};
use dpq::cli_io::container::{ContainerManifest, MANIFEST_FILE};
use dpq::cli_io::{TensorContainer, TensorWriter};
use dpq::linalg::Matrix;
use dpq::quant_params::unpack_nibbles;
use dpq::simeval::EvalReport;

fn dpq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpq"))
        .args(args)
        .env("DPQ_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = dpq(args);
    assert!(
        out.status.success(),
        "dpq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn synth(root: &Path) {
    ok(&[
        "synth", "--out", s(root), "--layers", "3", "--d-out", "24", "--d-in", "40",
        "--calib-samples", "256", "--eval-samples", "128", "--seed", "7",
    ]);
}

#[test]
fn pipeline_is_deterministic_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    synth(root);
    let cal = root.join("cal");
    ok(&[
        "calibrate", "--weights", s(&root.join("weights")), "--acts", s(&root.join("calib_acts")),
        "--out", s(&cal), "--damp", "0.01",
    ]);

    let mut outs: Vec<PathBuf> = Vec::new();
    for run in 0..2 {
        let out = root.join(format!("q{run}"));
        ok(&[
            "quantize", "--weights", s(&root.join("weights")), "--hessians", s(&cal), "--out", s(&out),
            "--group-size", "16", "--reorder", "gar", "--compensation", "dual", "--seed", "3",
        ]);
        outs.push(out);
    }
    assert_eq!(dir_bytes(&outs[0]), dir_bytes(&outs[1]));

    let art = load_artifact(&outs[0]).unwrap();
    assert_eq!(art.layers.len(), 3);
    for (entry, layer) in art.manifest.layers.iter().zip(&art.layers) {
        assert_eq!(layer.packed.params.len(), entry.rows * entry.cols.div_ceil(16));
        assert!(layer.permutation.has_group_block_structure());
        assert!(entry.activation_scale.is_some());
    }

    let rtn = root.join("rtn");
    ok(&[
        "quantize", "--weights", s(&root.join("weights")), "--out", s(&rtn), "--group-size", "16",
        "--compensation", "none", "--reorder", "none",
    ]);
    let full = root.join("full");
    ok(&[
        "quantize", "--weights", s(&root.join("weights")), "--hessians", s(&cal), "--out", s(&full),
        "--group-size", "16", "--reorder", "full", "--per-channel-fp8", "--no-scale-search",
    ]);
    assert!(load_artifact(&full).unwrap().manifest.layers[0].column_groups.is_some());

    let mut reports = Vec::new();
    for (name, dir) in [("dpq", &outs[0]), ("rtn", &rtn), ("full", &full)] {
        let report = root.join(format!("{name}.json"));
        ok(&[
            "eval", "--weights", s(&root.join("weights")), "--artifact", s(dir), "--acts",
            s(&root.join("eval_acts")), "--modes", "bf16,w8a8,w4a16,w4a8", "--report", s(&report),
            "--label", name,
        ]);
        reports.push(report);
    }
    let r: EvalReport = serde_json::from_slice(&fs::read(&reports[0]).unwrap()).unwrap();
    assert_eq!(r.records.len(), 12);
    assert_eq!(r.label, "dpq");

    let table_json = root.join("table.json");
    let out = ok(&[
        "compare", "--reports", s(&reports[0]), s(&reports[1]), s(&reports[2]), "--json", s(&table_json),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("w4a8"));
    assert_eq!(text.lines().count(), 4);
    assert!(table_json.exists());
}

fn on_grid_weights(dir: &Path) -> Matrix {
    // multiples of 32 in [-32, 448]: exact on E4M3, INT4 and BF16
    let w = Matrix::from_fn(2, 16, |r, c| (c as f64 - 1.0) * if r == 0 { 32.0 } else { -32.0 });
    let writer = TensorWriter::create(dir).unwrap();
    writer.add_matrix_f32("proj", &w).unwrap();
    writer.finish().unwrap();
    w
}

#[test]
fn exact_artifact_evaluates_to_zero_error() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    on_grid_weights(&root.join("w"));
    // 0/1 activations keep every product exact in BF16
    let x = Matrix::from_fn(8, 16, |n, c| ((n * 5 + c * 3) % 4 == 0) as u8 as f64);
    let acts = TensorWriter::create(root.join("x")).unwrap();
    acts.add_matrix_f32("proj@0", &x).unwrap();
    acts.add_matrix_f32("proj@1", &x).unwrap();
    acts.finish().unwrap();

    ok(&[
        "calibrate", "--weights", s(&root.join("w")), "--acts", s(&root.join("x")), "--out",
        s(&root.join("cal")), "--pow2-scales",
    ]);
    let (w_dir, cal_dir) = (root.join("w"), root.join("cal"));
    for extra in [None, Some("--ideal-fp8")] {
        let q = root.join("q");
        let _ = fs::remove_dir_all(&q);
        let mut args = vec![
            "quantize", "--weights", s(&w_dir), "--hessians", s(&cal_dir), "--out", s(&q),
            "--group-size", "16", "--compensation", "none", "--reorder", "none", "--pow2-scales",
        ];
        args.extend(extra);
        ok(&args);
        let report = root.join("r.json");
        ok(&[
            "eval", "--weights", s(&root.join("w")), "--artifact", s(&q), "--acts", s(&root.join("x")),
            "--report", s(&report),
        ]);
        let r: EvalReport = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        assert_eq!(r.records.len(), 4);
        for rec in &r.records {
            assert_eq!(rec.relative_output_error, 0.0, "{:?}", rec.mode);
            assert_eq!(rec.activation_saturation_rate, 0.0);
        }
    }
}

#[test]
fn zero_weights_store_zero_points() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let writer = TensorWriter::create(root.join("w")).unwrap();
    writer.add_matrix_f32("z", &Matrix::zeros(3, 20)).unwrap();
    writer.finish().unwrap();
    let q = root.join("q");
    ok(&[
        "quantize", "--weights", s(&root.join("w")), "--out", s(&q), "--group-size", "8", "--compensation", "none",
    ]);
    let c = TensorContainer::open(&q).unwrap();
    let codes = unpack_nibbles(&c.read_bytes("z.qweight").unwrap(), 3, 20).unwrap();
    let zeros = c.read_bytes("z.zeros").unwrap();
    for r in 0..3 {
        for col in 0..20 {
            assert_eq!(codes[r * 20 + col], zeros[r * 3 + col / 8]);
        }
    }
    let m: QuantManifest = serde_json::from_slice(&fs::read(q.join(QUANT_MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(m.layers[0].reconstruction_error, 0.0);
}

fn quantized_fixture(root: &Path) -> PathBuf {
    on_grid_weights(&root.join("w"));
    let q = root.join("q");
    ok(&["quantize", "--weights", s(&root.join("w")), "--out", s(&q), "--group-size", "4", "--compensation", "none"]);
    q
}

fn eval_args(root: &Path, q: &Path) -> Vec<String> {
    [
        "eval", "--weights", s(&root.join("w")), "--artifact", s(q), "--acts", s(&root.join("w")), "--report",
        s(&root.join("r.json")),
    ]
    .iter()
    .map(|a| a.to_string())
    .collect()
}

#[test]
fn malformed_artifacts_name_the_tensor() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let q = quantized_fixture(root);
    assert!(load_artifact(&q).is_ok());

    // params count != rows * ceil(cols / G): shrink the zero-point tensor
    let path = q.join(MANIFEST_FILE);
    let original = fs::read(&path).unwrap();
    let mut m: ContainerManifest = serde_json::from_slice(&original).unwrap();
    let t = m.tensors.iter_mut().find(|t| t.name == "proj.zeros").unwrap();
    t.shape = vec![2, 3];
    fs::write(q.join(&t.file), vec![0u8; 6]).unwrap();
    fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
    let args = eval_args(root, &q);
    let out = dpq(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("proj.zeros"));

    // truncated blob
    let q = quantized_fixture(&root.join("b"));
    fs::write(q.join("proj.scales.bin"), [0u8; 4]).unwrap();
    let out = dpq(&eval_args(root, &q).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("proj.scales"));

    // tampered code bytes: content hash mismatch
    let q = quantized_fixture(&root.join("c"));
    let codes = q.join("proj.qweight.bin");
    let mut bytes = fs::read(&codes).unwrap();
    bytes[0] ^= 0x11;
    fs::write(&codes, bytes).unwrap();
    let out = dpq(&eval_args(root, &q).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));

    // missing tensor referenced by the quant manifest
    let q = quantized_fixture(&root.join("d"));
    let mut m: ContainerManifest = serde_json::from_slice(&fs::read(q.join(MANIFEST_FILE)).unwrap()).unwrap();
    m.tensors.retain(|t| t.name != "proj.qweight");
    fs::write(q.join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
    let err = load_artifact(&q).unwrap_err().to_string();
    assert!(err.contains("proj.qweight"), "{err}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let missing = root.join("nope");
    let out = dpq(&["quantize", "--weights", s(&missing), "--out", s(&root.join("o")), "--compensation", "none"]);
    assert_eq!(out.status.code(), Some(4));

    on_grid_weights(&root.join("w"));
    let out = dpq(&["quantize", "--weights", s(&root.join("w")), "--out", s(&root.join("o"))]);
    assert_eq!(out.status.code(), Some(2), "dual compensation without hessians");

    let out = dpq(&["quantize", "--weights", s(&root.join("w")), "--out", s(&root.join("o")), "--group-size", "0",
        "--compensation", "none"]);
    assert_eq!(out.status.code(), Some(2));

    // non-finite Hessian entries are a numerical failure
    let cal = root.join("cal");
    let x = Matrix::from_fn(4, 16, |n, c| (n + c) as f64);
    let acts = TensorWriter::create(root.join("x")).unwrap();
    acts.add_matrix_f32("proj", &x).unwrap();
    acts.finish().unwrap();
    ok(&["calibrate", "--weights", s(&root.join("w")), "--acts", s(&root.join("x")), "--out", s(&cal)]);
    fs::write(cal.join("proj.hessian.bin"), f32::NAN.to_le_bytes().repeat(256)).unwrap();
    let out = dpq(&["quantize", "--weights", s(&root.join("w")), "--hessians", s(&cal), "--out", s(&root.join("o"))]);
    assert_eq!(out.status.code(), Some(3));
}
