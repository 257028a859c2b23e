use std::path::Path;
use std::process::{Command, Output};

use w4a8_core::otf::{read_dense, read_quantized};
use w4a8_core::quant::dequantize;

fn w4a8(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_w4a8"))
        .args(args)
        .env_remove("ODYSSEY_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) {
    let o = w4a8(&[
        "synth",
        "--output",
        p(&dir.join("ck")),
        "--calib-output",
        p(&dir.join("calib")),
        "--seed",
        &seed.to_string(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap()
}

fn quantize(dir: &Path, recipe: &str) -> Vec<(f64, f64)> {
    let out = dir.join(recipe);
    let o = w4a8(&[
        "quantize",
        "--input",
        p(&dir.join("ck")),
        "--calib",
        p(&dir.join("calib")),
        "--output",
        p(&out),
        "--recipe",
        recipe,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_csv(&out.join("report.csv"));
    let (mse, err) = (column(&h, "mse_after"), column(&h, "layerwise_error_after"));
    rows.iter().map(|r| (r[mse].parse().unwrap(), r[err].parse().unwrap())).collect()
}

#[test]
fn verify_reports_check_counts() {
    let o = w4a8(&["verify"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("scalar-pairs: 4096 cases, 0 failures"), "{out}");
    assert!(out.contains("random-matrices: 100 cases, 0 failures"), "{out}");
}

#[test]
fn verify_with_injected_fault_fails_with_coordinates() {
    let o = w4a8(&["verify", "--inject-fault"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("(i, j, k) = ("), "{}", stderr(&o));
}

#[test]
fn gptq_without_calibration_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 0);
    let o = w4a8(&[
        "quantize",
        "--input",
        p(&dir.path().join("ck")),
        "--output",
        p(&dir.path().join("q")),
        "--recipe",
        "lwc+gptq",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--calib"));
}

#[test]
fn asymmetric_weights_for_fast_engine_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 0);
    let o = w4a8(&[
        "quantize",
        "--input",
        p(&dir.path().join("ck")),
        "--output",
        p(&dir.path().join("q")),
        "--asymmetric",
        "--engine",
        "fast",
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("engine fast"), "{}", stderr(&o));
}

#[test]
fn lwc_with_per_group_scheme_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 0);
    let o = w4a8(&[
        "quantize",
        "--input",
        p(&dir.path().join("ck")),
        "--output",
        p(&dir.path().join("q")),
        "--recipe",
        "lwc",
        "--granularity",
        "per-group",
        "--group-size",
        "32",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&w4a8(&["gemm-bench", "--bogus"])), 2);
    assert_eq!(code(&w4a8(&["frobnicate"])), 2);
    assert_eq!(code(&w4a8(&["quantize", "--input", "/nonexistent", "--output", "/tmp/x"])), 2);
    assert_eq!(code(&w4a8(&["eval-mse", "--input", "/tmp"])), 2);
    assert_eq!(code(&w4a8(&["gemm-bench", "--engines", "fast", "--baseline", "finegrained"])), 2);
    assert_eq!(code(&w4a8(&["gemm-bench", "--repeats", "2"])), 2);
}

#[test]
fn thread_env_overrides_and_is_validated() {
    let run = |v: &str| {
        Command::new(env!("CARGO_BIN_EXE_w4a8"))
            .args(["verify", "--random-cases", "2", "--agreement-cases", "2", "--threads", "2"])
            .env("ODYSSEY_THREADS", v)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    assert_eq!(code(&run("0")), 2);
    assert_eq!(code(&run("many")), 2);
}

#[test]
fn quantized_layers_are_written_and_reload() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 4);
    quantize(dir.path(), "rtn");
    let manifest = std::fs::read_to_string(dir.path().join("rtn").join("manifest.txt")).unwrap();
    let names: Vec<&str> = manifest.lines().collect();
    assert_eq!(names, ["layer0", "layer1", "layer2", "layer3"]);
    for name in names {
        let w = read_dense(dir.path().join("ck").join(format!("{name}.otf"))).unwrap();
        let q = read_quantized(dir.path().join("rtn").join(name)).unwrap();
        assert_eq!(q.shape(), w.shape());
        let d = dequantize(&q);
        for r in 0..w.rows() {
            let half_step = q.scales()[r] / 2.0;
            for c in 0..w.cols() {
                assert!((d.get(r, c) - w.get(r, c)).abs() <= half_step * 1.0001);
            }
        }
    }
}

#[test]
fn lwc_never_raises_layer_mse_over_rtn() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let rtn = quantize(dir.path(), "rtn");
    let lwc = quantize(dir.path(), "lwc");
    for ((r, _), (l, _)) in rtn.iter().zip(&lwc) {
        assert!(l <= r, "lwc {l} > rtn {r}");
    }
}

#[test]
fn recipes_order_layerwise_error_on_toy_checkpoints() {
    let mut ordered = 0;
    let mut total = 0;
    for seed in 0..5 {
        let dir = tempfile::tempdir().unwrap();
        synth(dir.path(), seed);
        let rtn = quantize(dir.path(), "rtn");
        let lwc = quantize(dir.path(), "lwc");
        let gptq = quantize(dir.path(), "lwc+gptq");
        for i in 0..rtn.len() {
            total += 1;
            ordered += (gptq[i].1 <= lwc[i].1 && lwc[i].1 <= rtn[i].1) as usize;
        }
    }
    assert!(ordered * 100 >= total * 95, "{ordered}/{total}");
}

#[test]
fn bench_with_shapes_file_and_two_engines() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = dir.path().join("shapes.txt");
    std::fs::write(&shapes, "# m n k\n4 32 256\n1,16,128\n").unwrap();
    let out = dir.path().join("r.csv");
    let o = w4a8(&[
        "gemm-bench",
        "--shapes",
        p(&shapes),
        "--engines",
        "fast,finegrained",
        "--baseline",
        "finegrained",
        "--format",
        "csv",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 4);
    let (engine, speedup) = (column(&h, "engine"), column(&h, "speedup_vs_baseline"));
    for r in &rows {
        if r[engine] == "finegrained" {
            assert_eq!(r[speedup], "1.000");
        }
    }
}

#[test]
fn bad_shape_specs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in ["4 32\n", "4 x 256\n", "0 16 128\n", "# nothing\n", "1 16 100\n"].iter().enumerate() {
        let shapes = dir.path().join(format!("s{i}.txt"));
        std::fs::write(&shapes, text).unwrap();
        let o = w4a8(&["gemm-bench", "--shapes", p(&shapes)]);
        assert_eq!(code(&o), 2, "{text:?}: {}", stderr(&o));
    }
}

#[test]
fn eval_mse_on_checkpoint_reports_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2);
    let out = dir.path().join("eval.csv");
    let o = w4a8(&[
        "eval-mse",
        "--input",
        p(&dir.path().join("ck")),
        "--calib",
        p(&dir.path().join("calib")),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, rows) = read_csv(&out);
    assert_eq!(rows.len(), 4);
    assert_eq!(h.len(), 8);
    assert!(stderr(&o).contains("/4 layers"));
}
