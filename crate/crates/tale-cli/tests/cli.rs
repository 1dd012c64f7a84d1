//! End-to-end tests of the command surface: exit codes, reproducibility and
//! file contracts.

use std::path::Path;
use std::process::{Command, Output};

fn tale() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tale"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("command runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn make_dataset(dir: &Path, seed: u64, n: usize) {
    let out = run(tale()
        .arg("make-dataset")
        .args(["--seed", &seed.to_string(), "--n", &n.to_string()])
        .arg("--out")
        .arg(dir));
    assert!(out.status.success(), "{}", stderr(&out));
}

fn train_weights(dataset: &Path, weights: &Path) {
    let out = run(tale()
        .arg("train-toy")
        .arg("--dataset")
        .arg(dataset)
        .arg("--out")
        .arg(weights)
        .args(["--epochs", "6", "--seed", "3"]));
    assert!(out.status.success(), "{}", stderr(&out));
}

fn user_box_of(dataset: &Path, idx: usize) -> String {
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dataset.join("index.json")).unwrap())
            .unwrap();
    index["samples"][idx]["user_box"].as_str().unwrap().to_string()
}

#[test]
fn compose_reruns_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 11, 3);
    let weights = tmp.path().join("toy.bin");
    train_weights(&ds, &weights);
    let ubox = user_box_of(&ds, 0);
    let compose = |out_dir: &Path| {
        let out = run(tale()
            .arg("compose")
            .arg("--bg")
            .arg(ds.join("bg_0000.ppm"))
            .arg("--fg")
            .arg(ds.join("fg_0000.ppm"))
            .arg("--obj-mask")
            .arg(ds.join("obj_0000.pgm"))
            .args(["--user-box", &ubox, "--prompt", "a composite", "--seed", "7"])
            .args(["--backend", "toy"])
            .arg("--weights")
            .arg(&weights)
            .arg("--out")
            .arg(out_dir));
        assert!(out.status.success(), "{}", stderr(&out));
    };
    let (run1, run2) = (tmp.path().join("r1"), tmp.path().join("r2"));
    compose(&run1);
    compose(&run2);
    let img1 = std::fs::read(run1.join("x_res.ppm")).unwrap();
    let img2 = std::fs::read(run2.join("x_res.ppm")).unwrap();
    assert_eq!(img1, img2, "output images differ between reruns");
    let m1: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run1.join("manifest.json")).unwrap())
            .unwrap();
    let m2: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run2.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m1["output_digest"], m2["output_digest"]);
    assert_eq!(m1["input_digests"], m2["input_digests"]);
    assert_eq!(m1["steps"], m2["steps"]);
}

#[test]
fn compose_missing_background_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tale()
        .arg("compose")
        .args(["--bg", "/nonexistent/bg.ppm", "--fg", "/nonexistent/fg.ppm"])
        .args(["--obj-mask", "/nonexistent/m.pgm"])
        .args(["--user-box", "1,1,4,4", "--prompt", "x"])
        .arg("--out")
        .arg(tmp.path().join("out")));
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn invalid_t_prime_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 12, 1);
    let ubox = user_box_of(&ds, 0);
    let out = run(tale()
        .arg("compose")
        .arg("--bg")
        .arg(ds.join("bg_0000.ppm"))
        .arg("--fg")
        .arg(ds.join("fg_0000.ppm"))
        .arg("--obj-mask")
        .arg(ds.join("obj_0000.pgm"))
        .args(["--user-box", &ubox, "--prompt", "x"])
        .args(["--t", "20", "--t-prime", "25"])
        .arg("--out")
        .arg(tmp.path().join("out")));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("t-prime"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_2_naming_it() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 13, 1);
    let cfg_path = tmp.path().join("bad.cfg");
    std::fs::write(&cfg_path, "t-prmie = 8\n").unwrap();
    let ubox = user_box_of(&ds, 0);
    let out = run(tale()
        .arg("compose")
        .arg("--bg")
        .arg(ds.join("bg_0000.ppm"))
        .arg("--fg")
        .arg(ds.join("fg_0000.ppm"))
        .arg("--obj-mask")
        .arg(ds.join("obj_0000.pgm"))
        .args(["--user-box", &ubox, "--prompt", "x"])
        .arg("--config")
        .arg(&cfg_path)
        .arg("--out")
        .arg(tmp.path().join("out")));
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("t-prmie"), "{}", stderr(&out));
}

#[test]
fn ablate_row_count_contract() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 14, 4);
    let weights = tmp.path().join("toy.bin");
    train_weights(&ds, &weights);
    let out_dir = tmp.path().join("abl");
    let out = run(tale()
        .arg("ablate")
        .args(["--sweep", "t-prime=16,12,8,4"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--weights")
        .arg(&weights)
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("ablate.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    // 4 sweep values x 4 samples = 16 data rows plus the header.
    assert_eq!(lines.len(), 17, "csv:\n{csv}");
    assert!(lines[0].starts_with("sweep_key,sweep_value,sample"));
    assert_eq!(csv.matches("\nt-prime,8,").count(), 4);
}

#[test]
fn component_sweep_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 15, 2);
    let weights = tmp.path().join("toy.bin");
    train_weights(&ds, &weights);
    let out_dir = tmp.path().join("abl");
    let out = run(tale()
        .arg("ablate")
        .args(["--sweep", "component=baseline,selective,normalization,optimization"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--weights")
        .arg(&weights)
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("ablate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn make_dataset_digest_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let grab = |dir: &Path| {
        let out = run(tale()
            .arg("make-dataset")
            .args(["--seed", "21", "--n", "3"])
            .arg("--out")
            .arg(dir));
        assert!(out.status.success());
        stdout(&out)
            .lines()
            .find(|l| l.starts_with("dataset digest"))
            .unwrap()
            .to_string()
    };
    let a = grab(&tmp.path().join("a"));
    let b = grab(&tmp.path().join("b"));
    assert_eq!(a, b);
}

#[test]
fn gradcheck_passes_and_reports() {
    let out = run(tale().arg("gradcheck").args(["--cases", "5"]));
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("worst"), "{text}");
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 5);
}

#[test]
fn invert_reports_small_error_on_analytic_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 16, 1);
    let out = run(tale().arg("invert").arg("--image").arg(ds.join("bg_0000.ppm")));
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let rel = report["relative_l2_error"].as_f64().unwrap();
    assert!(rel < 5e-2, "relative error {rel}");
}

#[test]
fn metrics_consumes_ablate_images() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds, 17, 2);
    let weights = tmp.path().join("toy.bin");
    train_weights(&ds, &weights);
    let out_dir = tmp.path().join("abl");
    let out = run(tale()
        .arg("ablate")
        .args(["--sweep", "t-prime=8"])
        .arg("--dataset")
        .arg(&ds)
        .arg("--weights")
        .arg(&weights)
        .arg("--out")
        .arg(&out_dir)
        .arg("--save-images"));
    assert!(out.status.success(), "{}", stderr(&out));
    let out = run(tale()
        .arg("metrics")
        .arg("--results")
        .arg(out_dir.join("t-prime-8"))
        .arg("--dataset")
        .arg(&ds));
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 3, "{text}");
    assert!(text.starts_with("sample,ssim_bg"));
}
