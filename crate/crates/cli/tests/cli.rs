//! End-to-end runs of the `lanet` binary.

use std::path::Path;
use std::process::{Command, Output};

fn lanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lanet"))
        .args(args)
        .output()
        .expect("run lanet")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = lanet(args);
    assert!(o.status.success(), "lanet {args:?} failed: {}", stderr(&o));
    stdout(&o)
}

const TINY: [&str; 6] = [
    "--set",
    "widths=8,16,24,32",
    "--set",
    "head_width=16",
    "--set",
    "crop=64",
];

fn synth(dir: &Path, count: &str, bands: &str) -> String {
    let d = dir.to_str().unwrap().to_string();
    ok(&[
        "synth", "--seed", "2", "--count", count, "--size", "128", "--bands", bands, "--out", &d,
    ]);
    d
}

fn train(data: &str, ckpt: &str, steps: &str) -> String {
    let steps = format!("steps={steps}");
    let mut args = vec![
        "train",
        "--data",
        data,
        "--variant",
        "lanet",
        "--out",
        ckpt,
        "--set",
        &steps,
    ];
    args.extend_from_slice(&TINY);
    ok(&args)
}

#[test]
fn help_and_version_succeed() {
    assert!(lanet(&["--help"]).status.success());
    assert!(lanet(&["--version"]).status.success());
    assert!(stdout(&lanet(&["train", "--help"])).contains("--variant"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(lanet(&[]).status.code(), Some(1));
    assert_eq!(lanet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lanet(&["synth"]).status.code(), Some(1));
    assert_eq!(lanet(&["train", "--set", "novalue"]).status.code(), Some(1));
    let o = lanet(&["train", "--set", "nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nonsense"));
}

#[test]
fn unknown_variant_lists_the_valid_tags() {
    let o = lanet(&["train", "--data", "x", "--out", "y", "--variant", "unet"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for tag in ["fcn", "fcn-pam", "fcn-aem", "lanet"] {
        assert!(err.contains(tag), "{err}");
    }
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing").to_string_lossy().into_owned();
    let ckpt = dir.path().join("m.ckpt").to_string_lossy().into_owned();
    let o = lanet(&["train", "--data", &missing, "--variant", "fcn", "--out", &ckpt]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest"), "{}", stderr(&o));
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), "10", "4");
    let ckpt = dir.path().join("m.ckpt").to_string_lossy().into_owned();
    let log = train(&data, &ckpt, "3");
    assert!(log.contains("# steps = 3"));
    let steps: Vec<&str> = log
        .lines()
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .collect();
    assert_eq!(steps.len(), 3);
    assert!(steps[0].starts_with("0\t1.79176"), "{}", steps[0]);
    assert!(log.contains("sha256"));

    let csv = dir.path().join("r.csv");
    let report = ok(&["eval", "--ckpt", &ckpt, "--data", &data, "--csv", csv.to_str().unwrap()]);
    for name in lanet_core::CLASS_NAMES.iter().chain(&["mean_f1", "overall_accuracy"]) {
        assert!(report.contains(name), "{report}");
    }
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 9);

    let out = dir.path().join("p.png");
    let image = [
        format!("{data}/images/0001_b0.png"),
        format!("{data}/images/0001_b1.png"),
    ];
    ok(&[
        "predict",
        "--ckpt",
        &ckpt,
        "--image",
        &image[0],
        &image[1],
        "--out",
        out.to_str().unwrap(),
        "--tile",
        "0",
    ]);
    let map = lanet_core::data::io::read_label_png(&out).unwrap();
    assert_eq!((map.height(), map.width()), (128, 128));

    // The checkpoint expects four bands.
    let o = lanet(&[
        "predict",
        "--ckpt",
        &ckpt,
        "--image",
        &image[0],
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_split_scores_at_least_validation() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), "10", "4");
    let ckpt = dir.path().join("m.ckpt").to_string_lossy().into_owned();
    train(&data, &ckpt, "150");
    let oa = |split: &str| -> f64 {
        let r = ok(&["eval", "--ckpt", &ckpt, "--data", &data, "--split", split]);
        let line = r.lines().find(|l| l.starts_with("overall_accuracy")).unwrap();
        line.split_whitespace().last().unwrap().parse().unwrap()
    };
    let (train_oa, val_oa) = (oa("train"), oa("val"));
    assert!(train_oa >= val_oa, "train {train_oa} < val {val_oa}");
}

#[test]
fn band_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), "4", "3");
    let ckpt = dir.path().join("m.ckpt").to_string_lossy().into_owned();
    let mut args = vec!["train", "--data", &data, "--variant", "fcn", "--out", &ckpt];
    args.extend_from_slice(&TINY);
    let o = lanet(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("band"), "{}", stderr(&o));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), "4", "4");
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "# comment\nvariant = fcn\nsteps = 2\nlr = 0.5\nwidths = 8,16,24,32\nhead_width = 16\ncrop = 64\n",
    )
    .unwrap();
    let ckpt = dir.path().join("m.ckpt").to_string_lossy().into_owned();
    let log = ok(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--set",
        "lr=0.02",
        "--data",
        &data,
        "--out",
        &ckpt,
        "--variant",
        "fcn-pam",
    ]);
    assert!(log.contains("# lr = 0.02"), "{log}");
    assert!(log.contains("# variant = fcn-pam"), "{log}");
    assert!(log.contains("# steps = 2"), "{log}");
}

#[test]
fn gradcheck_reports_pass() {
    let out = ok(&["gradcheck", "--module", "pam"]);
    assert!(out.contains("gradcheck PASS"), "{out}");
    let out = ok(&["gradcheck", "--module", "aem", "--seed", "4"]);
    assert!(out.contains("gradcheck PASS"), "{out}");
}

#[test]
fn untrained_ablation_is_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(&dir.path().join("data"), "10", "4");
    let mut args = vec!["ablate", "--data", &data, "--seeds", "2", "--set", "steps=1"];
    args.extend_from_slice(&TINY);
    let out = ok(&args);
    assert!(out.contains("trend INCONCLUSIVE"), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("LANet ")).count(), 4);
}
