use std::path::Path;
use std::process::{Command, Output};

fn ensvis(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ensvis"))
        .args(args)
        .env_remove("ENSVIS_DATA_DIR")
        .env_remove("ENSVIS_FEAT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ensvis(args);
    assert!(
        out.status.success(),
        "ensvis {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn staged_commands_reproduce_a_sift_only_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let feats = tmp.path().join("feats");
    std::fs::create_dir_all(&feats).unwrap();
    ok(&["synth", "--out", p(&data), "--train-per-class", "12", "--test-per-class", "6", "--seed", "3"]);

    let train_desc = tmp.path().join("train_sift.dfv");
    let test_desc = tmp.path().join("test_sift.dfv");
    ok(&["extract-sift", "--data-dir", p(&data), "--split", "train", "--out", p(&train_desc)]);
    ok(&["extract-sift", "--data-dir", p(&data), "--split", "test", "--out", p(&test_desc)]);

    let gmm = tmp.path().join("gmm.bin");
    let out = ok(&["train-gmm", "--descriptors", p(&train_desc), "--components", "8", "--out", p(&gmm)]);
    assert!(out.contains("8 components"));
    ok(&["encode-fv", "--gmm", p(&gmm), "--descriptors", p(&train_desc), "--out", p(&feats.join("sift-fv_0_train.dfv"))]);
    ok(&["encode-fv", "--gmm", p(&gmm), "--descriptors", p(&test_desc), "--out", p(&feats.join("sift-fv_0_test.dfv"))]);

    let reg = ok(&["registry", "--feat-dir", p(&feats)]);
    assert!(reg.contains("sift-fv"), "{reg}");

    let pca = tmp.path().join("fv.pca");
    ok(&["fit-pca", "--features", p(&feats.join("sift-fv_0_train.dfv")), "--components", "5", "--out", p(&pca)]);
    assert_eq!(&std::fs::read(&pca).unwrap()[..4], b"PCA1");

    let svm = tmp.path().join("fv.svmk");
    let out = ok(&[
        "train-svm",
        "--data-dir",
        p(&data),
        "--features",
        p(&feats.join("sift-fv_0_train.dfv")),
        "--c",
        "1",
        "--out",
        p(&svm),
    ]);
    assert!(out.contains("2 classes on 24 rows"), "{out}");

    let model = tmp.path().join("model");
    ok(&["train-ensemble", "--data-dir", p(&data), "--feat-dir", p(&feats), "--preset", "sift-only", "--out", p(&model)]);
    assert!(model.join("manifest.txt").exists());

    let report = tmp.path().join("report");
    let text = ok(&["evaluate", "--data-dir", p(&data), "--model", p(&model), "--feat-dir", p(&feats), "--out", p(&report)]);
    assert!(text.contains("SIFT (FV)"), "{text}");
    let table = ok(&["report", "--dir", p(&report)]);
    assert!(table.starts_with("Method"));
    assert!(table.contains("SIFT (FV)"));
}

#[test]
fn run_writes_report_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", p(&data), "--train-per-class", "10", "--test-per-class", "5"]);
    let cfg = tmp.path().join("ens.txt");
    std::fs::write(&cfg, "stream = sift-fv\ngmm_components = 4\nc_grid = 1\n").unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        ok(&["run", "--data-dir", p(&data), "--config", p(&cfg), "--out", p(&out)]);
        reports.push(std::fs::read(out.join("report.csv")).unwrap());
        assert!(out.join("votes.csv").exists() && out.join("timings.txt").exists());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn failures_name_the_stage_and_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ensvis(&["run", "--data-dir", p(tmp.path()), "--preset", "sift-only", "--out", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage load"), "{err}");

    ok(&["synth", "--out", p(tmp.path()), "--train-per-class", "3", "--test-per-class", "2"]);
    let out = ensvis(&[
        "run",
        "--data-dir",
        p(tmp.path()),
        "--feat-dir",
        p(tmp.path()),
        "--preset",
        "deep-ensemble",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage train") && err.contains("vgg16:7"), "{err}");

    let out = ensvis(&["run", "--data-dir", p(tmp.path()), "--preset", "nope", "--out", p(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown preset"));
}

#[test]
fn data_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", p(tmp.path()), "--train-per-class", "2", "--test-per-class", "1"]);
    let desc = tmp.path().join("d.dfv");
    let out = Command::new(env!("CARGO_BIN_EXE_ensvis"))
        .args(["extract-sift", "--split", "test", "--out", p(&desc)])
        .env("ENSVIS_DATA_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("2 images"));
}
