use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use disparity::repr::{ClassifierHead, DatasetManifest, DatasetRole, RecordFormat, RecordTable, RepresentationRecord};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disparity"))
        .args(args)
        .current_dir(dir)
        .env_remove("DISPARITY_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL: &[&str] = &["--n", "40"];

fn gen_small(dir: &Path, out: &str) {
    let mut args = vec!["gen-toy", "--out", out];
    args.extend_from_slice(SMALL);
    ok(dir, &args);
}

fn scores_csv(dir: &Path, dataset: &str, detector: &str, scores: &[f64]) {
    let mut text = String::from("id,detector,score,flags\n");
    for (i, s) in scores.iter().enumerate() {
        text.push_str(&format!("r{i},{detector},{s},\n"));
    }
    fs::write(dir.join(format!("{dataset}.{detector}.scores.csv")), text).unwrap();
}

fn report_rows(dir: &Path) -> toml::Table {
    fs::read_to_string(dir.join("reports.toml")).unwrap().parse().unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(run(d, &[]).status.code(), Some(1));
    assert_eq!(run(d, &["--help"]).status.code(), Some(0));
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(d, &["gen-toy", "--sampler", "euler"]).status.code(), Some(1));
    fs::write(d.join("bad.toml"), "[toy]\nno_such_key = 1\n").unwrap();
    let out = run(d, &["gen-toy", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    assert_eq!(run(d, &["eval", "--scores", "missing"]).status.code(), Some(2));
    gen_small(d, "toy");
    let out = run(d, &["score", "--benchmark", "toy", "--detectors", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gen_toy_writes_four_manifests_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_small(d, "a");
    gen_small(d, "b");
    let mut manifests: Vec<String> = fs::read_dir(d.join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".manifest.toml"))
        .collect();
    manifests.sort();
    assert_eq!(
        manifests,
        ["feature-bank", "ind-calibration", "ind-test", "ood-test"].map(|r| format!("{r}.manifest.toml"))
    );
    for m in &manifests {
        let a = DatasetManifest::load(&d.join("a").join(m)).unwrap();
        let b = DatasetManifest::load(&d.join("b").join(m)).unwrap();
        assert_eq!(a.checksum, b.checksum);
        assert_eq!(a.count, 40);
    }
    assert!(d.join("a/run_config.toml").exists());
}

#[test]
fn default_output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_disparity"))
        .args(["gen-toy", "--n", "5"])
        .current_dir(tmp.path())
        .env("DISPARITY_OUTPUT_ROOT", "elsewhere")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("elsewhere/gen-toy/head.toml").exists());
}

#[test]
fn msp_scores_plain_records_and_d3_needs_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let head = ClassifierHead::new(vec![vec![1.0, -1.0], vec![0.0, 2.0]], vec![0.0, 0.0]).unwrap();
    head.save(&d.join("head.toml")).unwrap();
    let records = (0..3)
        .map(|i| RepresentationRecord::new(format!("r{i}"), vec![f64::from(i), 1.0], vec![f64::from(i), 2.0]))
        .collect();
    let table = RecordTable::new(records).unwrap();
    let m = DatasetManifest::write_dataset(d, "plain", DatasetRole::IndTest, RecordFormat::TextTable, &table, None)
        .unwrap();
    m.save(&d.join("plain.manifest.toml")).unwrap();

    ok(
        d,
        &[
            "score",
            "--head",
            "head.toml",
            "--dataset",
            "plain.manifest.toml",
            "--detectors",
            "msp",
            "--out",
            "s",
        ],
    );
    let text = fs::read_to_string(d.join("s/plain.msp.scores.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);

    let out = run(
        d,
        &[
            "score",
            "--head",
            "head.toml",
            "--dataset",
            "plain.manifest.toml",
            "--out",
            "s2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ind-calibration"));
}

#[test]
fn eval_fixtures() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let sep = d.join("sep");
    fs::create_dir(&sep).unwrap();
    scores_csv(&sep, "ind-test", "msp", &[0.9, 0.8, 0.95]);
    scores_csv(&sep, "far", "msp", &[0.1, 0.2]);
    ok(d, &["eval", "--scores", "sep", "--out", "e1"]);
    let csv = fs::read_to_string(d.join("e1/eval.csv")).unwrap();
    assert_eq!(csv.lines().nth(1), Some("msp,0.00,100.00,0.00,100.00"));
    let rows = report_rows(&d.join("e1"));
    let r = &rows["reports"].as_array().unwrap()[0];
    assert_eq!(r["auroc"].as_float(), Some(1.0));
    assert_eq!(r["fpr_at_95tpr"].as_float(), Some(0.0));

    let same = d.join("same");
    fs::create_dir(&same).unwrap();
    scores_csv(&same, "ind-test", "msp", &[0.5; 4]);
    scores_csv(&same, "near", "msp", &[0.5; 4]);
    ok(d, &["eval", "--scores", "same", "--out", "e2"]);
    let rows = report_rows(&d.join("e2"));
    assert_eq!(rows["reports"].as_array().unwrap()[0]["auroc"].as_float(), Some(0.5));

    scores_csv(&same, "near", "knn", &[0.5; 4]);
    assert_eq!(
        run(d, &["eval", "--scores", "same", "--out", "e3"]).status.code(),
        Some(2)
    );
}

#[test]
fn calibration_file_reproduces_direct_scoring() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    gen_small(d, "toy");
    ok(d, &["calibrate", "--benchmark", "toy", "--out", "cal"]);
    ok(d, &["score", "--benchmark", "toy", "--out", "direct"]);
    ok(
        d,
        &[
            "score",
            "--benchmark",
            "toy",
            "--calibration",
            "cal/calibration.toml",
            "--out",
            "reused",
        ],
    );
    for f in ["ind-test.d3.scores.csv", "toy-ood.d3.scores.csv"] {
        assert_eq!(
            fs::read(d.join("direct").join(f)).unwrap(),
            fs::read(d.join("reused").join(f)).unwrap()
        );
    }
    ok(d, &["eval", "--scores", "direct", "--out", "ev"]);
    let md = ok(d, &["report", "--from", "ev"]);
    assert!(md.starts_with("| detector | toy-ood_fpr95 | toy-ood_auroc"), "{md}");
    assert!(md.lines().nth(2).unwrap().starts_with("| d3 |"));
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("c.toml"), "[toy]\nseed = 7\nn_ind_test = 9\n").unwrap();
    ok(d, &["gen-toy", "--config", "c.toml", "--seed", "8", "--out", "t"]);
    let echoed: toml::Table = fs::read_to_string(d.join("t/run_config.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(echoed["toy"]["seed"].as_integer(), Some(8));
    assert_eq!(echoed["toy"]["n_ind_test"].as_integer(), Some(9));
    ok(d, &["gen-toy", "--config", "t/run_config.toml", "--out", "t2"]);
    assert_eq!(
        fs::read(d.join("t/ind-test.input.csv")).unwrap(),
        fs::read(d.join("t2/ind-test.input.csv")).unwrap()
    );
}

#[test]
fn ablate_grid_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "ablate", "--n", "30", "--lambda", "0,0.5,1", "--steps", "24", "--out", "l",
        ],
    );
    assert_eq!(fs::read_to_string(d.join("l/sweep.csv")).unwrap().lines().count(), 4);
    ok(
        d,
        &[
            "ablate", "--n", "30", "--lambda", "0.5", "--steps", "2,24", "--out", "t",
        ],
    );
    let text = fs::read_to_string(d.join("t/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().skip(1).all(|l| l.split(',').all(|c| !c.is_empty())));
    let md = ok(d, &["report", "--from", "t"]);
    assert!(md.starts_with("| lambda | T |"));
}
