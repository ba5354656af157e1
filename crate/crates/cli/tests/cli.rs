use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[synth]
dims = [8, 32, 32]
cell_count = [2, 3]
radius = [3.0, 5.0]

[net]
depth = 2
base_channels = 4
convs_per_level = 1

[train_s1]
max_epochs = 2
learning_rate = 1e-3

[train_s2]
max_epochs = 1
learning_rate = 1e-3

[refine]
sigma1 = 1.0
sigma2 = 1.0
"#;

fn zseg(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_zseg"));
    cmd.args(args).arg("-q").env_remove("ZSEG_CONFIG");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str], config: &Path) -> String {
    let out = zseg(args, Some(config));
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("zseg.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn full_pipeline(data: &Path, config: &Path) {
    ok(&["gen-synth", "--out", s(data), "--n", "5"], config);
    let m = data.join("manifest.json");
    let m = s(&m);
    ok(&["centermap", "--manifest", m], config);
    ok(&["train-s1", "--manifest", m], config);
    ok(&["prm", "--manifest", m], config);
    ok(&["train-s2", "--manifest", m], config);
    ok(&["infer", "--manifest", m], config);
    let report = ok(&["eval", "--manifest", m], config);
    assert!(report.contains("IoU") && report.contains("SEG") && report.contains("MUCov"), "{report}");
}

#[test]
fn end_to_end_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    full_pipeline(&a, &config);
    full_pipeline(&b, &config);
    let (fa, fb) = (files(&a), files(&b));
    assert!(fa.keys().any(|p| p.ends_with("eval.csv")));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (p, bytes) in &fa {
        assert!(bytes == &fb[p], "{} differs", p.display());
    }

    let csv = fs::read_to_string(a.join("predictions").join("eval.csv")).unwrap();
    assert!(csv.lines().next().unwrap().contains("iou"));
    assert!(csv.lines().any(|l| l.starts_with("mean")));

    let vol = a.join("volumes").join("sample_000.vol");
    let gt = a.join("ground_truth").join("sample_000.vol");
    let png = tmp.path().join("slice.png");
    ok(&["plot", "--volume", s(&vol), "--labels", s(&gt), "--slice", "4", "--out", s(&png)], &config);
    assert_eq!(&fs::read(&png).unwrap()[1..4], b"PNG");

    let single = tmp.path().join("single");
    let s1 = a.join("models").join("s1");
    let s2 = a.join("models").join("s2");
    ok(
        &["infer", "--model-s1", s(&s1), "--model-s2", s(&s2), "--volume", s(&vol), "--out", s(&single)],
        &config,
    );
    assert!(single.join("sample_000_instances.vol").exists());
}

#[test]
fn train_s2_before_prm_is_an_ordering_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["gen-synth", "--out", s(&data), "--n", "2"], &config);
    let m = data.join("manifest.json");
    ok(&["centermap", "--manifest", s(&m)], &config);
    ok(&["train-s1", "--manifest", s(&m)], &config);
    let out = zseg(&["train-s2", "--manifest", s(&m)], Some(&config));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pseudo"));
}

#[test]
fn train_s1_before_centermap_is_an_ordering_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["gen-synth", "--out", s(&data), "--n", "2"], &config);
    let out = zseg(&["train-s1", "--manifest", s(&data.join("manifest.json"))], Some(&config));
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn eval_without_predictions_lists_them() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["gen-synth", "--out", s(&data), "--n", "5"], &config);
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = zseg(&["eval", "--manifest", s(&data.join("manifest.json")), "--pred-dir", s(&empty)], Some(&config));
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sample_004"), "{err}");
}

#[test]
fn config_errors_name_section_and_key() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[centermap]\nd_m = -1.0\n").unwrap();
    let out = zseg(&["gen-synth", "--out", s(&tmp.path().join("x")), "--n", "1"], Some(&bad));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("centermap") && err.contains("d_m"), "{err}");

    fs::write(&bad, "[prm]\nbogus = 1\n").unwrap();
    let out = zseg(&["gen-synth", "--out", s(&tmp.path().join("x")), "--n", "1"], Some(&bad));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}

#[test]
fn config_path_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[synth]\nnoise_sigma = -1.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_zseg"))
        .args(["gen-synth", "--out", s(&tmp.path().join("x")), "--n", "1"])
        .env("ZSEG_CONFIG", &bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn prm_without_model_is_an_ordering_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let data = tmp.path().join("d");
    ok(&["gen-synth", "--out", s(&data), "--n", "2"], &config);
    let m = data.join("manifest.json");
    ok(&["centermap", "--manifest", s(&m)], &config);
    let out = zseg(&["prm", "--manifest", s(&m)], Some(&config));
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model checkpoint"));
}
