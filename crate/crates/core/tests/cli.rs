use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small and fast
subjects = 3
slices = 2
size = 16
base_filters = 2
depth = 2
disc_width = 2
epochs = 2
eval_every = 1
batch_size = 2
runs = 2
lr = 1e-3
";

fn ddm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddm")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn training_twice_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let (o1, o2) = (dir.path().join("one"), dir.path().join("two"));
    for o in [&o1, &o2] {
        ok(&ddm(&["train", "--config", &cfg, "--method", "ddm", "--seed", "7", "--out", s(o)]));
    }
    let a = std::fs::read(o1.join("ddm_A2B.csv")).unwrap();
    let b = std::fs::read(o2.join("ddm_A2B.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8(a).unwrap().starts_with("method,direction,kernel,alignment,run,fold,epoch"));
    assert!(o1.join("ddm_A2B_run0_fold0.ddmc").is_file());
    assert!(o1.join("ddm_A2B_run1_fold1.ddmc").is_file());
}

#[test]
fn generated_data_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    ok(&ddm(&["generate-data", "--spec", &cfg, "--out", s(&data)]));
    assert!(data.join("sub02_labels.ddmv").is_file());
    ok(&ddm(&[
        "train", "--config", &cfg, "--method", "oracle", "--data", s(&data), "--out", s(&out), "--set",
        "direction=B->A",
    ]));
    let ckpt = out.join("oracle_B2A_run0_fold0.ddmc");
    let text = ok(&ddm(&[
        "evaluate", "--config", &cfg, "--data", s(&data), "--checkpoint", s(&ckpt), "--subject", "0",
    ]));
    let row = text.lines().nth(1).unwrap();
    let mean: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&mean));
}

#[test]
fn report_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    ok(&ddm(&["train", "--config", &cfg, "--method", "no_adaptation", "--out", s(&out)]));
    let csv = out.join("no_adaptation_A2B.csv");
    let rep = dir.path().join("report");
    let first = ok(&ddm(&["report", "--out", s(&rep), s(&csv)]));
    let agg = std::fs::read_to_string(rep.join("no_adaptation_A2B_dice_mean.csv")).unwrap();
    assert!(agg.starts_with("epoch,amin,amax,mean\n0,"));
    assert_eq!(agg.lines().count(), 4);
    let second = ok(&ddm(&["report", "--out", s(&rep), s(&csv)]));
    assert_eq!(first, second);
    assert_eq!(std::fs::read_to_string(rep.join("no_adaptation_A2B_dice_mean.csv")).unwrap(), agg);
}

#[test]
fn compare_kernels_emits_one_row_per_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("k");
    let text = ok(&ddm(&["compare-kernels", "--config", &cfg, "--set", "runs=1", "--out", s(&out)]));
    let names: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["sqeuclid", "bhattacharyya", "kl"]);
    assert!(out.join("kernels_A2B.csv").is_file());
}

#[test]
fn missing_paths_are_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let missing = dir.path().join("no_such_data_dir");
    let out = ddm(&["train", "--config", &cfg, "--data", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_data_dir"));

    let out = ddm(&["train", "--config", "/nonexistent/cfg.txt", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/cfg.txt"));

    let out = ddm(&["report", "--out", s(dir.path()), "/nonexistent/runs.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/runs.csv"));
}

#[test]
fn bad_arguments_fail() {
    assert!(!ddm(&["train", "--bogus-flag"]).status.success());
    assert!(!ddm(&["frobnicate"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "epochs = 3\neval_every = 2\n").unwrap();
    let out = ddm(&["train", "--config", s(&bad), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("eval_every"));
}
