use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use covloc::{Dataset, RegressionModel};

const BASE: &str = r#"
[sequence]
kind = "room"
length = 5

[generate]
n = 20

[train]
steps = 50
augment = false

[paths]
dataset = "dataset.csv"
model = "model.txt"
loss_trace = "trace.txt"
report = "report.txt"
output_dir = "fusion"
synth_dir = "synth"
"#;

fn covloc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), BASE).unwrap();
    dir
}

fn ok(out: &Output) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn with_config<'a>(cmd: &'a str, sets: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![cmd, "--config", "run.toml"];
    for s in sets {
        args.extend(["--set", s]);
    }
    args
}

#[test]
fn generate_writes_one_record_per_frame() {
    let dir = workspace();
    let out = covloc(dir.path(), &with_config("generate", &["generate.n=50"]));
    ok(&out);
    let ds = Dataset::read(&dir.path().join("dataset.csv")).unwrap();
    assert_eq!(ds.records.len(), 5);
    assert!(ds.records.iter().all(|r| r.n + r.diverged_count == 50));
    assert_eq!(ds.meta("config.generate.n"), Some("50"));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("frame 4:"));
    assert!(stdout.contains("diverged: "));
}

#[test]
fn missing_pose_file_is_a_data_error_naming_the_path() {
    let dir = workspace();
    fs::create_dir(dir.path().join("velodyne")).unwrap();
    let out = covloc(
        dir.path(),
        &with_config(
            "generate",
            &["sequence.source=kitti", "sequence.velodyne_dir=velodyne", "sequence.poses=no_such_poses.txt"],
        ),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_poses.txt"));
}

fn trace(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn training_lowers_the_loss() {
    let dir = workspace();
    ok(&covloc(dir.path(), &with_config("generate", &["sequence.length=10"])));
    ok(&covloc(
        dir.path(),
        &with_config("train", &["sequence.length=10", "train.steps=200", "train.learning_rate=0.01"]),
    ));
    let t = trace(&dir.path().join("trace.txt"));
    assert_eq!(t.len(), 200);
    assert!(t[199] < t[0], "{} -> {}", t[0], t[199]);
    let model = RegressionModel::load(&dir.path().join("model.txt")).unwrap();
    assert!(model.notes.iter().any(|(k, v)| k == "config.train.steps" && v == "200"));
}

#[test]
fn inert_augmentation_gives_identical_models() {
    let dir = workspace();
    ok(&covloc(dir.path(), &with_config("generate", &[])));
    ok(&covloc(dir.path(), &with_config("train", &["train.augment=false"])));
    let off = fs::read_to_string(dir.path().join("model.txt")).unwrap();
    ok(&covloc(
        dir.path(),
        &with_config(
            "train",
            &[
                "train.augment=true",
                "train.augment_translation=0.0",
                "train.augment_yaw_deg=0.0",
            ],
        ),
    ));
    assert!(off == fs::read_to_string(dir.path().join("model.txt")).unwrap());
}

#[test]
fn corrupt_dataset_header_is_rejected() {
    let dir = workspace();
    ok(&covloc(dir.path(), &with_config("generate", &[])));
    let path = dir.path().join("dataset.csv");
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("covloc-dataset", "covloc-datasex", 1)).unwrap();
    let out = covloc(dir.path(), &with_config("train", &[]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn overfit_model_scores_low_kl_on_its_record() {
    let dir = workspace();
    // Two ICP iterations leave real scatter in the samples, so the label is
    // well conditioned and plain gradient descent can fit it.
    let frame = ["frames.start=2", "frames.end=3", "icp.max_iterations=2", "generate.n=50"];
    ok(&covloc(dir.path(), &with_config("generate", &frame)));
    let mut train = frame.to_vec();
    train.extend(["train.steps=3000", "train.learning_rate=0.01"]);
    ok(&covloc(dir.path(), &with_config("train", &train)));
    let out = covloc(dir.path(), &with_config("eval", &frame));
    ok(&out);
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    let kl: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("mean_kl: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(kl < 0.5, "mean_kl {kl}");
    assert!(report.contains("# generate.n = 50"));
}

#[test]
fn eval_on_an_empty_frame_set_fails() {
    let dir = workspace();
    ok(&covloc(dir.path(), &with_config("generate", &[])));
    ok(&covloc(dir.path(), &with_config("train", &[])));
    let out = covloc(dir.path(), &with_config("eval", &["frames.start=3", "frames.end=3"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fuse_writes_trajectories_and_a_three_row_table() {
    let dir = workspace();
    ok(&covloc(dir.path(), &with_config("generate", &[])));
    ok(&covloc(dir.path(), &with_config("train", &[])));
    ok(&covloc(dir.path(), &with_config("fuse", &["fusion.seeds=[3, 4]"])));
    let table = fs::read_to_string(dir.path().join("fusion/ade_fde.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "mode ade_m fde_m");
    assert_eq!(rows.len(), 4);
    for (row, mode) in rows[1..].iter().zip(["icp_only", "fixed_cov", "predicted_cov"]) {
        let cols: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cols[0], mode);
        assert!(cols[1..].iter().all(|v| v.parse::<f64>().unwrap() >= 0.0));
        for seed in [3, 4] {
            let t = covloc::Trajectory::read(&dir.path().join(format!("fusion/{mode}_seed{seed}.txt"))).unwrap();
            assert_eq!(t.len(), 5);
        }
    }
}

#[test]
fn icp_only_fusion_needs_no_model_or_dataset() {
    let dir = workspace();
    let out = covloc(dir.path(), &with_config("fuse", &["fusion.modes=[\"icp_only\"]"]));
    ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 2);
}

#[test]
fn predicted_cov_without_model_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = covloc(
        dir.path(),
        &["fuse", "--set", "fusion.modes=[\"predicted_cov\"]", "--set", "paths.output_dir=out"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.model"));
}

#[test]
fn synth_output_reads_back_as_a_kitti_sequence() {
    let dir = workspace();
    ok(&covloc(dir.path(), &with_config("synth", &["sequence.length=3"])));
    assert!(dir.path().join("synth/velodyne/000002.bin").exists());
    assert!(dir.path().join("synth/config.toml").exists());
    ok(&covloc(
        dir.path(),
        &with_config(
            "generate",
            &[
                "sequence.source=kitti",
                "sequence.velodyne_dir=synth/velodyne",
                "sequence.poses=synth/poses.txt",
            ],
        ),
    ));
    assert_eq!(Dataset::read(&dir.path().join("dataset.csv")).unwrap().records.len(), 3);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = workspace();
    assert_eq!(covloc(dir.path(), &with_config("generate", &["train.stepz=1"])).status.code(), Some(1));
    assert_eq!(covloc(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(covloc(dir.path(), &["generate", "--threads", "0"]).status.code(), Some(1));
    assert_eq!(covloc(dir.path(), &["generate", "--config", "absent.toml"]).status.code(), Some(1));
    assert_eq!(covloc(dir.path(), &["generate"]).status.code(), Some(1));
    assert_eq!(covloc(dir.path(), &["--help"]).status.code(), Some(0));
}
