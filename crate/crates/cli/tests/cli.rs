use std::path::Path;
use std::process::{Command, Output};

fn ligsm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ligsm")).args(args).current_dir(cwd).output().unwrap()
}

const SPEC: &str = "frames = 4\nwidth = 64\nheight = 48\nfocal = 48.0\narc_degrees = 20.0\n";
const CONFIG: &str = "[dataset]\npath = \"world\"\n[mapping]\niters_per_frame = 5\n";

#[test]
fn synth_run_eval_overlay_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("spec.toml"), SPEC).unwrap();
    std::fs::write(d.join("run.toml"), CONFIG).unwrap();

    let o = ligsm(&["synth", "--spec", "spec.toml", "--seed", "2", "--out", "world"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("world/calib.txt").exists());

    let o = ligsm(&["--config", "run.toml", "--threads", "2", "run", "--out", "out"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ate_rmse_m:"), "{stdout}");

    let o = ligsm(&["--config", "run.toml", "eval", "out", "--gt", "out/trajectory.txt"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8_lossy(&o.stdout);
    let ate: f64 = report.lines().find_map(|l| l.strip_prefix("ate_rmse_m: ")).unwrap().parse().unwrap();
    assert!(ate < 1e-12, "{report}");
    assert!(d.join("out/eval_metrics.csv").exists());

    for src in ["initial", "optimized", "world/calib.txt"] {
        let o = ligsm(&["--config", "run.toml", "--out", "out", "overlay", "--frame", "1", "--extrinsic", src], d);
        assert!(o.status.success(), "{src}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(d.join("out/overlay_000001.png").exists());

    let o = ligsm(&["--out", "views", "render", "--map", "out/map.bin", "--poses", "world/groundtruth.txt", "--calib", "out/extrinsic.txt"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("views/renders/color/000003.png").exists());
    assert!(d.join("views/renders/depth/000003.png").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // Missing dataset: configuration error.
    let o = ligsm(&["run", "--dataset", "absent"], d);
    assert_eq!(o.status.code(), Some(1));

    // Unknown config key: configuration error.
    std::fs::write(d.join("bad.toml"), "[mapping]\nbogus = 1\n").unwrap();
    assert_eq!(ligsm(&["--config", "bad.toml", "run"], d).status.code(), Some(1));

    // Invalid spec: configuration error.
    std::fs::write(d.join("zero.toml"), "frames = 0\n").unwrap();
    assert_eq!(ligsm(&["synth", "--spec", "zero.toml", "--out", "w"], d).status.code(), Some(1));

    // Missing run artifacts: stage failure.
    std::fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(ligsm(&["eval", "empty", "--gt", "x.txt"], d).status.code(), Some(2));

    // Unreadable dataset contents: stage failure.
    std::fs::create_dir(d.join("broken")).unwrap();
    std::fs::write(d.join("broken/calib.txt"), "garbage\n").unwrap();
    assert_eq!(ligsm(&["run", "--dataset", "broken"], d).status.code(), Some(2));

    assert_eq!(ligsm(&["--help"], d).status.code(), Some(0));
    assert_eq!(ligsm(&["frobnicate"], d).status.code(), Some(1));
}
