use ligsm_core::ingest::read_trajectory;
use ligsm_core::metrics::parse_metrics_csv;
use ligsm_core::pipeline::{cmd_eval, cmd_run, cmd_synth, Manifest, PipelineConfig, PipelineError, METRICS_FILE, TRAJECTORY_FILE};
use ligsm_core::synthgen::SynthSpec;
use std::path::Path;

fn small_spec() -> SynthSpec {
    SynthSpec { frames: 6, width: 80, height: 60, focal: 60.0, arc_degrees: 30.0, ..SynthSpec::default() }
}

fn config(data: &Path, out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.dataset.path = data.to_path_buf();
    cfg.output.dir = out.to_path_buf();
    cfg.mapping.iters_per_frame = 20;
    cfg
}

#[test]
fn run_eval_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("world");
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(&spec_path, small_spec().to_toml()).unwrap();
    cmd_synth(Some(&spec_path), 3, &data).unwrap();

    let out_a = dir.path().join("a");
    let summary = cmd_run(&config(&data, &out_a)).unwrap();
    assert_eq!(summary.manifest.results.matcher, "ground_truth");
    assert!(summary.evaluation.ate.as_ref().unwrap().rmse < 1e-4);
    for f in ["trajectory.txt", "extrinsic.txt", "extrinsic_history.txt", "map.bin", "metrics.csv", "manifest.txt", "report.txt", "renders/color/000000.png", "renders/depth/000005.png"] {
        assert!(out_a.join(f).exists(), "{f}");
    }
    assert_eq!(Manifest::read(&out_a).unwrap(), summary.manifest);

    // Against the held ground truth: same numbers as the run's own CSV.
    let (row, _) = cmd_eval(&out_a, &data.join("groundtruth.txt"), false).unwrap();
    let run_rows = parse_metrics_csv(&std::fs::read_to_string(out_a.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(run_rows.len(), 1);
    assert!((row.ate_cm - run_rows[0].ate_cm).abs() < 1e-9);
    assert!((row.psnr - run_rows[0].psnr).abs() < 1e-9);
    assert!((row.ssim - run_rows[0].ssim).abs() < 1e-9);

    // Against itself: zero error.
    let (own, _) = cmd_eval(&out_a, &out_a.join(TRAJECTORY_FILE), false).unwrap();
    assert!(own.ate_cm.abs() < 1e-9, "{}", own.ate_cm);
    let (scaled, _) = cmd_eval(&out_a, &out_a.join(TRAJECTORY_FILE), true).unwrap();
    assert!(scaled.ate_cm.abs() < 1e-9);

    let out_b = dir.path().join("b");
    cmd_run(&config(&data, &out_b)).unwrap();
    for f in [TRAJECTORY_FILE, METRICS_FILE, "map.bin"] {
        assert_eq!(std::fs::read(out_a.join(f)).unwrap(), std::fs::read(out_b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(read_trajectory(&out_a.join(TRAJECTORY_FILE)).unwrap().len(), 6);
}

#[test]
fn missing_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_run(&config(&dir.path().join("absent"), &dir.path().join("out"))).unwrap_err();
    assert!(matches!(err, PipelineError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn eval_without_ground_truth_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("world");
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(&spec_path, SynthSpec { frames: 3, ..small_spec() }.to_toml()).unwrap();
    cmd_synth(Some(&spec_path), 1, &data).unwrap();
    let out = dir.path().join("out");
    let mut cfg = config(&data, &out);
    cfg.mapping.iters_per_frame = 2;
    cmd_run(&cfg).unwrap();
    let err = cmd_eval(&out, &dir.path().join("nope.txt"), false).unwrap_err();
    assert!(matches!(err, PipelineError::MissingArtifacts(_)), "{err}");
}
