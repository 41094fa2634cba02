use clap::{Args, Parser, Subcommand};
use ligsm_core::pipeline::{
    cmd_eval, cmd_overlay, cmd_render, cmd_run, cmd_synth, format_evaluation, ExtrinsicSource, PipelineConfig, PipelineError,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// LiDAR-assisted trajectory, extrinsic and Gaussian splat mapping.
#[derive(Debug, Parser)]
#[command(name = "ligsm", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate poses and extrinsic, build the map, write the run directory.
    Run {
        /// Dataset directory (overrides the config file).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate a synthetic dataset.
    Synth {
        /// World spec TOML; the default world when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Score a run directory against a ground-truth trajectory.
    Eval {
        /// Run directory; defaults to --out or the configured output.
        run_dir: Option<PathBuf>,
        /// Ground-truth trajectory in TUM format.
        #[arg(long)]
        gt: PathBuf,
        /// Align with a similarity transform instead of a rigid one.
        #[arg(long)]
        sim3: bool,
    },
    /// Draw a frame's LiDAR points over its image.
    Overlay {
        /// Frame index after striding.
        #[arg(long)]
        frame: usize,
        /// `initial`, `optimized` or a calibration file.
        #[arg(long, default_value = "optimized")]
        extrinsic: ExtrinsicSource,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Render a map checkpoint from arbitrary poses.
    Render {
        #[arg(long)]
        map: PathBuf,
        /// Camera poses in TUM format.
        #[arg(long)]
        poses: PathBuf,
        /// Calibration file providing the intrinsics.
        #[arg(long)]
        calib: PathBuf,
    },
}

fn load_config(g: &GlobalArgs, dataset: Option<PathBuf>) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
    if let Some(d) = dataset {
        cfg.dataset.path = d;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    let g = &cli.global;
    match cli.command {
        Command::Run { dataset } => {
            let cfg = load_config(g, dataset)?;
            let s = cmd_run(&cfg)?;
            let r = &s.manifest.results;
            println!("output {}", s.out_dir.display());
            println!("frames: {}", r.frames);
            println!("outer_iterations: {}", r.outer_iterations);
            println!("extrinsic_converged: {}", r.extrinsic_converged);
            println!("splats: {}", r.splats);
            if let Some(a) = r.ate_m {
                println!("ate_rmse_m: {a:.6e}");
            }
            println!("psnr_db: {:.3}", r.psnr_mean);
            println!("ssim: {:.4}", r.ssim_mean);
            println!("depth_l1_m: {:.5}", r.depth_l1_mean);
        }
        Command::Synth { spec } => {
            let cfg = load_config(g, None)?;
            let out = g.out.clone().unwrap_or_else(|| cfg.dataset.path.clone());
            let world = cmd_synth(spec.as_deref(), cfg.seed, &out)?;
            println!("wrote {} frames to {}", world.gt_trajectory.len(), out.display());
        }
        Command::Eval { run_dir, gt, sim3 } => {
            let cfg = load_config(g, None)?;
            let dir = run_dir.unwrap_or(cfg.output.dir);
            let (row, e) = cmd_eval(&dir, &gt, sim3)?;
            print!("{}", format_evaluation(&row, &e));
        }
        Command::Overlay { frame, extrinsic, dataset } => {
            let cfg = load_config(g, dataset)?;
            let (path, _) = cmd_overlay(&cfg, frame, &extrinsic)?;
            println!("wrote {}", path.display());
        }
        Command::Render { map, poses, calib } => {
            let cfg = load_config(g, None)?;
            let dir = cfg.output.dir.join("renders");
            let n = cmd_render(&map, &poses, &calib, &dir, &cfg.raster_config(), cfg.output.depth_png_scale)?;
            println!("rendered {n} views into {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.global.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
