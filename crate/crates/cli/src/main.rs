use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparsesplat_cli::config::{InpainterChoice, PipelineConfig, PoseNoise};
use sparsesplat_cli::pipeline::{self, Stage};
use sparsesplat_cli::scene;
use sparsesplat_cli::synth::{synth_scene, SceneKind, SynthSpec};

/// Sparse-view, pose-free scene reconstruction: coarse alignment of pairwise
/// pointmaps, confidence-aware depth alignment, warp-and-inpaint novel-view
/// supervision, and joint optimization of camera poses and a Gaussian-splat
/// model.
#[derive(Parser)]
#[command(name = "sparsesplat", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with analytic ground truth.
    Synth(SynthArgs),
    /// Validate a scene directory and print a summary.
    IngestCheck {
        /// Scene directory.
        scene: PathBuf,
    },
    /// Run the full pipeline on a scene.
    Run(RunArgs),
    /// Re-evaluate an existing run against its scene.
    Eval {
        /// Run directory produced by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Scene directory the run was built from.
        #[arg(long)]
        scene: PathBuf,
    },
    /// Render a smooth novel trajectory from a finished run as PNG frames.
    Render {
        /// Run directory produced by `run`.
        #[arg(long)]
        run: PathBuf,
        /// Output directory for the frames.
        #[arg(long)]
        out: PathBuf,
        /// Number of frames.
        #[arg(long, default_value_t = 60)]
        frames: usize,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = SceneKind::BoxRoom)]
    scene: SceneKind,
    #[arg(long, default_value_t = 3)]
    views: usize,
    #[arg(long, default_value_t = 2)]
    test_views: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 72)]
    height: usize,
    #[arg(long, default_value_t = 86.0)]
    focal: f64,
    /// Pair grids are generated at this fraction of the image resolution.
    #[arg(long, default_value_t = 1.0)]
    pair_scale: f64,
    /// Log-range of per-edge pointmap scales (product renormalized to 1).
    #[arg(long, default_value_t = 0.5)]
    edge_scale_spread: f64,
    /// Mono depth is scale/depth + shift.
    #[arg(long, default_value_t = 2.0)]
    mono_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    mono_shift: f64,
    /// Additive uniform pointmap noise.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Fraction of pair pixels corrupted (depth x10, confidence 0.01).
    #[arg(long, default_value_t = 0.0)]
    corrupt: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Output run directory.
    #[arg(long)]
    out: PathBuf,
    /// Configuration file; defaults to the scene's own config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from this stage, reusing persisted outputs of earlier ones.
    #[arg(long, value_enum)]
    skip_to: Option<Stage>,
    /// Override the random seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the novel poses per training segment.
    #[arg(long)]
    k_p: Option<usize>,
    /// Override the confidence-mask fraction.
    #[arg(long)]
    top_p: Option<f64>,
    /// Override the mask-clean window.
    #[arg(long)]
    mask_window: Option<usize>,
    /// Override the coarse step count.
    #[arg(long)]
    coarse_steps: Option<usize>,
    /// Override the fine step count.
    #[arg(long)]
    fine_steps: Option<usize>,
    /// Use an external inpainting command instead of the builtin diffusion
    /// filler (invoked as `CMD image.png mask.png out.png`).
    #[arg(long)]
    inpaint_cmd: Option<String>,
    /// Inject pose noise after coarse construction: degrees of rotation.
    #[arg(long)]
    pose_noise_deg: Option<f64>,
    /// Injected translation noise as a fraction of the scene diameter.
    #[arg(long)]
    pose_noise_frac: Option<f64>,
}

fn merged_config(args: &RunArgs) -> anyhow::Result<PipelineConfig> {
    let path = args
        .config
        .clone()
        .unwrap_or_else(|| args.scene.join("config.json"));
    let mut config = PipelineConfig::load(&path)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.k_p.is_some() {
        config.k_p = args.k_p;
    }
    if let Some(p) = args.top_p {
        config.top_p = p;
    }
    if let Some(w) = args.mask_window {
        config.mask_clean_window = w;
    }
    if let Some(s) = args.coarse_steps {
        config.schedule.coarse_steps = s;
    }
    if let Some(s) = args.fine_steps {
        config.schedule.fine_steps = s;
    }
    if let Some(cmd) = &args.inpaint_cmd {
        config.inpainter = InpainterChoice::External {
            command: cmd.clone(),
        };
    }
    if args.pose_noise_deg.is_some() || args.pose_noise_frac.is_some() {
        config.init_pose_noise = Some(PoseNoise {
            rotation_deg: args.pose_noise_deg.unwrap_or(0.0),
            translation_frac: args.pose_noise_frac.unwrap_or(0.0),
        });
    }
    config.validate()?;
    Ok(config)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(args) => {
            let spec = SynthSpec {
                kind: args.scene,
                n_views: args.views,
                n_test_views: args.test_views,
                width: args.width,
                height: args.height,
                focal: args.focal,
                pair_scale: args.pair_scale,
                edge_scale_spread: args.edge_scale_spread,
                mono_scale: args.mono_scale,
                mono_shift: args.mono_shift,
                pointmap_noise: args.noise,
                corrupt_fraction: args.corrupt,
                seed: args.seed,
            };
            synth_scene(&args.out, &spec)?;
            println!(
                "wrote {}-view synthetic scene to {}",
                args.views,
                args.out.display()
            );
            Ok(())
        }
        Command::IngestCheck { scene: dir } => {
            let bundle = scene::ingest(&dir)?;
            print!("{}", scene::describe(&bundle));
            println!("scene ok");
            Ok(())
        }
        Command::Run(args) => {
            let config = merged_config(&args)?;
            let metrics = pipeline::run(&args.scene, &args.out, &config, args.skip_to)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Eval { run, scene: dir } => {
            let config = PipelineConfig::load(&run.join("config.json"))?;
            let metrics = pipeline::evaluate_run(&dir, &run, &config)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Render { run, out, frames } => {
            let written = pipeline::render_trajectory(&run, &out, frames)?;
            println!("wrote {written} frames to {}", out.display());
            Ok(())
        }
    }
}
