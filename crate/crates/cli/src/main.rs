use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynsplat::config::PipelineConfig;
use dynsplat::dataset::synthetic::{generate_synthetic, DeskScene, NoiseSpec};
use dynsplat::dataset::trajectory::read_trajectory;
use dynsplat::dataset::tum::{write_sequence, DEFAULT_ASSOCIATION_TOLERANCE};
use dynsplat::eval::{align_and_ate, write_ate_report};
use dynsplat::pipeline::{open_input, read_scene_spec, run_pipeline, write_flow_csv, write_outputs};
use dynsplat::Error;

#[derive(Parser)]
#[command(name = "dynsplat", version, about = "Gaussian-splatting RGB-D SLAM with dynamic-object filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// TUM-layout dataset directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Synthetic scene description (JSON), used when no dataset is given.
    #[arg(long)]
    synthetic_spec: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Extra `key=value` settings, applied after the file and the flags above.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn config(&self) -> dynsplat::Result<PipelineConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset={p}"));
        }
        if let Some(p) = &self.dataset {
            overrides.push(format!("dataset={}", p.display()));
        }
        if let Some(p) = &self.synthetic_spec {
            overrides.push(format!("synthetic_spec={}", p.display()));
        }
        if let Some(p) = &self.output {
            overrides.push(format!("output={}", p.display()));
        }
        overrides.extend(self.overrides.iter().cloned());
        match &self.config {
            Some(path) => PipelineConfig::load(path, &overrides),
            None => PipelineConfig::parse("", Path::new("<flags>"), &overrides),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a sequence, writing trajectory, renders, metrics, flows and a summary.
    Run(RunArgs),
    /// Align an estimated trajectory to ground truth and report the ATE.
    Eval {
        #[arg(long)]
        estimated: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Directory receiving ate.txt and ate_errors.csv.
        #[arg(long, default_value = ".")]
        output: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ASSOCIATION_TOLERANCE)]
        tolerance: f64,
    },
    /// Render a synthetic scene into a TUM-layout dataset.
    Synth {
        /// Scene description (JSON). Without it the built-in desk scene is used.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Desk-scene variant (textures, motion and arc direction).
        #[arg(long, default_value_t = 0)]
        variant: u64,
        /// Keep the desk scene's box still.
        #[arg(long)]
        still: bool,
        #[arg(long)]
        frames: Option<usize>,
        /// Also write the desk scene description next to the dataset.
        #[arg(long)]
        write_spec: bool,
    },
    /// Run tracking and write only the per-object loss flows.
    DumpFlows {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Config(_) | Error::Image { .. } => 2,
        _ => 1,
    }
}

fn run(args: &RunArgs) -> dynsplat::Result<()> {
    let cfg = args.config()?;
    let input = open_input(&cfg)?;
    let depth_scale = input.intrinsics.depth_scale;
    let report = run_pipeline(input, &cfg)?;
    write_outputs(&report, &cfg, depth_scale, &cfg.output)?;
    match &report.ate {
        Some(a) => println!("{} frames, ATE rmse {:.6} m, std {:.6} m", report.frames.len(), a.rmse, a.std),
        None => println!("{} frames, no ground truth", report.frames.len()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Eval {
            estimated,
            groundtruth,
            output,
            tolerance,
        } => (|| {
            let est = read_trajectory(estimated)?;
            let gt = read_trajectory(groundtruth)?;
            let report = align_and_ate(&est, &gt, *tolerance)?;
            std::fs::create_dir_all(output).map_err(|e| Error::Io {
                path: output.clone(),
                source: e,
            })?;
            write_ate_report(&output.join("ate.txt"), &output.join("ate_errors.csv"), &report)?;
            println!("ATE rmse {:.6} m, std {:.6} m over {} poses", report.rmse, report.std, report.errors.len());
            Ok(())
        })(),
        Command::Synth {
            spec,
            out,
            seed,
            variant,
            still,
            frames,
            write_spec,
        } => (|| {
            let spec = match spec {
                Some(p) => read_scene_spec(p)?,
                None => {
                    let mut desk = DeskScene {
                        variant: *variant,
                        noise: NoiseSpec::default(),
                        ..DeskScene::default()
                    };
                    if *still {
                        desk.mover_travel = 0.0;
                    }
                    if let Some(n) = frames {
                        desk.frame_count = *n;
                    }
                    desk.build()
                }
            };
            let seq = generate_synthetic(&spec, *seed)?;
            write_sequence(out, &seq)?;
            if *write_spec {
                let p = out.join("scene.json");
                let text = serde_json::to_string_pretty(&spec).expect("scene spec serializes");
                std::fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?;
            }
            println!("wrote {} frames to {}", seq.frames.len(), out.display());
            Ok(())
        })(),
        Command::DumpFlows { run, out } => (|| {
            let cfg = run.config()?;
            let report = run_pipeline(open_input(&cfg)?, &cfg)?;
            write_flow_csv(out, &report.flows)
        })(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
