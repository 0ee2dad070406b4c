//! `scmii` — split multi-LiDAR 3D detection pipeline.
//!
//! Subcommands: `gen-scene`, `calibrate`, `run`, `serve`, `edge`, `bench`,
//! `eval`. Exit codes: 0 success, 1 domain error, 2 usage error. Logging via
//! `SCMII_LOG={error,warn,info,debug}`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_config, PipelineConfig};
use scmii_core::fusion::FusionMethodName;

#[derive(Parser)]
#[command(name = "scmii", version, about = "Split multi-LiDAR 3D detection over edge devices")]
struct Cli {
    /// Pipeline config JSON.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Scene seed override.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Number of devices/sensors (scene mode).
    #[arg(long, global = true, value_name = "N")]
    devices: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-sensor scene to disk.
    GenScene,
    /// Estimate sensor extrinsics by NDT scan matching on frame 0.
    Calibrate,
    /// Run the full pipeline over the simulated link and write reports.
    Run {
        /// Integration method override.
        #[arg(long, value_enum)]
        fusion: Option<FusionArg>,
        /// Frame barrier timeout in milliseconds.
        #[arg(long, value_name = "N")]
        timeout_ms: Option<f64>,
    },
    /// Server role over real stream sockets.
    Serve {
        #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:0")]
        listen: String,
        #[arg(long, value_name = "N")]
        timeout_ms: Option<f64>,
    },
    /// Edge role over real stream sockets.
    Edge {
        #[arg(long, value_name = "HOST:PORT")]
        connect: String,
        #[arg(long, value_name = "N")]
        device_id: u16,
    },
    /// Sweep link/cost grids and emit CSV + JSON timing tables.
    Bench,
    /// Score a detections file against a generated scene directory.
    Eval {
        /// detections.json written by `run` or `serve`.
        detections: PathBuf,
        /// Directory written by `gen-scene`.
        scene_dir: PathBuf,
    },
}

#[derive(Copy, Clone, PartialEq, Eq, clap::ValueEnum)]
enum FusionArg {
    Max,
    Concat1,
    Concat3,
}

impl From<FusionArg> for FusionMethodName {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Max => FusionMethodName::Max,
            FusionArg::Concat1 => FusionMethodName::Concat1,
            FusionArg::Concat3 => FusionMethodName::Concat3,
        }
    }
}

fn main() -> ExitCode {
    let mut logger = env_logger::Builder::new();
    logger.parse_filters(&std::env::var("SCMII_LOG").unwrap_or_else(|_| "warn".into()));
    let _ = logger.try_init();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config: PipelineConfig = match &cli.config {
        Some(path) => load_config(path)?,
        None => PipelineConfig::default(),
    };
    commands::apply_overrides(&mut config, cli.seed, cli.devices)?;
    let out = commands::out_dir(&config, cli.out.clone());

    match cli.command {
        Command::GenScene => commands::gen_scene_cmd(config, &out),
        Command::Calibrate => commands::calibrate_cmd(config, &out),
        Command::Run { fusion, timeout_ms } => {
            commands::run_cmd(config, &out, fusion.map(Into::into), timeout_ms)
        }
        Command::Serve { listen, timeout_ms } => {
            commands::serve_cmd(config, &out, &listen, timeout_ms)
        }
        Command::Edge { connect, device_id } => commands::edge_cmd(config, &connect, device_id),
        Command::Bench => {
            let bench = config.bench.clone();
            commands::bench_cmd(config, &out, &bench)
        }
        Command::Eval {
            detections,
            scene_dir,
        } => commands::eval_cmd(&detections, &scene_dir, Some(&out)),
    }
}
