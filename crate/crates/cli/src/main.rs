//! `tomoseg`: command-line front end of the particle toolkit.
//!
//! Exit codes: 0 success, 2 missing input, 3 stage failure, 4 bad
//! arguments or config.

mod commands;
mod files;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Command;
use pipeline::{Manifest, PipelineConfig, PipelineError};

#[derive(Parser, Debug)]
#[command(name = "tomoseg", version, about = "Micro-CT particle segmentation and analysis")]
struct Cli {
    /// Worker threads; defaults to the hardware parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Top,
}

#[derive(Subcommand, Debug)]
enum Top {
    #[command(flatten)]
    Stage(Command),
    /// Runs the stages of a config file in order.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    config: PathBuf,
    /// Manifest path; overrides the config's `manifest` key.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn parse_stage(argv: &[String]) -> Result<Command, String> {
    let cli = Cli::try_parse_from(std::iter::once("tomoseg".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| e.to_string().trim().to_string())?;
    match cli.command {
        Top::Stage(c) => Ok(c),
        Top::Pipeline(_) => Err("pipelines cannot be nested".into()),
    }
}

fn run_pipeline(args: &PipelineArgs, threads: usize) -> Result<(), PipelineError> {
    let text = std::fs::read_to_string(&args.config).map_err(|_| PipelineError::MissingInput {
        stage: "config".into(),
        path: args.config.clone(),
    })?;
    let cfg = PipelineConfig::parse(&text)?;
    let manifest_path = args
        .manifest
        .clone()
        .or_else(|| cfg.manifest.clone())
        .unwrap_or_else(|| args.config.with_extension("manifest.txt"));
    let mut manifest = Manifest {
        threads,
        seed: cfg.seed,
        config_sha256: files::sha256(&args.config).unwrap_or_default(),
        ..Manifest::default()
    };
    let result = pipeline::plan(&cfg, parse_stage).and_then(|stages| {
        pipeline::execute(&stages, &mut manifest).inspect(|_| {
            for r in &manifest.stages {
                println!("{}: {} ({:.2} s)", r.label, r.report, r.seconds);
            }
        })
    });
    if let Err(e) = &result {
        if manifest.status.is_empty() {
            manifest.status = format!("{e}");
        }
    }
    files::write_text(&manifest_path, &manifest.to_text()).map_err(|error| PipelineError::Stage {
        stage: "manifest".into(),
        error,
    })?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(4),
            };
        }
    };
    let threads = cli.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(4);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(3);
    }
    match cli.command {
        Top::Pipeline(args) => match run_pipeline(&args, threads) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Top::Stage(cmd) => {
            if let Some(p) = cmd.inputs().into_iter().find(|p| !p.exists()) {
                eprintln!("error: missing input {}", p.display());
                return ExitCode::from(2);
            }
            match cmd.run() {
                Ok(report) => {
                    if !report.is_empty() {
                        println!("{report}");
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(3)
                }
            }
        }
    }
}
