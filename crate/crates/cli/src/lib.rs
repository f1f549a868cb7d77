//! Command-line driver for the synthvision pipeline.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 1 for
//! failures while running a stage.

use std::io::Write as _;
use std::path::PathBuf;

use anyhow::Context as _;
use clap::{Parser, Subcommand};
use synthvision_core::pipeline::{
    self, Overrides, PipelineError, PipelineOutcome, Profile, Run, Stage,
};

pub mod server;

#[derive(Debug, Parser)]
#[command(name = "synthvision", version = synthvision_core::VERSION, about = "Synthetic-data bootstrap for binary image classifiers")]
pub struct Cli {
    /// Optional only together with `--print-config`.
    #[command(subcommand)]
    pub command: Option<Command>,
    /// JSON config file, overlaid on the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    /// Global seed; per-section seeds follow it unless set in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Redo stages that already completed in the run directory.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Print the resolved config as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the procedural guide, real and corpus images (toy data only).
    Prepare,
    /// Train or import the base diffusion model.
    Pretrain,
    /// Fine-tune on the guide images (runs prepare/pretrain first if needed).
    Finetune,
    /// Sample the prompt campaign.
    Generate,
    /// Serve the review API until interrupted.
    Curate {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Assemble the train/val/test manifest.
    BuildDataset,
    /// Train the classifier.
    Train,
    /// Predict on the test split and write the report.
    Evaluate,
    /// Run every remaining stage, resuming after the last completed one.
    Pipeline,
}

/// Failure classified for the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let usage = error.chain().any(|e| {
            e.downcast_ref::<PipelineError>()
                .is_some_and(PipelineError::is_usage)
        });
        Self {
            code: if usage { 2 } else { 1 },
            error,
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn overrides(cli: &Cli) -> Overrides {
    Overrides {
        profile: cli.profile,
        seed: cli.seed,
        data_root: None,
    }
}

fn report(stage: Stage, summary: &serde_json::Value) {
    println!("{stage}: {summary}");
}

/// Execute a parsed command line.
pub fn run(cli: Cli) -> Result<(), Failure> {
    let config = pipeline::load_config(cli.config.as_deref(), overrides(&cli))?;
    if cli.print_config {
        let text = serde_json::to_string_pretty(&config).context("serializing config")?;
        return match writeln!(std::io::stdout(), "{text}") {
            Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                Err(anyhow::Error::from(e).into())
            }
            _ => Ok(()),
        };
    }
    let Some(command) = cli.command else {
        return Err(Failure {
            code: 2,
            error: anyhow::anyhow!("a subcommand is required (see --help)"),
        });
    };
    let single = |stage| -> Result<(), Failure> {
        let mut run = Run::open(config.clone())?;
        report(stage, &run.run_stage(stage, cli.overwrite)?);
        Ok(())
    };
    match command {
        Command::Prepare => single(Stage::Prepare),
        Command::Pretrain => single(Stage::Base),
        Command::Finetune => {
            let mut run = Run::open(config.clone())?;
            for setup in [Stage::Prepare, Stage::Base] {
                let needed = setup != Stage::Prepare || config.data.toy.is_some();
                if needed && !run.state().is_done(setup) {
                    report(setup, &run.run_stage(setup, false)?);
                }
            }
            report(
                Stage::Finetune,
                &run.run_stage(Stage::Finetune, cli.overwrite)?,
            );
            Ok(())
        }
        Command::Generate => single(Stage::Generate),
        Command::Curate { host, port } => {
            let host = host.unwrap_or_else(|| config.curation.host.clone());
            let port = port.unwrap_or(config.curation.port);
            let run = Run::open(config)?;
            if run.state().is_done(Stage::Curate) && !cli.overwrite {
                return Err(PipelineError::AlreadyExists(Stage::Curate).into());
            }
            if cli.overwrite {
                let dir = run.config.stage_dir(Stage::Curate);
                if dir.exists() {
                    std::fs::remove_dir_all(&dir).context("clearing curate directory")?;
                }
            }
            let service = run.curation_service()?;
            let state = server::AppState {
                service,
                finalizer: server::Finalizer::Run(Box::new(run)),
            };
            serve(state, &host, port).map_err(Failure::from)
        }
        Command::BuildDataset => single(Stage::BuildDataset),
        Command::Train => single(Stage::Train),
        Command::Evaluate => single(Stage::Evaluate),
        Command::Pipeline => {
            let mut run = Run::open(config)?;
            match run.run_all(cli.overwrite)? {
                PipelineOutcome::Completed { ran, skipped } => {
                    println!("pipeline complete (ran {ran:?}, skipped {skipped:?})");
                    if let Some(s) = run.state().summary(Stage::Evaluate) {
                        report(Stage::Evaluate, s);
                    }
                }
                PipelineOutcome::AwaitingCuration { ran, .. } => {
                    println!(
                        "pipeline paused before curation (ran {ran:?}); review with `synthvision curate`, then rerun `synthvision pipeline`"
                    );
                }
            }
            Ok(())
        }
    }
}

fn serve(state: server::AppState, host: &str, port: u16) -> anyhow::Result<()> {
    let rt = tokio::runtime::Runtime::new().context("starting async runtime")?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        println!(
            "curation service listening on http://{}",
            listener.local_addr()?
        );
        axum::serve(listener, server::router(state))
            .with_graceful_shutdown(shutdown_signal())
            .await
            .context("serving")
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
    log::info!("shutting down");
}
