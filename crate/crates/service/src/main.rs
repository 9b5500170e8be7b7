use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use streetlens_core::pipeline::{ModuleId, RunConfig, RunService};
use streetlens_service::demo;
use streetlens_service::http::{self, AppState};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "streetlens", version, about = "Street-view audit pipeline")]
struct Cli {
    /// Run store directory.
    #[arg(long, global = true, default_value = "streetlens-store")]
    store: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run from a JSON config; relative paths resolve against the
    /// config file's directory.
    Init {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample road points and fetch street imagery.
    Sample { run: String },
    /// Generate the role prompt and per-item codebook prompts.
    Tune { run: String },
    /// Score every segment on every codebook item.
    Assess { run: String },
    /// Ask the model to explain each score.
    Feedback { run: String },
    /// Compare agent scores with human codes.
    Reliability { run: String },
    /// Write report.md and report.json and print the Markdown.
    Report { run: String },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Write the synthetic demo corpus with a recorded cassette.
    DemoCorpus {
        #[arg(long, default_value = "demo-corpus")]
        out: PathBuf,
    },
}

async fn execute(service: &RunService, run: &str, module: ModuleId) -> anyhow::Result<()> {
    let state = service.execute(run, module).await?;
    println!("{}", serde_json::to_string_pretty(&state)?);
    Ok(())
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Command::DemoCorpus { out } = &cli.command {
        return demo::generate(out).await;
    }
    let service = RunService::open(&cli.store)?;
    match cli.command {
        Command::Init { config } => {
            let text = std::fs::read_to_string(&config).with_context(|| config.display().to_string())?;
            let parsed: RunConfig = serde_json::from_str(&text).context("invalid run config")?;
            let base = config.parent().map(|p| p.to_path_buf()).unwrap_or_default();
            let base = std::path::absolute(&base)?;
            let state = service.create_run(parsed, Some(&base))?;
            println!("{}", serde_json::to_string_pretty(&state)?);
        }
        Command::Sample { run } => execute(&service, &run, ModuleId::M1).await?,
        Command::Tune { run } => execute(&service, &run, ModuleId::M2).await?,
        Command::Assess { run } => execute(&service, &run, ModuleId::M3).await?,
        Command::Feedback { run } => execute(&service, &run, ModuleId::M4).await?,
        Command::Reliability { run } => execute(&service, &run, ModuleId::Reliability).await?,
        Command::Report { run } => {
            let (markdown, _) = service.report(&run, true)?;
            print!("{markdown}");
        }
        Command::Serve { addr } => {
            let state = AppState {
                service,
                base_dir: std::env::current_dir()?,
            };
            http::serve(state, addr).await?;
        }
        Command::DemoCorpus { .. } => unreachable!("handled above"),
    }
    Ok(())
}
