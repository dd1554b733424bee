use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use timefork_cli::{run_script_file, HttpBackend, RunOptions};
use timefork_core::agents::{CompletionClient, HttpCompletionClient, LlmMode};
use timefork_core::branchstore::LlmSettings;
use timefork_core::lab::Lab;
use timefork_server::ServerConfig;

#[derive(Parser)]
#[command(name = "timefork", version, about = "Branchable multi-agent market simulations: inject, fork, compare")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment script.
    Run {
        script: PathBuf,
        /// Persist simulations here (default: in memory).
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Override the seed of every `create`.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for reports and exports.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Language-model transcripts: record or replay.
        #[arg(long, default_value = "record")]
        mode: LlmMode,
        /// Drive a running service instead of an embedded store.
        #[arg(long)]
        server: Option<String>,
    },
    /// Start the HTTP service (settings also read from TIMEFORK_* variables).
    Serve {
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        mode: Option<LlmMode>,
    },
}

fn llm_settings(mode: LlmMode) -> LlmSettings {
    LlmSettings {
        mode,
        client: HttpCompletionClient::from_env().map(|c| Arc::new(c) as Arc<dyn CompletionClient>),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Cmd::Run {
            script,
            data_dir,
            seed,
            out,
            mode,
            server,
        } => {
            let opts = RunOptions {
                seed,
                out_dir: out,
                script_dir: script.parent().map(PathBuf::from).unwrap_or_default(),
            };
            let mut stdout = std::io::stdout();
            let result = match server {
                Some(url) => run_script_file(&HttpBackend::new(url), &script, &opts, &mut stdout),
                None => {
                    let lab = match &data_dir {
                        Some(dir) => Lab::open(dir, llm_settings(mode)),
                        None => Ok(Lab::in_memory(llm_settings(mode))),
                    };
                    match lab {
                        Ok(lab) => run_script_file(&lab, &script, &opts, &mut stdout),
                        Err(e) => {
                            eprintln!("error: {e}");
                            return ExitCode::from(2);
                        }
                    }
                }
            };
            match result {
                Ok(outcome) => {
                    for (alias, b) in &outcome.branches {
                        println!("{alias}\t{}\thead {}\t{}", b.branch_id, b.head_tick, b.head_hash);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Cmd::Serve { listen, data_dir, mode } => {
            let mut config = match ServerConfig::from_env() {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(l) = listen {
                config.listen = l;
            }
            if let Some(d) = data_dir {
                config.data_dir = Some(d);
            }
            if let Some(m) = mode {
                config.llm_mode = m;
            }
            match serve(config) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            }
        }
    }
}

fn serve(config: ServerConfig) -> Result<(), Box<dyn std::error::Error>> {
    let lab = Arc::new(config.build_lab()?);
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(config.listen).await?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        eprintln!("timefork listening on http://{}", listener.local_addr()?);
        timefork_server::serve(listener, lab).await?;
        Ok(())
    })
}
