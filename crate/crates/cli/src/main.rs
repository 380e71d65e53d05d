use std::io::Write;
use std::path::PathBuf;

use atdm_cli::{commands, load_config, server};
use atdm_core::pipeline::RunStore;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atdm", version, about = "Freeway ATDM engine: simulate, assimilate, recommend")]
struct Cli {
    /// Pipeline config JSON; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the fundamental diagram from counter data.
    CalibrateFd {
        #[arg(long)]
        data: PathBuf,
        /// Use counters before this minute (default: all).
        #[arg(long)]
        now: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic twin dataset with known parameters.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// SyntheticSpec JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate behaviour parameters and the current vehicle state.
    Assimilate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        now: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one cycle and print the per-orientation selections.
    Recommend {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        now: Option<usize>,
        /// Directory for the full run record and predicted fields.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a cycle every cadence over the dataset's replay period.
    Replay {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Serve the HTTP API; the address comes from ATDM_LISTEN.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = load_config(cli.config.as_deref())?;
    let text = match cli.cmd {
        Cmd::CalibrateFd { data, now, out } => commands::calibrate_fd(&data, &cfg, now, out.as_deref())?,
        Cmd::Synth { out, spec, seed } => commands::synth(&out, spec.as_deref(), seed, &cfg)?,
        Cmd::Assimilate { data, now, out } => commands::assimilate(&data, &cfg, now, out.as_deref())?,
        Cmd::Recommend { data, now, out } => commands::recommend(&data, &cfg, now, out.as_deref())?,
        Cmd::Replay { data, store } => commands::replay(&data, &cfg, &store)?,
        Cmd::Serve { data, store } => {
            let addr = std::env::var(server::LISTEN_ENV).unwrap_or_else(|_| server::DEFAULT_LISTEN.into());
            let state = server::start(RunStore::open(store)?, data, cfg)?;
            tokio::runtime::Runtime::new()?.block_on(server::serve(state, &addr))?;
            return Ok(());
        }
    };
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
