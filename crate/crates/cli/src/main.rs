use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

mod commands;
mod config;
mod output;

use config::RunConfig;

/// Replay-buffer sample selection: benchmarks, simulations and coordination sessions.
#[derive(Debug, Parser)]
#[command(name = "cfl-replay", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Selection-quality benchmark against the brute-force optimum.
    BenchSelection {
        #[command(flatten)]
        common: CommonArgs,
        /// Pool sizes, comma separated.
        #[arg(long, value_delimiter = ',')]
        n: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        /// Selection budget.
        #[arg(long)]
        budget: Option<usize>,
        /// Strategy labels, comma separated.
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
    },
    /// Federated simulation grid over strategies, buffer sizes and seeds.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seeds: Option<usize>,
        /// Replay strategy labels, comma separated (e.g. `naive_uniform,coordinated@1`).
        #[arg(long, value_delimiter = ',')]
        strategies: Option<Vec<String>>,
        /// Buffer sizes, comma separated; 0 always runs.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Transport for coordinated strategies: in_process, memory or tcp.
        #[arg(long)]
        transport: Option<String>,
    },
    /// Coordination server: waits for clients over TCP and runs one session.
    CoordServe {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        bind: Option<String>,
        /// Number of clients to wait for.
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        max_rounds: Option<u32>,
        #[arg(long)]
        timeout_secs: Option<u64>,
    },
    /// Coordination client: joins a server with a GSET gradient file.
    CoordClient {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        connect: Option<String>,
        #[arg(long)]
        client_id: Option<String>,
        /// GSET file holding this client's unit gradient columns.
        #[arg(long)]
        gradients: Option<PathBuf>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        timeout_secs: Option<u64>,
    },
    /// Mean and std over seeds of simulation CSVs.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        /// Simulation CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: logical CPU count).
    #[arg(long)]
    jobs: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<cfl_replay::Error> for CliError {
    fn from(e: cfl_replay::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

fn parse_list<T: std::str::FromStr>(field: &str, items: &[String]) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    items
        .iter()
        .map(|s| s.parse().map_err(|e| CliError::Config(format!("{field}: {e}"))))
        .collect()
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Loads the file and applies the flags shared by every command.
fn base_config(name: &str, common: &CommonArgs) -> Result<RunConfig, CliError> {
    init_logging(common.verbose);
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    if common.out.is_some() {
        cfg.out = common.out.clone();
    }
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if common.jobs.is_some() {
        cfg.jobs = common.jobs;
    }
    cfg.resolve_seed();
    log::debug!("running {name}");
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, cfg, inputs) = match cli.command {
        Command::BenchSelection { common, n, trials, budget, strategies } => {
            let mut cfg = base_config("bench-selection", &common)?;
            if let Some(n) = n {
                cfg.bench.n = n;
            }
            if let Some(t) = trials {
                cfg.bench.trials = t;
            }
            if let Some(b) = budget {
                cfg.bench.budget = b;
            }
            if let Some(s) = strategies {
                cfg.bench.strategies = s;
            }
            ("bench-selection", cfg, Vec::new())
        }
        Command::Simulate { common, seeds, strategies, budgets, transport } => {
            let mut cfg = base_config("simulate", &common)?;
            if let Some(k) = seeds {
                cfg.simulate.seeds = k;
            }
            if let Some(s) = strategies {
                cfg.simulate.strategies = parse_list("--strategies", &s)?;
            }
            if let Some(b) = budgets {
                cfg.simulate.budgets = b;
            }
            if let Some(t) = transport {
                cfg.simulate.replay.transport = serde_json::from_value(serde_json::Value::String(t.clone()))
                    .map_err(|_| CliError::Config(format!("--transport: unknown transport `{t}`")))?;
            }
            ("simulate", cfg, Vec::new())
        }
        Command::CoordServe { common, bind, clients, max_rounds, timeout_secs } => {
            let mut cfg = base_config("coord-serve", &common)?;
            let c = &mut cfg.coordination;
            c.bind = bind.unwrap_or(c.bind.clone());
            c.clients = clients.unwrap_or(c.clients);
            c.max_rounds = max_rounds.unwrap_or(c.max_rounds);
            c.timeout_secs = timeout_secs.unwrap_or(c.timeout_secs);
            ("coord-serve", cfg, Vec::new())
        }
        Command::CoordClient { common, connect, client_id, gradients, budget, timeout_secs } => {
            let mut cfg = base_config("coord-client", &common)?;
            let c = &mut cfg.coordination;
            c.connect = connect.unwrap_or(c.connect.clone());
            c.client_id = client_id.or(c.client_id.take());
            c.gradients = gradients.or(c.gradients.take());
            c.budget = budget.unwrap_or(c.budget);
            c.timeout_secs = timeout_secs.unwrap_or(c.timeout_secs);
            ("coord-client", cfg, Vec::new())
        }
        Command::Report { common, inputs } => ("report", base_config("report", &common)?, inputs),
    };
    cfg.validate(name)?;
    if let Some(jobs) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    match name {
        "bench-selection" => commands::bench_selection(&cfg),
        "simulate" => commands::simulate(&cfg),
        "coord-serve" => commands::coord_serve(&cfg),
        "coord-client" => commands::coord_client(&cfg),
        _ => commands::report(&cfg, &inputs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
