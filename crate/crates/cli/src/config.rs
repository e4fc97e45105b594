//! Run configuration: a TOML file with flag overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use cfl_replay::coordination::CoordinationParams;
use cfl_replay::qp::SolverOptions;
use cfl_replay::sim::SimConfig;
use cfl_replay::strategies::StrategySpec;
use cfl_replay::synthetic::MixtureConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; when present it must name the subcommand being run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Master seed; 0 when absent.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub solver: SolverOptions,
    pub bench: BenchSection,
    pub simulate: SimConfig,
    pub coordination: CoordinationSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub d: usize,
    /// Selection budget.
    #[serde(rename = "N")]
    pub budget: usize,
    /// Pool sizes; one benchmark per entry.
    pub n: Vec<usize>,
    pub trials: usize,
    pub poisson_rate: f64,
    /// Strategy labels, e.g. `greedy_gss` or `fixed_proportion@0.3`.
    pub strategies: Vec<String>,
}

impl Default for BenchSection {
    fn default() -> Self {
        let m = MixtureConfig::default();
        BenchSection {
            d: m.d,
            budget: m.budget,
            n: vec![10, 30, 50],
            trials: m.trials,
            poisson_rate: m.poisson_rate,
            strategies: ["naive_uniform", "greedy_gss", "relaxed_convex", "relaxed_nonconvex"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl BenchSection {
    pub fn mixture(&self, n: usize, seed: u64) -> MixtureConfig {
        MixtureConfig { d: self.d, n, budget: self.budget, trials: self.trials, poisson_rate: self.poisson_rate, seed }
    }

    pub fn strategy_specs(&self) -> Result<Vec<StrategySpec>, CliError> {
        self.strategies
            .iter()
            .map(|s| s.parse().map_err(|e| CliError::Config(format!("bench.strategies: {e}"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinationSection {
    pub max_rounds: u32,
    pub tol: f64,
    /// Clients the server waits for.
    pub clients: usize,
    pub bind: String,
    pub connect: String,
    pub client_id: Option<String>,
    /// GSET file with the client's gradients.
    pub gradients: Option<PathBuf>,
    /// The client's budget `N_m`.
    #[serde(rename = "N")]
    pub budget: usize,
    pub timeout_secs: u64,
}

impl Default for CoordinationSection {
    fn default() -> Self {
        CoordinationSection {
            max_rounds: CoordinationParams::default().max_rounds,
            tol: CoordinationParams::default().tol,
            clients: 2,
            bind: "127.0.0.1:7070".into(),
            connect: "127.0.0.1:7070".into(),
            client_id: None,
            gradients: None,
            budget: 5,
            timeout_secs: 30,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    /// Pins the seed so the recorded config reproduces the run: the master
    /// seed wins, then `simulate.seed`, then 0.
    pub fn resolve_seed(&mut self) {
        let seed = self.seed.unwrap_or(self.simulate.seed);
        self.seed = Some(seed);
        self.simulate.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn coordination_params(&self) -> CoordinationParams {
        CoordinationParams {
            max_rounds: self.coordination.max_rounds,
            tol: self.coordination.tol,
            solver: self.solver.clone(),
        }
    }

    /// The simulation grid with the master seed (when set) and solver applied.
    pub fn sim_config(&self) -> SimConfig {
        let mut sim = self.simulate.clone();
        sim.seed = self.seed.unwrap_or(sim.seed);
        sim.replay.solver = self.solver.clone();
        sim
    }

    /// Checks everything the given subcommand will use.
    pub fn validate(&self, command: &str) -> Result<(), CliError> {
        if let Some(c) = &self.command {
            if c != command {
                return Err(CliError::Config(format!("config is for `{c}`, not `{command}`")));
            }
        }
        if self.jobs == Some(0) {
            return Err(CliError::Config("jobs must be at least 1".into()));
        }
        let s = &self.solver;
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if s.max_iters == 0 || s.stall_iters == 0 || !positive(s.tolerance) || !positive(s.stationarity_tol) {
            return Err(CliError::Config("solver: max_iters, stall_iters and tolerances must be positive".into()));
        }
        match command {
            "bench-selection" => {
                if self.bench.n.is_empty() {
                    return Err(CliError::Config("bench.n is empty".into()));
                }
                for &n in &self.bench.n {
                    self.bench.mixture(n, self.seed()).validate().map_err(|e| CliError::Config(format!("bench: {e}")))?;
                }
                self.bench.strategy_specs()?;
            }
            "simulate" => {
                self.sim_config().validate().map_err(|e| CliError::Config(format!("simulate: {e}")))?;
            }
            "coord-serve" => {
                if self.coordination.clients == 0 {
                    return Err(CliError::Config("coordination.clients must be at least 1".into()));
                }
            }
            "coord-client" => {
                if self.coordination.client_id.is_none() {
                    return Err(CliError::Config("coord-client needs a client id".into()));
                }
                if self.coordination.gradients.is_none() {
                    return Err(CliError::Config("coord-client needs a gradients file".into()));
                }
                if self.coordination.budget == 0 {
                    return Err(CliError::Config("coordination.N must be at least 1".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}
