//! Desk-scale continual federated learning.
//!
//! A logistic-regression model is trained with FedAvg over a sequence of
//! periods. After each period every client refills its replay buffer from
//! the period's data plus the old buffer, and the buffer joins the next
//! period's local training set.

mod data;
mod metrics;
mod model;
mod report;

pub use data::{client_name, gen_drift_data, ClientTimeline, Dataset, DriftData, SyntheticDriftConfig};
pub use metrics::{forgetting_factor, rcp};
pub use model::{param_count, per_sample_gradients, ModelParams};
pub use report::{summarize_rows, SimRow, SummaryRow, ALL_PERIODS};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coordination::{ClientSelectionState, CoordinationParams};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, hash_str, map_range};
use crate::qp::SolverOptions;
use crate::selection::{GradientSet, ReplaySelection, SampleId};
use crate::strategies::{select, BufferUpdateInput, StrategySpec};
use crate::transport::{run_coordination_over, TransportKind, DEFAULT_TIMEOUT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedAvgOptions {
    /// Local epochs per round.
    pub epochs: usize,
    /// FedAvg rounds per period.
    pub rounds: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for FedAvgOptions {
    fn default() -> Self {
        FedAvgOptions { epochs: 1, rounds: 5, lr: 0.1, batch_size: 32 }
    }
}

impl FedAvgOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// One client's training set for a round and the seed for its batch order.
#[derive(Clone, Debug)]
pub struct LocalData {
    pub data: Dataset,
    pub seed: u64,
}

/// Mini-batch gradient descent on one client's data, starting from `w`.
pub fn local_train(w: &ModelParams, local: &LocalData, opts: &FedAvgOptions, round_seed: u64) -> Result<ModelParams> {
    let mut model = w.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(round_seed, local.seed));
    let mut order: Vec<usize> = (0..local.data.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            model.step(&local.data, batch, opts.lr);
        }
    }
    if model.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged(format!(
            "local training produced non-finite weights (lr {}, {} samples)",
            opts.lr,
            local.data.len()
        )));
    }
    Ok(model)
}

/// One FedAvg round: every client trains a copy of `w`; the result is the
/// sample-count weighted average of the returned models.
pub fn fedavg_round(w: &ModelParams, clients: &[LocalData], opts: &FedAvgOptions, round_seed: u64) -> Result<ModelParams> {
    let total: usize = clients.iter().map(|c| c.data.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("FedAvg round without training samples".into()));
    }
    let trained = map_range(clients.len(), |m| local_train(w, &clients[m], opts, round_seed));
    let mut avg = vec![0.0; w.dim()];
    for (local, model) in clients.iter().zip(trained) {
        let model = model?;
        let coef = local.data.len() as f64 / total as f64;
        for (a, v) in avg.iter_mut().zip(&model.weights) {
            *a += coef * v;
        }
    }
    ModelParams::from_weights(w.features, w.classes, avg)
}

/// Runs `opts.rounds` FedAvg rounds from `w_prev` on each client's period-`t`
/// data (0-based) joined with its replay buffer.
pub fn train_period(
    w_prev: &ModelParams,
    t: usize,
    timelines: &[ClientTimeline],
    buffers: &[Dataset],
    opts: &FedAvgOptions,
    seed: u64,
) -> Result<ModelParams> {
    if buffers.len() != timelines.len() {
        return Err(Error::DimensionMismatch { expected: timelines.len(), got: buffers.len() });
    }
    let clients = timelines
        .iter()
        .zip(buffers)
        .map(|(c, buf)| {
            let period = c.periods.get(t).ok_or_else(|| Error::InvalidArgument(format!("no period {t}")))?;
            Ok(LocalData { data: period.concat(buf)?, seed: hash_str(&c.client_id) })
        })
        .collect::<Result<Vec<_>>>()?;
    let period_seed = derive_seed(seed, t as u64);
    let mut w = w_prev.clone();
    for r in 0..opts.rounds {
        w = fedavg_round(&w, &clients, opts, derive_seed(period_seed, r as u64))?;
    }
    Ok(w)
}

/// How clients refill their buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReplayStrategy {
    Uncoordinated(StrategySpec),
    /// Server-coordinated selection with this many coordination rounds.
    Coordinated { rounds: u32 },
}

impl ReplayStrategy {
    pub fn label(&self) -> String {
        match self {
            ReplayStrategy::Uncoordinated(spec) => spec.label(),
            ReplayStrategy::Coordinated { rounds } => format!("coordinated@{rounds}"),
        }
    }

    pub fn needs_gradients(&self) -> bool {
        match self {
            ReplayStrategy::Uncoordinated(spec) => spec.kind.uses_gradients(),
            ReplayStrategy::Coordinated { .. } => true,
        }
    }
}

impl fmt::Display for ReplayStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ReplayStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("coordinated@") {
            Some(k) => k
                .parse()
                .map(|rounds| ReplayStrategy::Coordinated { rounds })
                .map_err(|_| Error::InvalidArgument(format!("bad round count in `{s}`"))),
            None if s == "coordinated" => Ok(ReplayStrategy::Coordinated { rounds: 4 }),
            None => s.parse().map(ReplayStrategy::Uncoordinated),
        }
    }
}

impl TryFrom<String> for ReplayStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReplayStrategy> for String {
    fn from(s: ReplayStrategy) -> String {
        s.label()
    }
}

/// Settings shared by every buffer update in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayOptions {
    /// Not read from config files; callers set it from their solver options.
    #[serde(skip)]
    pub solver: SolverOptions,
    /// Stopping tolerance for coordinated selection; its round count comes from the strategy.
    pub coordination_tol: f64,
    pub transport: TransportKind,
    pub timeout_secs: u64,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        ReplayOptions {
            solver: SolverOptions::default(),
            coordination_tol: CoordinationParams::default().tol,
            transport: TransportKind::InProcess,
            timeout_secs: DEFAULT_TIMEOUT.as_secs(),
        }
    }
}

/// What one client contributes to a buffer update.
#[derive(Clone, Debug)]
pub struct ClientReplayInput {
    pub client_id: String,
    pub new_ids: Vec<SampleId>,
    pub buffer_ids: Vec<SampleId>,
    /// Samples seen in all earlier periods.
    pub n_past: usize,
    pub gradients: Option<GradientSet>,
}

/// Chooses every client's next buffer. `seed` should differ per period.
pub fn replay_update(
    strategy: &ReplayStrategy,
    inputs: &[ClientReplayInput],
    budget: usize,
    seed: u64,
    opts: &ReplayOptions,
) -> Result<Vec<ReplaySelection>> {
    if budget == 0 {
        return Ok(vec![ReplaySelection::default(); inputs.len()]);
    }
    match strategy {
        ReplayStrategy::Uncoordinated(spec) => map_range(inputs.len(), |m| {
            let c = &inputs[m];
            let input = BufferUpdateInput {
                new_ids: c.new_ids.clone(),
                buffer_ids: c.buffer_ids.clone(),
                n_new: c.new_ids.len(),
                n_past: c.n_past,
                budget,
                gradients: c.gradients.as_ref(),
            };
            let spec = StrategySpec { seed: derive_seed(spec.seed ^ seed, 0), ..spec.clone() }.for_client(&c.client_id);
            select(&spec, &input, &opts.solver)
        })
        .into_iter()
        .collect(),
        ReplayStrategy::Coordinated { rounds } => {
            let states = inputs
                .iter()
                .map(|c| {
                    let g = c.gradients.clone().ok_or(Error::MissingGradients("coordinated"))?;
                    ClientSelectionState::new(c.client_id.clone(), g, budget, opts.solver.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            let params = CoordinationParams { max_rounds: *rounds, tol: opts.coordination_tol, solver: opts.solver.clone() };
            let timeout = Duration::from_secs(opts.timeout_secs.max(1));
            let (mut selections, _) = run_coordination_over(opts.transport, states, &params, timeout)?;
            inputs
                .iter()
                .map(|c| {
                    selections
                        .remove(&c.client_id)
                        .ok_or_else(|| Error::Protocol(format!("no selection for {}", c.client_id)))
                })
                .collect()
        }
    }
}

/// Test metric of every end-of-period model on every period's test set.
#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    /// `per_period[t][p]`: model after period `t` on test set `p`.
    pub per_period: Vec<Vec<f64>>,
    /// Model after period `t` on all test sets pooled.
    pub pooled: Vec<f64>,
    /// Buffer size of every client after every period.
    pub buffer_sizes: Vec<Vec<usize>>,
}

impl SimTrace {
    pub fn final_metric(&self, period: usize) -> f64 {
        self.per_period.last().map_or(f64::NAN, |row| row[period])
    }

    /// Forgetting on period `p`'s test set over the models trained on or after `p`.
    pub fn forgetting(&self, period: usize) -> Option<f64> {
        let history: Vec<f64> = self.per_period[period..].iter().map(|row| row[period]).collect();
        forgetting_factor(&history).ok()
    }

    /// Mean forgetting over every period that has one.
    pub fn mean_forgetting(&self) -> Option<f64> {
        let values: Vec<f64> = (0..self.per_period.len()).filter_map(|p| self.forgetting(p)).collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// One continual-learning run: `T` periods of FedAvg with buffers of size `budget`.
pub fn simulate_run(
    data: &DriftData,
    strategy: &ReplayStrategy,
    budget: usize,
    fedavg: &FedAvgOptions,
    replay: &ReplayOptions,
    seed: u64,
) -> Result<SimTrace> {
    fedavg.validate()?;
    let features = data.test_sets.first().map_or(0, Dataset::feature_dim);
    let classes = data
        .clients
        .iter()
        .map(|c| c.class_prior.len())
        .max()
        .ok_or_else(|| Error::InvalidArgument("no clients".into()))?;
    let periods = data.test_sets.len();
    let pooled_test = data.pooled_test_set()?;

    let mut w = ModelParams::zeros(features, classes);
    let mut buffers: Vec<Dataset> = vec![Dataset::empty(features); data.clients.len()];
    let mut n_past = vec![0usize; data.clients.len()];
    let mut trace = SimTrace { per_period: Vec::new(), pooled: Vec::new(), buffer_sizes: Vec::new() };

    for t in 0..periods {
        w = train_period(&w, t, &data.clients, &buffers, fedavg, seed)?;
        let metrics = map_range(periods, |p| w.perplexity(&data.test_sets[p])).into_iter().collect::<Result<_>>()?;
        trace.per_period.push(metrics);
        trace.pooled.push(w.perplexity(&pooled_test)?);

        if t + 1 < periods && budget > 0 {
            let pools: Vec<Dataset> = data
                .clients
                .iter()
                .zip(&buffers)
                .map(|(c, buf)| c.periods[t].concat(buf))
                .collect::<Result<_>>()?;
            let needs_gradients = strategy.needs_gradients();
            let inputs = map_range(data.clients.len(), |m| -> Result<ClientReplayInput> {
                let c = &data.clients[m];
                let gradients = needs_gradients.then(|| per_sample_gradients(&w, &pools[m])).transpose()?;
                Ok(ClientReplayInput {
                    client_id: c.client_id.clone(),
                    new_ids: c.periods[t].ids.clone(),
                    buffer_ids: buffers[m].ids.clone(),
                    n_past: n_past[m],
                    gradients,
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let chosen = replay_update(strategy, &inputs, budget, derive_seed(seed, 1000 + t as u64), replay)?;
            for (m, sel) in chosen.iter().enumerate() {
                buffers[m] = pools[m].select_ids(&sel.chosen);
            }
        }
        for (m, c) in data.clients.iter().enumerate() {
            n_past[m] += c.periods[t].len();
        }
        trace.buffer_sizes.push(buffers.iter().map(Dataset::len).collect());
    }
    Ok(trace)
}

/// A full experiment grid: strategies x budgets x seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub data: SyntheticDriftConfig,
    pub fedavg: FedAvgOptions,
    pub replay: ReplayOptions,
    pub strategies: Vec<ReplayStrategy>,
    /// Buffer sizes; the `N = 0` baseline always runs.
    pub budgets: Vec<usize>,
    /// Number of seeds; seed `k` drives both data and training of every run in its group.
    pub seeds: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            data: SyntheticDriftConfig::default(),
            fedavg: FedAvgOptions::default(),
            replay: ReplayOptions::default(),
            strategies: vec![
                "naive_uniform".parse().expect("valid label"),
                "relaxed_nonconvex".parse().expect("valid label"),
                ReplayStrategy::Coordinated { rounds: 1 },
            ],
            budgets: vec![0, 5, 20],
            seeds: 3,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.fedavg.validate()?;
        if self.seeds == 0 {
            return Err(Error::InvalidArgument("seeds must be at least 1".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::InvalidArgument("no strategies configured".into()));
        }
        Ok(())
    }

    /// Nonzero budgets, ascending, without duplicates.
    pub fn replay_budgets(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self.budgets.iter().copied().filter(|&n| n > 0).collect();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// Runs executed by [`run_grid`]: one baseline plus one per strategy and nonzero budget, per seed.
    pub fn run_count(&self) -> usize {
        self.seeds * (1 + self.strategies.len() * self.replay_budgets().len())
    }

    pub fn seed_for(&self, k: usize) -> u64 {
        derive_seed(self.seed, k as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub rows: Vec<SimRow>,
    pub runs: usize,
}

/// Runs the grid. Every (strategy, N) is compared to the `N = 0` run of the
/// same seed; baseline rows are repeated under every strategy label.
pub fn run_grid(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let budgets = cfg.replay_budgets();
    // (seed index, strategy index, budget); strategy None is the baseline
    let mut jobs: Vec<(usize, Option<usize>, usize)> = Vec::with_capacity(cfg.run_count());
    for k in 0..cfg.seeds {
        jobs.push((k, None, 0));
        for s in 0..cfg.strategies.len() {
            for &n in &budgets {
                jobs.push((k, Some(s), n));
            }
        }
    }
    let datasets = map_range(cfg.seeds, |k| {
        gen_drift_data(&SyntheticDriftConfig { seed: cfg.seed_for(k), ..cfg.data.clone() })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let baseline_strategy = ReplayStrategy::Uncoordinated(StrategySpec::new(crate::strategies::StrategyKind::NaiveUniform, 0));
    let traces = map_range(jobs.len(), |j| {
        let (k, s, n) = jobs[j];
        let strategy = s.map_or(&baseline_strategy, |s| &cfg.strategies[s]);
        simulate_run(&datasets[k], strategy, n, &cfg.fedavg, &cfg.replay, cfg.seed_for(k))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let mut baselines: BTreeMap<usize, &SimTrace> = BTreeMap::new();
    for (job, trace) in jobs.iter().zip(&traces) {
        if job.1.is_none() {
            baselines.insert(job.0, trace);
        }
    }
    let mut rows = Vec::new();
    for (s, strategy) in cfg.strategies.iter().enumerate() {
        let label = strategy.label();
        let mut all_budgets = budgets.clone();
        all_budgets.insert(0, 0);
        for &n in &all_budgets {
            for k in 0..cfg.seeds {
                let base = baselines[&k];
                let trace = if n == 0 {
                    base
                } else {
                    let j = jobs.iter().position(|job| *job == (k, Some(s), n)).expect("job scheduled");
                    &traces[j]
                };
                rows.extend(report::trace_rows(&label, n, cfg.seed_for(k), trace, base)?);
            }
        }
    }
    Ok(SimReport { config: cfg.clone(), rows, runs: jobs.len() })
}
