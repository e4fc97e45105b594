//! Selection-quality benchmark on synthetic Gaussian-mixture gradients.
//!
//! Each trial draws one instance, finds the exact optimum of the discrete
//! objective by enumeration, and scores every strategy against it.

use ndarray::Array2;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{derive_seed, map_range};
use crate::qp::SolverOptions;
use crate::selection::{gram, normalize_columns, numbered_ids, objective_discrete_indices, GradientSet};
use crate::strategies::{select, BufferUpdateInput, StrategyKind, StrategySpec};

/// Largest number of subsets [`brute_force_optimum`] will enumerate.
pub const MAX_SUBSETS: u128 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    /// Gradient dimension.
    pub d: usize,
    /// Samples per instance.
    pub n: usize,
    /// Selection budget.
    pub budget: usize,
    pub trials: usize,
    /// Mean of the Poisson draw for the extra mixture components.
    pub poisson_rate: f64,
    pub seed: u64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig { d: 300, n: 50, budget: 5, trials: 5000, poisson_rate: 4.0, seed: 0 }
    }
}

impl MixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 || self.budget == 0 {
            return Err(Error::InvalidArgument("d, n and budget must be positive".into()));
        }
        if self.budget > self.n {
            return Err(Error::Infeasible { budget: self.budget, available: self.n });
        }
        if self.trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        if !(self.poisson_rate > 0.0 && self.poisson_rate.is_finite()) {
            return Err(Error::InvalidArgument("poisson_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        derive_seed(self.seed, trial as u64)
    }
}

/// Draws the raw `d x n` mixture sample, standardized per dimension across
/// samples but not yet unit-normalized per column.
pub fn gen_mixture_raw(cfg: &MixtureConfig, trial_seed: u64) -> Result<Array2<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let poisson = Poisson::new(cfg.poisson_rate).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let extra: f64 = poisson.sample(&mut rng);
    let n_c = extra as usize + 1;

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    // centers: n_c x d, standardized per dimension across centers
    let mut centers = Array2::from_shape_simple_fn((n_c, cfg.d), || std_normal.sample(&mut rng));
    standardize_rows_axis(&mut centers, n_c >= 2);

    let weights: Vec<f64> = if n_c >= 2 {
        // flat Dirichlet as normalized Exp(1) draws
        let raw: Vec<f64> = (0..n_c).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    } else {
        vec![1.0]
    };
    let component = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut samples = Array2::zeros((cfg.n, cfg.d));
    for i in 0..cfg.n {
        let k = component.sample(&mut rng);
        for j in 0..cfg.d {
            samples[[i, j]] = centers[[k, j]] + std_normal.sample(&mut rng);
        }
    }
    standardize_rows_axis(&mut samples, true);
    Ok(samples.reversed_axes().as_standard_layout().to_owned())
}

/// For every column, subtracts the mean over rows and (when `scale` and the
/// spread is non-zero) divides by the population standard deviation.
fn standardize_rows_axis(m: &mut Array2<f64>, scale: bool) {
    let rows = m.nrows() as f64;
    for mut col in m.columns_mut() {
        let mean = col.sum() / rows;
        col.mapv_inplace(|v| v - mean);
        if scale {
            let std = (col.dot(&col) / rows).sqrt();
            if std > 0.0 {
                col.mapv_inplace(|v| v / std);
            }
        }
    }
}

/// One unit-normalized synthetic instance.
pub fn gen_mixture_gradients(cfg: &MixtureConfig, trial_seed: u64) -> Result<GradientSet> {
    let raw = gen_mixture_raw(cfg, trial_seed)?;
    normalize_columns(raw.view(), numbered_ids("g", cfg.n))
}

/// `C(n, k)` with saturation.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

#[derive(Clone, Debug, PartialEq)]
pub struct BruteForce {
    /// Optimal column indices, ascending.
    pub indices: Vec<usize>,
    pub objective: f64,
    /// Number of `k`-subsets evaluated.
    pub evaluated: u64,
}

/// Exhaustive minimum of the discrete objective over all `budget`-subsets.
///
/// Ties resolve to the lexicographically first subset.
pub fn brute_force_optimum(g: &GradientSet, budget: usize, include_diagonal: bool) -> Result<BruteForce> {
    let n = g.count();
    if budget == 0 || budget > n {
        return Err(Error::Infeasible { budget, available: n });
    }
    let count = binomial(n, budget);
    if count > MAX_SUBSETS {
        return Err(Error::TooManySubsets { n, k: budget, count, limit: MAX_SUBSETS });
    }
    let q = gram(g, false);
    let mut search = Enumerator {
        q: &q,
        n,
        k: budget,
        diag: include_diagonal,
        current: Vec::with_capacity(budget),
        best: None,
        evaluated: 0,
    };
    search.descend(0, 0.0);
    let (indices, _) = search.best.take().expect("at least one subset");
    let objective = objective_discrete_indices(g, &indices, include_diagonal);
    Ok(BruteForce { indices, objective, evaluated: search.evaluated })
}

struct Enumerator<'a> {
    q: &'a crate::selection::GramMatrix,
    n: usize,
    k: usize,
    diag: bool,
    current: Vec<usize>,
    best: Option<(Vec<usize>, f64)>,
    evaluated: u64,
}

impl Enumerator<'_> {
    fn descend(&mut self, start: usize, partial: f64) {
        if self.current.len() == self.k {
            self.evaluated += 1;
            if self.best.as_ref().is_none_or(|(_, b)| partial < *b) {
                self.best = Some((self.current.clone(), partial));
            }
            return;
        }
        let remaining = self.k - self.current.len();
        for j in start..=(self.n - remaining) {
            let mut add = 0.0;
            for &i in &self.current {
                add += self.q.get(i, j);
            }
            let mut value = partial + 2.0 * add;
            if self.diag {
                value += self.q.get(j, j);
            }
            self.current.push(j);
            self.descend(j + 1, value);
            self.current.pop();
        }
    }
}

/// The strategies compared by default: random, greedy and both relaxations.
pub fn default_strategies() -> Vec<StrategySpec> {
    [StrategyKind::NaiveUniform, StrategyKind::GreedyGss, StrategyKind::RelaxedConvex, StrategyKind::RelaxedNonconvex]
        .into_iter()
        .map(|k| StrategySpec::new(k, 0))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub strategy: String,
    pub objective: f64,
    pub optimum: f64,
    pub gap: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub mean_objective: f64,
    pub mean_gap: f64,
    pub median_gap: f64,
    pub mean_ratio: f64,
    pub median_ratio: f64,
    /// Gap quantiles at 10, 25, 75 and 90 percent.
    pub gap_quantiles: [f64; 4],
    /// Trials where the strategy matched the optimum (gap <= 1e-9).
    pub optimal_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub config: MixtureConfig,
    pub strategies: Vec<String>,
    /// Trial-major: all strategies of trial 0, then trial 1, ...
    pub records: Vec<TrialRecord>,
    pub summary: Vec<StrategySummary>,
    pub mean_optimum: f64,
}

impl BenchResult {
    pub fn summary_for(&self, strategy: &str) -> Option<&StrategySummary> {
        self.summary.iter().find(|s| s.strategy == strategy)
    }
}

/// Runs `cfg.trials` independent trials (in parallel when enabled).
pub fn run_selection_benchmark(
    cfg: &MixtureConfig,
    strategies: &[StrategySpec],
    solver: &SolverOptions,
) -> Result<BenchResult> {
    cfg.validate()?;
    for s in strategies {
        s.validate()?;
    }
    let labels: Vec<String> = strategies.iter().map(StrategySpec::label).collect();
    let per_trial = map_range(cfg.trials, |trial| run_trial(cfg, strategies, &labels, solver, trial));
    let mut records = Vec::with_capacity(cfg.trials * strategies.len());
    let mut optimum_sum = 0.0;
    for trial in per_trial {
        let trial = trial?;
        optimum_sum += trial.first().map_or(0.0, |r| r.optimum);
        records.extend(trial);
    }
    let summary = labels.iter().map(|l| summarize(l, &records)).collect();
    Ok(BenchResult {
        config: cfg.clone(),
        strategies: labels,
        records,
        summary,
        mean_optimum: optimum_sum / cfg.trials as f64,
    })
}

fn run_trial(
    cfg: &MixtureConfig,
    strategies: &[StrategySpec],
    labels: &[String],
    solver: &SolverOptions,
    trial: usize,
) -> Result<Vec<TrialRecord>> {
    let seed = cfg.trial_seed(trial);
    let g = gen_mixture_gradients(cfg, seed)?;
    let best = brute_force_optimum(&g, cfg.budget, true)?;
    let input = BufferUpdateInput::from_gradients(&g, cfg.budget);
    strategies
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(s_idx, (spec, label))| {
            let spec = StrategySpec { seed: derive_seed(seed ^ spec.seed, s_idx as u64 + 1), ..spec.clone() };
            let sel = select(&spec, &input, solver)?;
            let idx = sel.indices_in(&g)?;
            let objective = objective_discrete_indices(&g, &idx, true);
            Ok(TrialRecord {
                trial,
                strategy: label.clone(),
                objective,
                optimum: best.objective,
                gap: objective - best.objective,
                ratio: objective / best.objective,
            })
        })
        .collect()
}

fn summarize(label: &str, records: &[TrialRecord]) -> StrategySummary {
    let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.strategy == label).collect();
    let count = rows.len().max(1) as f64;
    let mut gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
    let mut ratios: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    gaps.sort_by(f64::total_cmp);
    ratios.sort_by(f64::total_cmp);
    StrategySummary {
        strategy: label.to_owned(),
        mean_objective: rows.iter().map(|r| r.objective).sum::<f64>() / count,
        mean_gap: gaps.iter().sum::<f64>() / count,
        median_gap: quantile(&gaps, 0.5),
        mean_ratio: ratios.iter().sum::<f64>() / count,
        median_ratio: quantile(&ratios, 0.5),
        gap_quantiles: [quantile(&gaps, 0.1), quantile(&gaps, 0.25), quantile(&gaps, 0.75), quantile(&gaps, 0.9)],
        optimal_fraction: gaps.iter().filter(|g| **g <= 1e-9).count() as f64 / count,
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}
