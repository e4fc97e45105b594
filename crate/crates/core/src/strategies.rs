//! Uncoordinated replay-buffer selection strategies.
//!
//! Three random baselines choose among the new period's data `X_t` and the
//! current buffer `R_t`; the gradient-based strategies minimize the summed
//! pairwise cosine similarity of the chosen samples' loss gradients.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::hash_str;
use crate::qp::{solve, QpProblem, SolverOptions};
use crate::selection::{gram, round_top_n, GradientSet, ReplaySelection, SampleId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    NaiveUniform,
    ApproxUniform,
    FixedProportion,
    GreedyGss,
    RelaxedConvex,
    RelaxedNonconvex,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::NaiveUniform,
        StrategyKind::ApproxUniform,
        StrategyKind::FixedProportion,
        StrategyKind::GreedyGss,
        StrategyKind::RelaxedConvex,
        StrategyKind::RelaxedNonconvex,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::NaiveUniform => "naive_uniform",
            StrategyKind::ApproxUniform => "approx_uniform",
            StrategyKind::FixedProportion => "fixed_proportion",
            StrategyKind::GreedyGss => "greedy_gss",
            StrategyKind::RelaxedConvex => "relaxed_convex",
            StrategyKind::RelaxedNonconvex => "relaxed_nonconvex",
        }
    }

    pub fn uses_gradients(self) -> bool {
        matches!(self, StrategyKind::GreedyGss | StrategyKind::RelaxedConvex | StrategyKind::RelaxedNonconvex)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Share of the budget drawn from new data; `fixed_proportion` only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl StrategySpec {
    pub fn new(kind: StrategyKind, seed: u64) -> Self {
        StrategySpec { kind, p: None, seed }
    }

    pub fn fixed_proportion(p: f64, seed: u64) -> Self {
        StrategySpec { kind: StrategyKind::FixedProportion, p: Some(p), seed }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.p) {
            (StrategyKind::FixedProportion, Some(p)) if p > 0.0 && p < 1.0 => Ok(()),
            (StrategyKind::FixedProportion, Some(p)) => {
                Err(Error::InvalidArgument(format!("fixed_proportion needs p in (0, 1), got {p}")))
            }
            (StrategyKind::FixedProportion, None) => Err(Error::InvalidArgument("fixed_proportion needs p".into())),
            (kind, Some(_)) => Err(Error::InvalidArgument(format!("p is only valid for fixed_proportion, not {kind}"))),
            (_, None) => Ok(()),
        }
    }

    /// Display label, e.g. `fixed_proportion@0.3`.
    pub fn label(&self) -> String {
        match self.p {
            Some(p) => format!("{}@{p}", self.kind),
            None => self.kind.to_string(),
        }
    }

    /// The same strategy with its seed replaced by `seed XOR hash(client_id)`.
    pub fn for_client(&self, client_id: &str) -> StrategySpec {
        StrategySpec { seed: client_seed(self.seed, client_id), ..self.clone() }
    }
}

/// Parses a label: a kind name, or `fixed_proportion@p`. The seed is 0.
impl FromStr for StrategySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spec = match s.split_once('@') {
            Some((kind, p)) => {
                let p: f64 = p.parse().map_err(|_| Error::InvalidArgument(format!("bad proportion in `{s}`")))?;
                StrategySpec { kind: kind.parse()?, p: Some(p), seed: 0 }
            }
            None => StrategySpec::new(s.parse()?, 0),
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn client_seed(seed: u64, client_id: &str) -> u64 {
    seed ^ hash_str(client_id)
}

/// Everything a strategy may look at when refilling a buffer.
#[derive(Clone, Debug)]
pub struct BufferUpdateInput<'a> {
    /// Ids of the current period's data `X_t`.
    pub new_ids: Vec<SampleId>,
    /// Ids currently in the buffer `R_t`.
    pub buffer_ids: Vec<SampleId>,
    /// `n_t`, the size of `X_t`.
    pub n_new: usize,
    /// `n_{<t}`, the number of samples seen in all earlier periods.
    pub n_past: usize,
    pub budget: usize,
    /// Unit gradient directions over `X_t ∪ R_t`; required by gradient-based kinds.
    pub gradients: Option<&'a GradientSet>,
}

impl<'a> BufferUpdateInput<'a> {
    /// Input where the whole pool is "new" data (no history), e.g. a one-shot selection.
    pub fn from_gradients(g: &'a GradientSet, budget: usize) -> Self {
        BufferUpdateInput {
            new_ids: g.ids().to_vec(),
            buffer_ids: Vec::new(),
            n_new: g.count(),
            n_past: 0,
            budget,
            gradients: Some(g),
        }
    }

    /// `n_{<=t}`.
    pub fn n_seen(&self) -> usize {
        self.n_new + self.n_past
    }

    pub fn pool_size(&self) -> usize {
        self.new_ids.len() + self.buffer_ids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_new != self.new_ids.len() {
            return Err(Error::DimensionMismatch { expected: self.new_ids.len(), got: self.n_new });
        }
        if self.n_past < self.buffer_ids.len() {
            return Err(Error::InvalidArgument(format!(
                "n_past = {} is smaller than the buffer ({})",
                self.n_past,
                self.buffer_ids.len()
            )));
        }
        let mut seen = HashSet::with_capacity(self.pool_size());
        for id in self.new_ids.iter().chain(&self.buffer_ids) {
            if !seen.insert(id) {
                return Err(Error::DuplicateSample(id.0.clone()));
            }
        }
        if let Some(g) = self.gradients {
            if let Some(id) = g.ids().iter().find(|id| !seen.contains(id)) {
                return Err(Error::UnknownSample(id.0.clone()));
            }
        }
        Ok(())
    }

    fn pool(&self) -> Vec<SampleId> {
        self.new_ids.iter().chain(&self.buffer_ids).cloned().collect()
    }
}

/// Runs the strategy described by `spec`.
pub fn select(spec: &StrategySpec, input: &BufferUpdateInput<'_>, solver: &SolverOptions) -> Result<ReplaySelection> {
    spec.validate()?;
    input.validate()?;
    match spec.kind {
        StrategyKind::NaiveUniform => Ok(select_naive_uniform(input, spec.seed)),
        StrategyKind::ApproxUniform => Ok(select_approx_uniform(input, spec.seed)),
        StrategyKind::FixedProportion => Ok(select_fixed_proportion(input, spec.p.unwrap_or(0.5), spec.seed)),
        StrategyKind::GreedyGss => select_greedy_gss(input),
        StrategyKind::RelaxedConvex => select_relaxed(input, false, solver),
        StrategyKind::RelaxedNonconvex => select_relaxed(input, true, solver),
    }
}

/// Uniform sample of `min(N, |pool|)` ids from `X_t ∪ R_t`.
pub fn select_naive_uniform(input: &BufferUpdateInput<'_>, seed: u64) -> ReplaySelection {
    let pool = input.pool();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = sample_sorted(&mut rng, pool.len(), input.budget.min(pool.len()));
    ReplaySelection::new(picked.into_iter().map(|i| pool[i].clone()).collect())
}

/// Draws `round(N n_t / n_{<=t})` ids from new data and the rest from the buffer.
pub fn select_approx_uniform(input: &BufferUpdateInput<'_>, seed: u64) -> ReplaySelection {
    let seen = input.n_seen();
    let target = if seen == 0 {
        0.0
    } else {
        (input.budget as f64 * input.n_new as f64 / seen as f64).round_ties_even()
    };
    split_sample(input, target, seed)
}

/// Draws `round(p N)` ids from new data and the rest from the buffer.
pub fn select_fixed_proportion(input: &BufferUpdateInput<'_>, p: f64, seed: u64) -> ReplaySelection {
    split_sample(input, (p * input.budget as f64).round_ties_even(), seed)
}

/// Per-pool counts: the new-data target is clamped to what is available, the
/// buffer takes the remainder, and any shortfall spills back to the other pool.
pub fn split_counts(budget: usize, new_target: f64, n_new: usize, n_buffer: usize) -> (usize, usize) {
    let cap_new = budget.min(n_new);
    let mut k_new = if new_target <= 0.0 { 0 } else { (new_target as usize).min(cap_new) };
    let k_old = (budget - k_new).min(n_buffer);
    let remaining = budget - k_new - k_old;
    k_new += remaining.min(n_new - k_new);
    (k_new, k_old)
}

fn split_sample(input: &BufferUpdateInput<'_>, new_target: f64, seed: u64) -> ReplaySelection {
    let (k_new, k_old) = split_counts(input.budget, new_target, input.new_ids.len(), input.buffer_ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<SampleId> = sample_sorted(&mut rng, input.new_ids.len(), k_new)
        .into_iter()
        .map(|i| input.new_ids[i].clone())
        .collect();
    chosen.extend(
        sample_sorted(&mut rng, input.buffer_ids.len(), k_old)
            .into_iter()
            .map(|i| input.buffer_ids[i].clone()),
    );
    ReplaySelection::new(chosen)
}

fn sample_sorted(rng: &mut ChaCha8Rng, len: usize, amount: usize) -> Vec<usize> {
    if amount == 0 {
        return Vec::new();
    }
    let mut v = index::sample(rng, len, amount).into_vec();
    v.sort_unstable();
    v
}

/// Forward greedy minimization of the summed pairwise cosine similarity.
///
/// Starts from the sample with the smallest mean similarity to all others,
/// then repeatedly adds the sample whose summed similarity to the already
/// chosen ones is smallest (lowest index on ties).
pub fn select_greedy_gss(input: &BufferUpdateInput<'_>) -> Result<ReplaySelection> {
    let g = input.gradients.ok_or(Error::MissingGradients("greedy_gss"))?;
    let n = g.count();
    if n <= input.budget {
        return Ok(ReplaySelection::new(g.ids().to_vec()));
    }
    let q = gram(g, true);
    let mut chosen = greedy_indices(|i, j| q.get(i, j), n, input.budget);
    chosen.sort_unstable();
    Ok(ReplaySelection::new(chosen.into_iter().map(|i| g.ids()[i].clone()).collect()))
}

/// Greedy core over an arbitrary similarity function; returns indices in pick order.
pub fn greedy_indices(sim: impl Fn(usize, usize) -> f64, n: usize, budget: usize) -> Vec<usize> {
    let budget = budget.min(n);
    if budget == 0 {
        return Vec::new();
    }
    let mean_sim = |i: usize| -> f64 {
        if n == 1 {
            return 0.0;
        }
        (0..n).filter(|&j| j != i).map(|j| sim(i, j)).sum::<f64>() / (n - 1) as f64
    };
    let first = argmin((0..n).map(|i| (i, mean_sim(i)))).expect("n >= 1");
    let mut chosen = vec![first];
    let mut taken = vec![false; n];
    taken[first] = true;
    // running sum of similarity to the chosen set
    let mut acc: Vec<f64> = (0..n).map(|i| sim(i, first)).collect();
    while chosen.len() < budget {
        let next = argmin((0..n).filter(|&i| !taken[i]).map(|i| (i, acc[i]))).expect("pool not exhausted");
        taken[next] = true;
        chosen.push(next);
        for (i, a) in acc.iter_mut().enumerate() {
            *a += sim(i, next);
        }
    }
    chosen
}

fn argmin(items: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in items {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Solves the relaxed problem over the capped simplex and keeps the top-N weights.
pub fn select_relaxed(
    input: &BufferUpdateInput<'_>,
    zero_diagonal: bool,
    solver: &SolverOptions,
) -> Result<ReplaySelection> {
    let name = if zero_diagonal { "relaxed_nonconvex" } else { "relaxed_convex" };
    let g = input.gradients.ok_or(Error::MissingGradients(name))?;
    if g.count() <= input.budget {
        return Ok(ReplaySelection::new(g.ids().to_vec()));
    }
    let q = gram(g, zero_diagonal);
    let sol = solve(&QpProblem::quadratic(&q, input.budget), solver)?;
    round_top_n(&sol.x, g.ids())
}
