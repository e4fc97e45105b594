use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{rcp, SimTrace};
use crate::error::{Error, Result};

/// `eval_period` value of the rows that aggregate over every test set.
pub const ALL_PERIODS: &str = "all";

/// One line of a run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub budget: usize,
    pub seed: u64,
    /// 1-based period number, or `all`.
    pub eval_period: String,
    /// Final model's `exp(mean cross-entropy)` on this period's test set.
    pub metric: f64,
    pub rcp: f64,
    /// Empty for the last period, which only one model has seen.
    pub forgetting: Option<f64>,
}

pub(super) fn trace_rows(strategy: &str, budget: usize, seed: u64, trace: &SimTrace, base: &SimTrace) -> Result<Vec<SimRow>> {
    let periods = trace.per_period.len();
    let mut rows = Vec::with_capacity(periods + 1);
    for p in 0..periods {
        let metric = trace.final_metric(p);
        rows.push(SimRow {
            strategy: strategy.to_owned(),
            budget,
            seed,
            eval_period: (p + 1).to_string(),
            metric,
            rcp: rcp(metric, base.final_metric(p))?,
            forgetting: trace.forgetting(p),
        });
    }
    let metric = *trace.pooled.last().ok_or_else(|| Error::InvalidArgument("empty trace".into()))?;
    let base_metric = *base.pooled.last().ok_or_else(|| Error::InvalidArgument("empty baseline".into()))?;
    rows.push(SimRow {
        strategy: strategy.to_owned(),
        budget,
        seed,
        eval_period: ALL_PERIODS.to_owned(),
        metric,
        rcp: rcp(metric, base_metric)?,
        forgetting: trace.mean_forgetting(),
    });
    Ok(rows)
}

/// Mean and population standard deviation over seeds for one
/// (strategy, N, period) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub budget: usize,
    pub eval_period: String,
    pub runs: usize,
    pub metric_mean: f64,
    pub metric_std: f64,
    pub rcp_mean: f64,
    pub rcp_std: f64,
    /// None when no row in the cell has a forgetting value.
    pub forgetting_mean: Option<f64>,
    pub forgetting_std: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by (strategy, N, eval_period) in first-seen order of strategy,
/// ascending N, and periods `1..T` followed by `all`.
pub fn summarize_rows(rows: &[SimRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no report rows to summarize".into()));
    }
    let mut strategy_order: Vec<&str> = Vec::new();
    for r in rows {
        if !strategy_order.contains(&r.strategy.as_str()) {
            strategy_order.push(&r.strategy);
        }
    }
    let period_key = |p: &str| -> (u8, usize) {
        match p.parse::<usize>() {
            Ok(n) => (0, n),
            Err(_) => (1, 0),
        }
    };
    // (strategy order, N, period sort key, period label)
    type Cell = (usize, usize, (u8, usize), String);
    let mut cells: BTreeMap<Cell, Vec<&SimRow>> = BTreeMap::new();
    for r in rows {
        let s = strategy_order.iter().position(|s| *s == r.strategy).expect("seen");
        cells.entry((s, r.budget, period_key(&r.eval_period), r.eval_period.clone())).or_default().push(r);
    }
    Ok(cells
        .into_iter()
        .map(|((s, budget, _, eval_period), cell)| {
            let metrics: Vec<f64> = cell.iter().map(|r| r.metric).collect();
            let rcps: Vec<f64> = cell.iter().map(|r| r.rcp).collect();
            let forgetting: Vec<f64> = cell.iter().filter_map(|r| r.forgetting).collect();
            let (metric_mean, metric_std) = mean_std(&metrics);
            let (rcp_mean, rcp_std) = mean_std(&rcps);
            let (forgetting_mean, forgetting_std) = if forgetting.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&forgetting);
                (Some(m), Some(s))
            };
            SummaryRow {
                strategy: strategy_order[s].to_owned(),
                budget,
                eval_period,
                runs: cell.len(),
                metric_mean,
                metric_std,
                rcp_mean,
                rcp_std,
                forgetting_mean,
                forgetting_std,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, period: &str, rcp: f64) -> SimRow {
        SimRow {
            strategy: "naive_uniform".into(),
            budget: 5,
            seed,
            eval_period: period.into(),
            metric: 2.0,
            rcp,
            forgetting: Some(0.5),
        }
    }

    #[test]
    fn two_seeds_population_std() {
        let s = summarize_rows(&[row(0, "all", -0.1), row(1, "all", -0.2)]).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].rcp_mean + 0.15).abs() < 1e-12);
        assert!((s[0].rcp_std - 0.05).abs() < 1e-12);
        assert_eq!(s[0].runs, 2);
    }

    #[test]
    fn single_run_has_zero_std() {
        let s = summarize_rows(&[row(0, "1", -0.3)]).unwrap();
        assert_eq!((s[0].rcp_std, s[0].metric_std, s[0].forgetting_std), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn periods_sort_numerically_then_all() {
        let rows: Vec<SimRow> = ["all", "10", "2", "1"].iter().map(|p| row(0, p, 0.0)).collect();
        let s = summarize_rows(&rows).unwrap();
        let order: Vec<&str> = s.iter().map(|r| r.eval_period.as_str()).collect();
        assert_eq!(order, ["1", "2", "10", "all"]);
    }

    #[test]
    fn empty_is_an_error() {
        assert!(summarize_rows(&[]).is_err());
    }
}
