use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cfl_replay::coordination::ClientSelectionState;
use cfl_replay::gset;
use cfl_replay::sim::{run_grid, summarize_rows, SimRow, SummaryRow};
use cfl_replay::synthetic::run_selection_benchmark;
use cfl_replay::transport::{connect_client, serve_coordination};
use serde_json::json;

use crate::config::RunConfig;
use crate::output::{ensure_dir, header_lines, read_csv, write_csv, write_json};
use crate::CliError;

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

pub fn bench_selection(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let header = header_lines("bench-selection", cfg)?;
    let specs = cfg.bench.strategy_specs()?;
    let mut written = Vec::new();
    let mut per_n = Vec::new();
    for &n in &cfg.bench.n {
        let mix = cfg.bench.mixture(n, cfg.seed());
        log::info!("benchmark n={n}, {} trials", mix.trials);
        let result = run_selection_benchmark(&mix, &specs, &cfg.solver)?;
        println!("n = {n} (mean optimum {:.6})", result.mean_optimum);
        for s in &result.summary {
            println!(
                "  {:<20} mean gap {:>10.6}  median gap {:>10.6}  optimal {:>5.1}%",
                s.strategy,
                s.mean_gap,
                s.median_gap,
                100.0 * s.optimal_fraction
            );
        }
        written.push(write_csv(&out.join(format!("bench_n{n}.csv")), &header, &result.records)?);
        per_n.push(json!({
            "n": n,
            "mean_optimum": result.mean_optimum,
            "strategies": result.summary,
        }));
    }
    let summary = json!({
        "command": "bench-selection",
        "seed": cfg.seed(),
        "config": cfg,
        "results": per_n,
    });
    written.push(write_json(&out.join("bench_summary.json"), &summary)?);
    announce(&written);
    Ok(())
}

fn print_summary(rows: &[SummaryRow]) {
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
    println!(
        "{:<22} {:>4} {:>6} {:>5} {:>22} {:>22}",
        "strategy", "N", "period", "runs", "rcp (mean +- std)", "forgetting (mean +- std)"
    );
    for r in rows {
        println!(
            "{:<22} {:>4} {:>6} {:>5} {:>11.4} +- {:<7.4} {:>11} +- {:<7}",
            r.strategy,
            r.budget,
            r.eval_period,
            r.runs,
            r.rcp_mean,
            r.rcp_std,
            opt(r.forgetting_mean),
            opt(r.forgetting_std)
        );
    }
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let sim = cfg.sim_config();
    log::info!("simulating {} runs", sim.run_count());
    let report = run_grid(&sim)?;
    let summary = summarize_rows(&report.rows)?;
    print_summary(&summary);
    let header = header_lines("simulate", cfg)?;
    let written = vec![
        write_csv(&out.join("simulate.csv"), &header, &report.rows)?,
        write_json(
            &out.join("simulate_summary.json"),
            &json!({
                "command": "simulate",
                "seed": cfg.seed(),
                "config": cfg,
                "runs": report.runs,
                "summary": summary,
            }),
        )?,
    ];
    announce(&written);
    Ok(())
}

pub fn report(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<(), CliError> {
    let mut rows: Vec<SimRow> = Vec::new();
    for path in inputs {
        let part: Vec<SimRow> = read_csv(path)?;
        if part.is_empty() {
            return Err(CliError::Runtime(format!("{}: no rows", path.display())));
        }
        rows.extend(part);
    }
    let summary = summarize_rows(&rows)?;
    print_summary(&summary);
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let inputs: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
    let header = format!("{}# inputs: {}\n", header_lines("report", cfg)?, inputs.join(","));
    let written = vec![write_csv(&out.join("report_summary.csv"), &header, &summary)?];
    announce(&written);
    Ok(())
}

fn timeout(cfg: &RunConfig) -> Duration {
    Duration::from_secs(cfg.coordination.timeout_secs)
}

pub fn coord_serve(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.coordination;
    log::info!("waiting for {} clients on {}", c.clients, c.bind);
    let report = serve_coordination(c.bind.as_str(), c.clients, &cfg.coordination_params(), timeout(cfg))?;
    println!(
        "{} rounds, converged: {}, coordinated objective {:?}",
        report.rounds_run, report.converged, report.coordinated_objective_per_round
    );
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let path = write_json(
        &out.join("coord_report.json"),
        &json!({ "command": "coord-serve", "seed": cfg.seed(), "config": cfg, "report": report }),
    )?;
    announce(&[path]);
    Ok(())
}

fn read_gradients(path: &Path) -> Result<cfl_replay::selection::GradientSet, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    gset::read_from(&mut BufReader::new(file)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn coord_client(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.coordination;
    let id = c.client_id.clone().expect("validated");
    let g = read_gradients(c.gradients.as_deref().expect("validated"))?;
    let state = ClientSelectionState::new(id.clone(), g, c.budget, cfg.solver.clone())?;
    let selection = connect_client(&c.connect, state, timeout(cfg))?;
    let chosen: Vec<&str> = selection.chosen.iter().map(|s| s.as_str()).collect();
    println!("{id}: {}", chosen.join(" "));
    let out = cfg.out_dir();
    ensure_dir(&out)?;
    let path = write_json(
        &out.join(format!("selection_{id}.json")),
        &json!({ "command": "coord-client", "seed": cfg.seed(), "config": cfg, "client_id": id, "chosen": chosen }),
    )?;
    announce(&[path]);
    Ok(())
}
