use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread;
use std::time::Duration;

use cfl_replay::gset;
use cfl_replay::selection::{normalize_columns, numbered_ids};
use ndarray::Array2;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cfl-replay"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

const SMALL_SIM: &str = r#"
seed = 3
[simulate]
strategies = ["naive_uniform", "relaxed_nonconvex", "coordinated@1"]
budgets = [0, 5]
seeds = 2
[simulate.data]
clients = 3
periods = 3
samples_per_period = 30
[simulate.fedavg]
rounds = 2
"#;

#[test]
fn bench_smoke_writes_csv_and_summary() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["bench-selection", "--n", "8,9", "--trials", "1", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for n in [8, 9] {
        let text = fs::read_to_string(dir.path().join(format!("o/bench_n{n}.csv"))).unwrap();
        assert!(text.starts_with("# cfl-replay bench-selection"));
        assert!(text.contains("# seed: 0\n"));
        assert!(text.contains("trial,strategy,objective,optimum,gap,ratio\n"));
        // 4 default strategies, 1 trial
        assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 5);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("o/bench_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 0);
    assert_eq!(summary["results"].as_array().unwrap().len(), 2);
}

#[test]
fn infeasible_budget_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["bench-selection", "--n", "3", "--budget", "5"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), "[simulate]\nbudget = [1]\n").unwrap();
    let o = run(dir.path(), &["simulate", "--config", "c.toml"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn mismatched_command_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), "command = \"simulate\"\n").unwrap();
    let o = run(dir.path(), &["bench-selection", "--config", "c.toml", "--n", "6", "--trials", "1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn simulate_is_byte_identical_on_rerun_and_flags_win() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL_SIM).unwrap();
    let a = run(dir.path(), &["simulate", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    let first = fs::read(dir.path().join("o/simulate.csv")).unwrap();
    let b = run(dir.path(), &["simulate", "--config", "c.toml", "--out", "o", "--jobs", "1"]);
    assert_eq!(code(&b), 0);
    // --jobs is recorded in the header; the data rows must match exactly
    let strip = |bytes: &[u8]| -> String {
        String::from_utf8_lossy(bytes).lines().filter(|l| !l.starts_with("# config")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(strip(&first), strip(&fs::read(dir.path().join("o/simulate.csv")).unwrap()));
    let c = run(dir.path(), &["simulate", "--config", "c.toml", "--out", "o"]);
    assert_eq!(code(&c), 0);
    assert_eq!(first, fs::read(dir.path().join("o/simulate.csv")).unwrap());

    let text = String::from_utf8(first).unwrap();
    assert!(text.contains("# seed: 3\n"));
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "strategy,N,seed,eval_period,metric,rcp,forgetting");
    // 3 strategies x 2 budgets x 2 seeds x (3 periods + all)
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 2 * 2 * 4);

    let d = run(dir.path(), &["simulate", "--config", "c.toml", "--out", "p", "--seed", "4"]);
    assert_eq!(code(&d), 0);
    let other = fs::read_to_string(dir.path().join("p/simulate.csv")).unwrap();
    assert!(other.contains("# seed: 4\n"));
    assert_ne!(strip(text.as_bytes()), strip(other.as_bytes()));
}

#[test]
fn simulate_over_tcp_matches_in_process() {
    let dir = TempDir::new().unwrap();
    let cfg = SMALL_SIM.replace("seeds = 2", "seeds = 1").replace(
        "strategies = [\"naive_uniform\", \"relaxed_nonconvex\", \"coordinated@1\"]",
        "strategies = [\"coordinated@1\"]",
    );
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "c.toml", "--out", "a"])), 0);
    let o = run(dir.path(), &["simulate", "--config", "c.toml", "--out", "b", "--transport", "tcp"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = |p: &str| -> Vec<String> {
        fs::read_to_string(dir.path().join(p)).unwrap().lines().filter(|l| !l.starts_with('#')).map(String::from).collect()
    };
    assert_eq!(rows("a/simulate.csv"), rows("b/simulate.csv"));
    let bad = run(dir.path(), &["simulate", "--config", "c.toml", "--transport", "pigeon"]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn report_aggregates_and_rejects_empty() {
    let dir = TempDir::new().unwrap();
    let csv = "# comment\nstrategy,N,seed,eval_period,metric,rcp,forgetting\n\
               naive_uniform,5,0,all,2.0,-0.1,0.5\n\
               naive_uniform,5,1,all,2.0,-0.2,\n";
    fs::write(dir.path().join("r.csv"), csv).unwrap();
    let o = run(dir.path(), &["report", "r.csv", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("-0.1500 +- 0.0500"), "{stdout}");
    let summary = fs::read_to_string(dir.path().join("o/report_summary.csv")).unwrap();
    assert!(summary.contains("naive_uniform,5,all,2,2.0,0.0,-0.15"), "{summary}");

    fs::write(dir.path().join("empty.csv"), "").unwrap();
    assert_ne!(code(&run(dir.path(), &["report", "empty.csv"])), 0);
    fs::write(dir.path().join("bad.csv"), "strategy,N\nx,notanumber\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["report", "bad.csv"])), 3);
}

#[test]
fn report_reads_simulate_output() {
    let dir = TempDir::new().unwrap();
    let cfg = SMALL_SIM.replace("\"relaxed_nonconvex\", \"coordinated@1\"", "\"relaxed_nonconvex\"");
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    assert_eq!(code(&run(dir.path(), &["simulate", "--config", "c.toml", "--out", "o"])), 0);
    let o = run(dir.path(), &["report", "o/simulate.csv", "--out", "o"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("relaxed_nonconvex"));
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn write_gradients(path: &Path, prefix: &str, seed: u64) {
    let (d, n) = (6, 7);
    let raw = Array2::from_shape_fn((d, n), |(i, j)| {
        let x = (seed as f64 + 1.0) * (i as f64 + 1.3) * (j as f64 + 0.7);
        x.sin()
    });
    let g = normalize_columns(raw.view(), numbered_ids(prefix, n)).unwrap();
    gset::write_to(&g, &mut fs::File::create(path).unwrap()).unwrap();
}

#[test]
fn coordination_server_and_clients_over_loopback() {
    let dir = TempDir::new().unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    for (i, id) in ["alpha", "beta"].iter().enumerate() {
        write_gradients(&dir.path().join(format!("{id}.gset")), id, i as u64);
    }
    let server = bin()
        .current_dir(dir.path())
        .args(["coord-serve", "--bind", &addr, "--clients", "2", "--max-rounds", "2", "--out", "s", "--timeout-secs", "20"])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    thread::sleep(Duration::from_millis(300));
    let clients: Vec<_> = ["alpha", "beta"]
        .iter()
        .map(|id| {
            bin()
                .current_dir(dir.path())
                .args(["coord-client", "--connect", &addr, "--client-id", id])
                .args(["--gradients", &format!("{id}.gset"), "--budget", "3", "--out", "c", "--timeout-secs", "20"])
                .stdout(Stdio::null())
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in clients {
        assert!(c.wait().unwrap().success());
    }
    assert!(server.wait_with_output().unwrap().status.success());

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s/coord_report.json")).unwrap()).unwrap();
    assert!(report["report"]["rounds_run"].as_u64().unwrap() <= 2);
    for id in ["alpha", "beta"] {
        let sel: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("c/selection_{id}.json"))).unwrap())
                .unwrap();
        let chosen = sel["chosen"].as_array().unwrap();
        assert_eq!(chosen.len(), 3);
        assert!(chosen.iter().all(|c| c.as_str().unwrap().starts_with(id)));
    }
}

#[test]
fn client_without_gradients_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = run(dir.path(), &["coord-client", "--client-id", "a"]);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["coord-client", "--client-id", "a", "--gradients", "missing.gset"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn server_times_out_without_clients() {
    let dir = TempDir::new().unwrap();
    let addr = format!("127.0.0.1:{}", free_port());
    let o = run(dir.path(), &["coord-serve", "--bind", &addr, "--clients", "1", "--timeout-secs", "1"]);
    assert_eq!(code(&o), 3);
}
