//! Server-coordinated replay selection by alternating minimization.
//!
//! The joint objective `||sum_m G_m x_m||^2` is rewritten with per-client
//! targets `h_m` (constrained to sum to zero) as
//! `M sum_m ||G_m x_m - h_m||^2`. With the targets fixed the problem splits
//! into one capped-simplex QP per client; with the selections fixed the best
//! targets are `h_m = G_m x_m - mean_n G_n x_n`. Clients and server alternate
//! these two exact block minimizations, exchanging one `d`-vector each way
//! per round. Targets start at zero, so the first client solve is the
//! uncoordinated convex relaxation.

use std::collections::BTreeMap;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_slice_mut, pairwise_sum};
use crate::qp::{solve_from, QpProblem, SolverOptions};
use crate::selection::{gram, round_top_n, GradientSet, GramMatrix, ReplaySelection, SelectionWeights};

/// Tolerance used when checking that the relaxed objective never increases.
pub const MONOTONE_REL_TOL: f64 = 1e-10;

/// Converged runs also satisfy `residual <= RESIDUAL_FACTOR * tol * (1 + max_m ||G_m x_m||)`.
pub const RESIDUAL_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoordinationParams {
    pub max_rounds: u32,
    /// Stop once the relative decrease of the relaxed objective falls below this.
    pub tol: f64,
    pub solver: SolverOptions,
}

impl Default for CoordinationParams {
    fn default() -> Self {
        CoordinationParams { max_rounds: 4, tol: 1e-6, solver: SolverOptions::default() }
    }
}

/// One client's side of the protocol: its gradients, cached Gram matrix,
/// current target and current fractional selection.
#[derive(Clone, Debug)]
pub struct ClientSelectionState {
    client_id: String,
    g: GradientSet,
    gram: GramMatrix,
    h: Vec<f64>,
    x: Option<SelectionWeights>,
    budget: usize,
    solver: SolverOptions,
}

impl ClientSelectionState {
    pub fn new(client_id: impl Into<String>, g: GradientSet, budget: usize, solver: SolverOptions) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidArgument("client budget must be positive".into()));
        }
        let gram = gram(&g, false);
        let h = vec![0.0; g.dim()];
        Ok(ClientSelectionState { client_id: client_id.into(), g, gram, h, x: None, budget, solver })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    pub fn gradients(&self) -> &GradientSet {
        &self.g
    }

    pub fn target(&self) -> &[f64] {
        &self.h
    }

    pub fn weights(&self) -> Option<&SelectionWeights> {
        self.x.as_ref()
    }

    pub fn set_target(&mut self, h: &[f64]) -> Result<()> {
        if h.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: h.len() });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target"));
        }
        self.h.copy_from_slice(h);
        Ok(())
    }

    /// Minimizes `||G x - h||^2` over the capped simplex and returns `G x`.
    ///
    /// The first solve starts at the uniform point; later solves warm-start
    /// from the previous selection.
    pub fn client_step(&mut self) -> Result<Array1<f64>> {
        let n = self.g.count();
        let x = if n <= self.budget {
            SelectionWeights::new(vec![1.0; n], n)?
        } else {
            let b = self.g.transpose_dot(&self.h)?.to_vec();
            let problem = QpProblem { q: &self.gram, b, budget: self.budget };
            let start = self.x.as_ref().map(|x| x.values());
            solve_from(&problem, &self.solver, start)?.x
        };
        let report = self.g.weighted_sum(x.values())?;
        self.x = Some(x);
        Ok(report)
    }

    /// Rounds the current weights to the top-`N_m` samples.
    pub fn selection(&self) -> Result<ReplaySelection> {
        match &self.x {
            Some(x) => round_top_n(x, self.g.ids()),
            None => Err(Error::Protocol(format!("client {} has not solved yet", self.client_id))),
        }
    }
}

/// The server's view: the latest `G_m x_m` per client.
#[derive(Clone, Debug, Default)]
pub struct ServerCoordinationState {
    pub reported: BTreeMap<String, Vec<f64>>,
    pub round: u32,
    pub clients: usize,
}

impl ServerCoordinationState {
    pub fn new(clients: usize) -> Self {
        ServerCoordinationState { reported: BTreeMap::new(), round: 0, clients }
    }

    /// `h_m = r_m - mean(r)` for every client.
    pub fn server_step(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        if self.reported.len() != self.clients {
            return Err(Error::Timeout(format!(
                "reports for round {}: got {} of {}",
                self.round,
                self.reported.len(),
                self.clients
            )));
        }
        let reports: Vec<&Vec<f64>> = self.reported.values().collect();
        let mean = mean_vector(&reports)?;
        Ok(self
            .reported
            .iter()
            .map(|(id, r)| (id.clone(), r.iter().zip(&mean).map(|(a, m)| a - m).collect()))
            .collect())
    }
}

/// Coordinate-wise sum using pairwise summation in the given (client-id) order.
fn sum_vector(reports: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let d = reports.first().map_or(0, |r| r.len());
    if let Some(r) = reports.iter().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: r.len() });
    }
    let mut column = vec![0.0; reports.len()];
    Ok((0..d)
        .map(|j| {
            for (c, r) in column.iter_mut().zip(reports) {
                *c = r[j];
            }
            pairwise_sum(&column)
        })
        .collect())
}

fn mean_vector(reports: &[&Vec<f64>]) -> Result<Vec<f64>> {
    let m = reports.len() as f64;
    Ok(sum_vector(reports)?.into_iter().map(|s| s / m).collect())
}

/// `||sum_m r_m||^2`.
pub fn coordinated_objective<V: AsRef<[f64]>>(reports: &[V]) -> Result<f64> {
    let owned: Vec<Vec<f64>> = reports.iter().map(|r| r.as_ref().to_vec()).collect();
    let refs: Vec<&Vec<f64>> = owned.iter().collect();
    Ok(sum_vector(&refs)?.iter().map(|v| v * v).sum())
}

/// `M sum_m ||r_m - h_m||^2`.
pub fn relaxed_objective(reports: &BTreeMap<String, Vec<f64>>, targets: &BTreeMap<String, Vec<f64>>) -> f64 {
    let m = reports.len() as f64;
    let per_client: Vec<f64> = reports
        .iter()
        .map(|(id, r)| match targets.get(id) {
            Some(h) => r.iter().zip(h).map(|(a, b)| (a - b) * (a - b)).sum(),
            None => r.iter().map(|a| a * a).sum(),
        })
        .collect();
    m * pairwise_sum(&per_client)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinationReport {
    /// Number of server/client rounds after the initial uncoordinated solve.
    pub rounds_run: u32,
    /// `M sum ||G_m x_m - h_m||^2` after each client solve; entry 0 is the
    /// initial solve with `h = 0`.
    pub relaxed_objective_per_round: Vec<f64>,
    /// `||sum_m G_m x_m||^2` for the same iterates.
    pub coordinated_objective_per_round: Vec<f64>,
    pub converged: bool,
    /// `max_m ||h_m - (G_m x_m - mean_n G_n x_n)||` at the final iterate.
    pub theorem1_residual: f64,
    /// `max_m ||G_m x_m||` at the final iterate.
    pub max_report_norm: f64,
    /// Largest `|sum_m h_{m,j}|` seen over all server steps.
    pub max_target_sum: f64,
    /// Largest relative gap between the relaxed objective evaluated right
    /// after a server step and `||sum_m G_m x_m||^2`.
    pub max_identity_error: f64,
}

impl CoordinationReport {
    /// Whether the relaxed objective never increased (relative tolerance `rel_tol`).
    pub fn is_monotone(&self, rel_tol: f64) -> bool {
        self.relaxed_objective_per_round
            .windows(2)
            .all(|w| w[1] <= w[0] + rel_tol * w[0].abs().max(f64::MIN_POSITIVE))
    }
}

/// The server's handle on the participating clients.
///
/// Implemented in-process (clients stepped directly) and over message
/// channels (see the transport module); the coordination loop is shared.
pub trait ClientLink {
    /// Participating client ids, sorted.
    fn client_ids(&self) -> Vec<String>;

    /// Reports `G_m x_m` from the initial solve with `h_m = 0`.
    fn initial_reports(&mut self) -> Result<BTreeMap<String, Vec<f64>>>;

    /// Sends the targets for `round` and collects the resulting reports.
    fn exchange(&mut self, round: u32, targets: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, Vec<f64>>>;

    /// Tells every client the session is over.
    fn finish(&mut self, round: u32) -> Result<()>;

    /// Tells every client the session failed.
    fn abort(&mut self, round: u32, reason: &str);
}

/// Runs the alternating minimization loop over `link`.
pub fn coordinate<L: ClientLink + ?Sized>(link: &mut L, params: &CoordinationParams) -> Result<CoordinationReport> {
    let result = coordinate_inner(link, params);
    if let Err(e) = &result {
        link.abort(0, &e.to_string());
    }
    result
}

fn coordinate_inner<L: ClientLink + ?Sized>(link: &mut L, params: &CoordinationParams) -> Result<CoordinationReport> {
    let ids = link.client_ids();
    if ids.is_empty() {
        return Err(Error::InvalidArgument("coordination needs at least one client".into()));
    }
    let mut server = ServerCoordinationState::new(ids.len());
    server.reported = link.initial_reports()?;
    check_reports(&ids, &server.reported)?;

    let dim = server.reported.values().next().map_or(0, |r| r.len());
    let mut targets: BTreeMap<String, Vec<f64>> = ids.iter().map(|id| (id.clone(), vec![0.0; dim])).collect();

    let mut relaxed = vec![relaxed_objective(&server.reported, &targets)];
    let mut coordinated = vec![coordinated_of(&server.reported)?];
    let mut max_target_sum = 0.0f64;
    let mut max_identity_error = 0.0f64;
    let mut converged = false;
    let mut rounds_run = 0;

    for round in 1..=params.max_rounds {
        server.round = round;
        targets = server.server_step()?;
        max_target_sum = max_target_sum.max(target_sum_max_abs(&targets, dim));

        let joined = relaxed_objective(&server.reported, &targets);
        let direct = coordinated_of(&server.reported)?;
        let gap = (joined - direct).abs() / direct.abs().max(1e-300);
        max_identity_error = max_identity_error.max(if direct == 0.0 { joined.abs() } else { gap });

        server.reported = link.exchange(round, &targets)?;
        check_reports(&ids, &server.reported)?;
        rounds_run = round;

        let value = relaxed_objective(&server.reported, &targets);
        let prev = *relaxed.last().expect("non-empty trace");
        debug_assert!(
            value <= prev + MONOTONE_REL_TOL * prev.abs().max(1e-300) + 1e-300,
            "relaxed objective increased: {prev} -> {value}"
        );
        relaxed.push(value);
        coordinated.push(coordinated_of(&server.reported)?);

        // A small decrease alone leaves a coupling residual of order
        // sqrt(tol * f); also require the residual itself to be small.
        let decrease = if prev > 0.0 { (prev - value) / prev } else { 0.0 };
        let (residual, norm) = (coupling_residual(&server, &targets)?, max_report_norm(&server.reported));
        if decrease < params.tol && residual <= RESIDUAL_FACTOR * params.tol * (1.0 + norm) {
            converged = true;
            break;
        }
    }
    link.finish(rounds_run)?;

    let theorem1_residual = coupling_residual(&server, &targets)?;
    let max_report_norm = max_report_norm(&server.reported);

    Ok(CoordinationReport {
        rounds_run,
        relaxed_objective_per_round: relaxed,
        coordinated_objective_per_round: coordinated,
        converged,
        theorem1_residual,
        max_report_norm,
        max_target_sum,
        max_identity_error,
    })
}

/// `max_m ||h_m - (G_m x_m - mean_n G_n x_n)||` for the current reports.
fn coupling_residual(server: &ServerCoordinationState, targets: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
    let centered = server.server_step()?;
    Ok(targets
        .iter()
        .map(|(id, h)| {
            let c = &centered[id];
            h.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max))
}

fn max_report_norm(reports: &BTreeMap<String, Vec<f64>>) -> f64 {
    reports.values().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max)
}

fn coordinated_of(reports: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
    let v: Vec<&Vec<f64>> = reports.values().collect();
    coordinated_objective(&v)
}

fn target_sum_max_abs(targets: &BTreeMap<String, Vec<f64>>, dim: usize) -> f64 {
    let rows: Vec<&Vec<f64>> = targets.values().collect();
    let mut column = vec![0.0; rows.len()];
    (0..dim)
        .map(|j| {
            for (c, r) in column.iter_mut().zip(&rows) {
                *c = r[j];
            }
            pairwise_sum(&column).abs()
        })
        .fold(0.0, f64::max)
}

fn check_reports(ids: &[String], reports: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    if let Some(missing) = ids.iter().find(|id| !reports.contains_key(*id)) {
        return Err(Error::Timeout(format!("report from client {missing}")));
    }
    if reports.len() != ids.len() {
        return Err(Error::Protocol("report from an unknown client".into()));
    }
    let d = reports.values().next().map_or(0, |r| r.len());
    if let Some(r) = reports.values().find(|r| r.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: r.len() });
    }
    if reports.values().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("client report"));
    }
    Ok(())
}

/// Clients stepped directly in this process, in parallel when enabled.
pub struct InProcessClients {
    clients: Vec<ClientSelectionState>,
}

impl InProcessClients {
    pub fn new(mut clients: Vec<ClientSelectionState>) -> Result<Self> {
        clients.sort_by(|a, b| a.client_id.cmp(&b.client_id));
        if let Some(w) = clients.windows(2).find(|w| w[0].client_id == w[1].client_id) {
            return Err(Error::Protocol(format!("duplicate client id {}", w[0].client_id)));
        }
        if let Some(first) = clients.first() {
            let d = first.dim();
            if let Some(c) = clients.iter().find(|c| c.dim() != d) {
                return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
            }
        }
        Ok(InProcessClients { clients })
    }

    pub fn into_clients(self) -> Vec<ClientSelectionState> {
        self.clients
    }

    fn step_all(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        let results = map_slice_mut(&mut self.clients, |c| c.client_step().map(|r| (c.client_id.clone(), r.to_vec())));
        results
            .into_iter()
            .zip(&self.clients)
            .map(|(r, c)| {
                r.map_err(|e| Error::ClientFailed { client: c.client_id.clone(), reason: e.to_string() })
            })
            .collect()
    }
}

impl ClientLink for InProcessClients {
    fn client_ids(&self) -> Vec<String> {
        self.clients.iter().map(|c| c.client_id.clone()).collect()
    }

    fn initial_reports(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.step_all()
    }

    fn exchange(&mut self, _round: u32, targets: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, Vec<f64>>> {
        for c in &mut self.clients {
            let h = targets
                .get(&c.client_id)
                .ok_or_else(|| Error::Protocol(format!("no target for client {}", c.client_id)))?;
            c.set_target(h)?;
        }
        self.step_all()
    }

    fn finish(&mut self, _round: u32) -> Result<()> {
        Ok(())
    }

    fn abort(&mut self, _round: u32, _reason: &str) {}
}

/// Per-client selections, keyed by client id.
pub type Selections = BTreeMap<String, ReplaySelection>;

/// Runs coordination with every client in this process.
pub fn run_coordination(
    clients: Vec<ClientSelectionState>,
    params: &CoordinationParams,
) -> Result<(Selections, CoordinationReport)> {
    let mut link = InProcessClients::new(clients)?;
    let report = coordinate(&mut link, params)?;
    let selections = link
        .into_clients()
        .into_iter()
        .map(|c| c.selection().map(|s| (c.client_id.clone(), s)))
        .collect::<Result<_>>()?;
    Ok((selections, report))
}

#[cfg(test)]
mod tests {
    use ndarray::{array, Array2};

    use super::*;
    use crate::selection::{normalize_columns, numbered_ids};

    fn state(id: &str, raw: Array2<f64>, budget: usize) -> ClientSelectionState {
        let n = raw.ncols();
        let g = normalize_columns(raw.view(), numbered_ids(id, n)).unwrap();
        ClientSelectionState::new(id, g, budget, SolverOptions::default()).unwrap()
    }

    #[test]
    fn zero_target_orthonormal_client() {
        let mut c = state("a", Array2::eye(4), 2);
        let r = c.client_step().unwrap();
        for v in c.weights().unwrap().values() {
            assert!((v - 0.5).abs() < 1e-9);
        }
        for v in r.iter() {
            assert!((v - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn reachable_target_is_matched() {
        let raw = array![[1.0, 0.2, -0.3, 0.7], [0.1, 1.0, 0.4, -0.2], [0.3, -0.5, 1.0, 0.1]];
        let mut c = state("a", raw, 2);
        let x_star = [1.0, 0.0, 0.6, 0.4];
        let h = c.gradients().weighted_sum(&x_star).unwrap();
        c.set_target(h.as_slice().unwrap()).unwrap();
        let r = c.client_step().unwrap();
        let resid: f64 = r.iter().zip(h.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert!(resid <= 1e-4, "residual {resid}");
    }

    /// n = 2, N = 1: x = (t, 1 - t), minimize ||t g1 + (1 - t) g2 - h||^2 in closed form.
    #[test]
    fn two_sample_client_matches_closed_form() {
        let raw = array![[1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let mut c = state("a", raw, 1);
        let h = [0.3, -0.2, 0.5];
        c.set_target(&h).unwrap();
        c.client_step().unwrap();
        let g1 = [1.0, 0.0, 0.0];
        let s = 1.0 / 2f64.sqrt();
        let g2 = [0.0, s, s];
        // f(t) = ||t (g1 - g2) + g2 - h||^2, t* = -<g1 - g2, g2 - h> / ||g1 - g2||^2 clamped to [0, 1]
        let dvec: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
        let e: Vec<f64> = g2.iter().zip(&h).map(|(a, b)| a - b).collect();
        let num: f64 = dvec.iter().zip(&e).map(|(a, b)| a * b).sum();
        let den: f64 = dvec.iter().map(|a| a * a).sum();
        let t = (-num / den).clamp(0.0, 1.0);
        let x = c.weights().unwrap().values();
        assert!((x[0] - t).abs() < 1e-7, "{} vs {t}", x[0]);
        assert!((x[1] - (1.0 - t)).abs() < 1e-7);
    }

    #[test]
    fn server_step_examples() {
        let mut s = ServerCoordinationState::new(1);
        s.reported.insert("a".into(), vec![1.0, -2.0]);
        assert_eq!(s.server_step().unwrap()["a"], vec![0.0, 0.0]);

        let mut s = ServerCoordinationState::new(2);
        s.reported.insert("a".into(), vec![1.0, -2.0]);
        s.reported.insert("b".into(), vec![-1.0, 2.0]);
        let h = s.server_step().unwrap();
        assert_eq!(h["a"], vec![1.0, -2.0]);
        assert_eq!(h["b"], vec![-1.0, 2.0]);

        let mut s = ServerCoordinationState::new(3);
        s.reported.insert("a".into(), vec![0.3, 1.7, -0.4]);
        s.reported.insert("b".into(), vec![2.1, -0.9, 0.05]);
        s.reported.insert("c".into(), vec![-1.3, 0.2, 0.8]);
        let h = s.server_step().unwrap();
        for j in 0..3 {
            let sum: f64 = h.values().map(|v| v[j]).sum();
            assert!(sum.abs() < 1e-9);
        }
    }

    #[test]
    fn server_step_requires_all_reports() {
        let mut s = ServerCoordinationState::new(2);
        s.reported.insert("a".into(), vec![1.0]);
        assert!(matches!(s.server_step(), Err(Error::Timeout(_))));
    }

    #[test]
    fn coordinated_objective_examples() {
        let r = vec![1.0, -2.0, 0.5];
        let neg: Vec<f64> = r.iter().map(|v| -v).collect();
        assert_eq!(coordinated_objective(&[r.clone(), neg]).unwrap(), 0.0);
        assert!((coordinated_objective(std::slice::from_ref(&r)).unwrap() - 5.25).abs() < 1e-12);
        assert!((coordinated_objective(&[r.clone(), r.clone(), r]).unwrap() - 9.0 * 5.25).abs() < 1e-12);
        assert!(coordinated_objective(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn single_client_keeps_zero_target() {
        let raw = array![[1.0, 0.5, -0.3, 0.2], [0.2, 1.0, 0.1, -0.7]];
        let c = state("only", raw, 2);
        let (sel, report) = run_coordination(vec![c.clone()], &CoordinationParams::default()).unwrap();
        let mut solo = c;
        solo.client_step().unwrap();
        assert_eq!(sel["only"], solo.selection().unwrap());
        assert!(report.theorem1_residual < 1e-12);
    }

    #[test]
    fn duplicate_client_ids_rejected() {
        let c = state("a", Array2::eye(3), 1);
        assert!(InProcessClients::new(vec![c.clone(), c]).is_err());
    }
}
