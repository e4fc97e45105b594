use std::collections::BTreeMap;
use std::io;
use std::net::{TcpListener, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::channel::{Channel, MemoryChannel, TcpChannel};
use super::{CoordMessage, MessageKind};
use crate::coordination::{
    coordinate, run_coordination, ClientLink, ClientSelectionState, CoordinationParams, CoordinationReport, Selections,
};
use crate::error::{Error, Result};
use crate::selection::ReplaySelection;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    /// Clients stepped directly, no messages.
    #[default]
    InProcess,
    /// One thread per client, frames over in-memory queues.
    Memory,
    /// One thread per client, frames over loopback TCP.
    Tcp,
}

/// Server-side endpoints of registered clients, keyed (and iterated) by id.
pub struct ChannelClients<C: Channel> {
    channels: BTreeMap<String, C>,
    dim: Option<usize>,
    traffic: BTreeMap<String, (u64, u64)>,
}

impl<C: Channel> Default for ChannelClients<C> {
    fn default() -> Self {
        ChannelClients { channels: BTreeMap::new(), dim: None, traffic: BTreeMap::new() }
    }
}

impl<C: Channel> ChannelClients<C> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reads the HELLO on `channel` and registers the client.
    ///
    /// A duplicate id or a mismatched dimension is answered with ERROR and
    /// the channel is dropped.
    pub fn register(&mut self, mut channel: C) -> Result<String> {
        let hello = channel.recv()?;
        if hello.kind != MessageKind::Hello {
            let _ = channel.send(&CoordMessage::error(0, &hello.client_id, "expected HELLO"));
            return Err(Error::Protocol(format!("expected HELLO, got {:?}", hello.kind)));
        }
        let id = hello.client_id.clone();
        let reject = |channel: &mut C, why: String| -> Error {
            let _ = channel.send(&CoordMessage::error(0, &id, why.clone()));
            Error::Protocol(why)
        };
        let dim = match hello.declared_dim() {
            Ok(d) => d,
            Err(e) => return Err(reject(&mut channel, e.to_string())),
        };
        if self.channels.contains_key(&id) {
            return Err(reject(&mut channel, format!("duplicate client id {id}")));
        }
        match self.dim {
            Some(d) if d != dim => return Err(reject(&mut channel, format!("client {id} declared d = {dim}, expected {d}"))),
            _ => self.dim = Some(dim),
        }
        self.traffic.insert(id.clone(), (0, hello.frame_len() as u64));
        self.channels.insert(id.clone(), channel);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    /// Bytes (sent to, received from) each client so far.
    pub fn traffic(&self) -> &BTreeMap<String, (u64, u64)> {
        &self.traffic
    }

    fn send_to(&mut self, id: &str, msg: &CoordMessage) -> Result<()> {
        let ch = self.channels.get_mut(id).ok_or_else(|| Error::Protocol(format!("unknown client {id}")))?;
        ch.send(msg)?;
        if let Some(t) = self.traffic.get_mut(id) {
            t.0 += msg.frame_len() as u64;
        }
        Ok(())
    }

    fn collect_reports(&mut self, round: u32) -> Result<BTreeMap<String, Vec<f64>>> {
        let dim = self.dim.unwrap_or(0);
        let mut out = BTreeMap::new();
        for (id, ch) in self.channels.iter_mut() {
            let msg = ch.recv().map_err(|e| match e {
                Error::Timeout(what) => Error::Timeout(format!("REPORT from {id} in round {round} ({what})")),
                other => other,
            })?;
            if let Some(t) = self.traffic.get_mut(id) {
                t.1 += msg.frame_len() as u64;
            }
            match msg.kind {
                MessageKind::Report if msg.round == round && &msg.client_id == id && msg.payload.len() == dim => {
                    out.insert(id.clone(), msg.payload);
                }
                MessageKind::Error => {
                    return Err(Error::ClientFailed {
                        client: id.clone(),
                        reason: msg.error_text.unwrap_or_default(),
                    })
                }
                _ => {
                    return Err(Error::Protocol(format!(
                        "unexpected {:?} (round {}, {} values) from {id} in round {round}",
                        msg.kind,
                        msg.round,
                        msg.payload.len()
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl<C: Channel> ClientLink for ChannelClients<C> {
    fn client_ids(&self) -> Vec<String> {
        self.channels.keys().cloned().collect()
    }

    fn initial_reports(&mut self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.collect_reports(0)
    }

    fn exchange(&mut self, round: u32, targets: &BTreeMap<String, Vec<f64>>) -> Result<BTreeMap<String, Vec<f64>>> {
        for id in self.client_ids() {
            let h = targets.get(&id).ok_or_else(|| Error::Protocol(format!("no target for client {id}")))?;
            self.send_to(&id, &CoordMessage::target(round, &id, h.clone()))?;
        }
        self.collect_reports(round)
    }

    fn finish(&mut self, round: u32) -> Result<()> {
        for id in self.client_ids() {
            self.send_to(&id, &CoordMessage::done(round, &id))?;
        }
        Ok(())
    }

    fn abort(&mut self, round: u32, reason: &str) {
        for id in self.client_ids() {
            let _ = self.send_to(&id, &CoordMessage::error(round, &id, reason));
        }
    }
}

/// Client side of a session: HELLO, the initial REPORT, then one REPORT per
/// TARGET until DONE. Returns the rounded selection.
pub fn run_client<C: Channel>(mut state: ClientSelectionState, mut channel: C) -> Result<ReplaySelection> {
    let id = state.client_id().to_owned();
    channel.send(&CoordMessage::hello(&id, state.dim()))?;

    let mut round = 0u32;
    step_and_report(&mut state, &mut channel, round)?;
    loop {
        let msg = channel.recv()?;
        match msg.kind {
            MessageKind::Target if msg.round > round => {
                round = msg.round;
                if let Err(e) = state.set_target(&msg.payload) {
                    let _ = channel.send(&CoordMessage::error(round, &id, e.to_string()));
                    return Err(e);
                }
                step_and_report(&mut state, &mut channel, round)?;
            }
            MessageKind::Done => return state.selection(),
            MessageKind::Error => {
                return Err(Error::Protocol(format!("server aborted: {}", msg.error_text.unwrap_or_default())))
            }
            other => return Err(Error::Protocol(format!("unexpected {other:?} in round {}", msg.round))),
        }
    }
}

fn step_and_report<C: Channel>(state: &mut ClientSelectionState, channel: &mut C, round: u32) -> Result<()> {
    match state.client_step() {
        Ok(report) => channel.send(&CoordMessage::report(round, state.client_id(), report.to_vec())),
        Err(e) => {
            let _ = channel.send(&CoordMessage::error(round, state.client_id(), e.to_string()));
            Err(e)
        }
    }
}

/// Connects to a coordination server and runs the client protocol.
pub fn connect_client(addr: &str, state: ClientSelectionState, timeout: Duration) -> Result<ReplaySelection> {
    run_client(state, TcpChannel::connect(addr, timeout)?)
}

/// Binds `bind_address`, waits for `expected_clients` HELLOs and runs the session.
pub fn serve_coordination(
    bind_address: impl ToSocketAddrs,
    expected_clients: usize,
    params: &CoordinationParams,
    timeout: Duration,
) -> Result<CoordinationReport> {
    serve_listener(TcpListener::bind(bind_address)?, expected_clients, params, timeout)
}

/// Runs a session on an already-bound listener.
pub fn serve_listener(
    listener: TcpListener,
    expected_clients: usize,
    params: &CoordinationParams,
    timeout: Duration,
) -> Result<CoordinationReport> {
    if expected_clients == 0 {
        return Err(Error::InvalidArgument("expected at least one client".into()));
    }
    let mut clients: ChannelClients<TcpChannel> = ChannelClients::new();
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    while clients.len() < expected_clients {
        match listener.accept() {
            Ok((stream, peer)) => {
                stream.set_nonblocking(false)?;
                let channel = TcpChannel::new(stream, timeout)?;
                match clients.register(channel) {
                    Ok(id) => log::info!("client {id} joined from {peer}"),
                    Err(e) => log::warn!("rejected connection from {peer}: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    clients.abort(0, "not enough clients joined");
                    return Err(Error::Timeout(format!(
                        "{} of {expected_clients} clients after {timeout:?}",
                        clients.len()
                    )));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    coordinate(&mut clients, params)
}

/// Runs a full coordination session with all clients local to this process,
/// over the chosen transport.
pub fn run_coordination_over(
    kind: TransportKind,
    clients: Vec<ClientSelectionState>,
    params: &CoordinationParams,
    timeout: Duration,
) -> Result<(Selections, CoordinationReport)> {
    match kind {
        TransportKind::InProcess => run_coordination(clients, params),
        TransportKind::Memory => run_memory(clients, params, timeout),
        TransportKind::Tcp => run_tcp(clients, params, timeout),
    }
}

fn run_memory(
    clients: Vec<ClientSelectionState>,
    params: &CoordinationParams,
    timeout: Duration,
) -> Result<(Selections, CoordinationReport)> {
    thread::scope(|scope| {
        let mut server: ChannelClients<MemoryChannel> = ChannelClients::new();
        let mut handles = Vec::with_capacity(clients.len());
        let mut ends = Vec::with_capacity(clients.len());
        for state in clients {
            let (mut server_end, mut client_end) = MemoryChannel::pair();
            server_end.set_timeout(timeout)?;
            client_end.set_timeout(timeout)?;
            let id = state.client_id().to_owned();
            handles.push((id, scope.spawn(move || run_client(state, client_end))));
            ends.push(server_end);
        }
        let mut registration = Ok(());
        for end in ends {
            if let Err(e) = server.register(end) {
                registration = Err(e);
            }
        }
        let report = registration.and_then(|_| coordinate(&mut server, params));
        drop(server);
        join_clients(handles, report)
    })
}

fn run_tcp(
    clients: Vec<ClientSelectionState>,
    params: &CoordinationParams,
    timeout: Duration,
) -> Result<(Selections, CoordinationReport)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let expected = clients.len();
    thread::scope(|scope| {
        let handles: Vec<_> = clients
            .into_iter()
            .map(|state| {
                let id = state.client_id().to_owned();
                let addr = addr.clone();
                (id, scope.spawn(move || connect_client(&addr, state, timeout)))
            })
            .collect();
        let report = serve_listener(listener, expected, params, timeout);
        join_clients(handles, report)
    })
}

fn join_clients(
    handles: Vec<(String, thread::ScopedJoinHandle<'_, Result<ReplaySelection>>)>,
    report: Result<CoordinationReport>,
) -> Result<(Selections, CoordinationReport)> {
    let mut selections = BTreeMap::new();
    let mut first_err = None;
    for (id, h) in handles {
        match h.join() {
            Ok(Ok(sel)) => {
                selections.insert(id, sel);
            }
            Ok(Err(e)) => {
                first_err.get_or_insert(Error::ClientFailed { client: id, reason: e.to_string() });
            }
            Err(_) => {
                first_err.get_or_insert(Error::ClientFailed { client: id, reason: "worker panicked".into() });
            }
        }
    }
    let report = report?;
    match first_err {
        Some(e) => Err(e),
        None => Ok((selections, report)),
    }
}
