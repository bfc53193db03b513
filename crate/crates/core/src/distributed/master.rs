//! Master node: accepts sensor connections, stores their alerts and pushes
//! rule sets back to them.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};
use thiserror::Error;

use super::store::AlertStore;
use super::wire::{decode, encode, Message, PushStatus, RulePush, PROTO_VERSION};
use crate::rules::{compile_ruleset, CompileErrors, Variables};

#[derive(Debug, Error)]
pub enum PushError {
    #[error("rule set does not compile at the master: {0}")]
    CompileFailedAtMaster(CompileErrors),
    #[error("variables: {0}")]
    BadVariables(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PushOutcome {
    Acked(PushStatus, Option<String>),
    /// Not connected or no answer in time; the push is resent on reconnect.
    Pending,
}

#[derive(Debug, Default)]
pub struct MasterStats {
    pub connections: AtomicU64,
    pub handshake_failures: AtomicU64,
    pub malformed_lines: AtomicU64,
    pub duplicates: AtomicU64,
}

#[derive(Debug, Clone)]
pub struct MasterConfig {
    pub listen: SocketAddr,
    /// Required hello token; empty accepts any.
    pub token: String,
}

struct Session {
    writer: Arc<Mutex<TcpStream>>,
    /// Distinguishes a replaced connection from the live one.
    conn_id: u64,
}

/// Version, status and error of a sensor's latest push answer.
type PushAnswer = (u64, PushStatus, Option<String>);

#[derive(Default)]
struct Shared {
    sessions: Mutex<HashMap<String, Session>>,
    /// Latest answer per sensor to a push, keyed by version.
    rule_acks: Mutex<HashMap<String, PushAnswer>>,
    acks_changed: Condvar,
    latest_push: Mutex<Option<RulePush>>,
    next_conn: AtomicU64,
}

pub struct Master {
    store: Arc<AlertStore>,
    shared: Arc<Shared>,
    stats: Arc<MasterStats>,
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

fn now_us() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

fn send(writer: &Mutex<TcpStream>, msg: &Message) -> io::Result<()> {
    let mut w = writer.lock().expect("writer lock poisoned");
    w.write_all(encode(msg).as_bytes())?;
    w.flush()
}

impl Master {
    pub fn start(config: MasterConfig, store: AlertStore) -> io::Result<Self> {
        let listener = TcpListener::bind(config.listen)?;
        let local_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let store = Arc::new(store);
        let shared = Arc::new(Shared::default());
        let stats = Arc::new(MasterStats::default());
        let stop = Arc::new(AtomicBool::new(false));
        let accept = {
            let (store, shared, stats, stop) = (store.clone(), shared.clone(), stats.clone(), stop.clone());
            thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, peer)) => {
                            debug!("sensor connection from {peer}");
                            let _ = stream.set_nonblocking(false);
                            let (store, shared, stats, token) =
                                (store.clone(), shared.clone(), stats.clone(), config.token.clone());
                            thread::spawn(move || {
                                if let Err(e) = serve(stream, &store, &shared, &stats, &token) {
                                    debug!("sensor connection ended: {e}");
                                }
                            });
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                        Err(e) => warn!("accept failed: {e}"),
                    }
                }
            })
        };
        info!("master listening on {local_addr}");
        Ok(Self { store, shared, stats, local_addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn store(&self) -> &Arc<AlertStore> {
        &self.store
    }

    pub fn stats(&self) -> &MasterStats {
        &self.stats
    }

    pub fn connected(&self) -> Vec<String> {
        let mut v: Vec<String> = self.shared.sessions.lock().expect("sessions lock").keys().cloned().collect();
        v.sort();
        v
    }

    /// Compiles `rules` locally, then sends the push to every target and
    /// waits up to `timeout` for their answers.
    pub fn push_rules(
        &self,
        targets: &[String],
        version: u64,
        rules: &str,
        vars: &str,
        timeout: Duration,
    ) -> Result<BTreeMap<String, PushOutcome>, PushError> {
        let variables = Variables::parse(vars).map_err(PushError::BadVariables)?;
        compile_ruleset(rules, &variables, version).map_err(PushError::CompileFailedAtMaster)?;
        let push = RulePush::new(version, rules, vars);
        *self.shared.latest_push.lock().expect("push lock") = Some(push.clone());

        let mut contacted = Vec::new();
        {
            let mut acks = self.shared.rule_acks.lock().expect("acks lock");
            for t in targets {
                acks.remove(t);
            }
        }
        {
            let sessions = self.shared.sessions.lock().expect("sessions lock");
            for t in targets {
                if let Some(s) = sessions.get(t) {
                    if send(&s.writer, &Message::RulePush(push.clone())).is_ok() {
                        contacted.push(t.clone());
                    }
                }
            }
        }

        let deadline = Instant::now() + timeout;
        let mut acks = self.shared.rule_acks.lock().expect("acks lock");
        loop {
            let done = contacted.iter().all(|t| acks.get(t).is_some_and(|a| a.0 >= version));
            let left = deadline.saturating_duration_since(Instant::now());
            if done || left.is_zero() {
                break;
            }
            acks = self.shared.acks_changed.wait_timeout(acks, left).expect("acks lock").0;
        }
        Ok(targets
            .iter()
            .map(|t| {
                let outcome = match acks.get(t) {
                    Some((v, status, err)) if *v == version => PushOutcome::Acked(*status, err.clone()),
                    _ => PushOutcome::Pending,
                };
                (t.clone(), outcome)
            })
            .collect())
    }

    pub fn shutdown(mut self) {
        self.stop_all();
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.shared.sessions.lock().expect("sessions lock").drain() {
            let _ = s.writer.lock().expect("writer lock").shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Master {
    fn drop(&mut self) {
        self.stop_all();
    }
}

fn serve(stream: TcpStream, store: &AlertStore, shared: &Shared, stats: &MasterStats, token: &str) -> io::Result<()> {
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    if reader.read_line(&mut line)? == 0 {
        return Ok(());
    }
    let (sensor_id, rule_version) = match decode(&line) {
        Ok(Message::Hello { sensor_id, proto_ver, token: t, rule_version })
            if proto_ver == PROTO_VERSION && (token.is_empty() || t == token) =>
        {
            (sensor_id, rule_version)
        }
        _ => {
            stats.handshake_failures.fetch_add(1, Ordering::Relaxed);
            warn!("handshake rejected");
            let _ = writer.lock().expect("writer lock").shutdown(Shutdown::Both);
            return Ok(());
        }
    };
    stats.connections.fetch_add(1, Ordering::Relaxed);
    let conn_id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    shared
        .sessions
        .lock()
        .expect("sessions lock")
        .insert(sensor_id.clone(), Session { writer: writer.clone(), conn_id });
    info!("sensor {sensor_id} connected at rule version {rule_version}");
    send(&writer, &Message::Ack { seq: store.last_contiguous(&sensor_id) })?;
    let pending = shared.latest_push.lock().expect("push lock").clone();
    if let Some(p) = pending.filter(|p| p.version > rule_version) {
        send(&writer, &Message::RulePush(p))?;
    }

    let result = read_loop(&mut reader, &writer, &sensor_id, store, shared, stats);
    let mut sessions = shared.sessions.lock().expect("sessions lock");
    if sessions.get(&sensor_id).is_some_and(|s| s.conn_id == conn_id) {
        sessions.remove(&sensor_id);
    }
    info!("sensor {sensor_id} disconnected");
    result
}

fn read_loop(
    reader: &mut BufReader<TcpStream>,
    writer: &Mutex<TcpStream>,
    sensor_id: &str,
    store: &AlertStore,
    shared: &Shared,
    stats: &MasterStats,
) -> io::Result<()> {
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        match decode(&line) {
            Ok(Message::Alert(mut r)) if r.sensor_id == sensor_id && r.seq > 0 => {
                r.received_at_us = Some(now_us());
                if !store.append(r)? {
                    stats.duplicates.fetch_add(1, Ordering::Relaxed);
                }
                send(writer, &Message::Ack { seq: store.last_contiguous(sensor_id) })?;
            }
            Ok(Message::RuleAck { sensor_id: s, version, status, error }) if s == sensor_id => {
                shared.rule_acks.lock().expect("acks lock").insert(s, (version, status, error));
                shared.acks_changed.notify_all();
            }
            Ok(Message::Ping) => send(writer, &Message::Ping)?,
            _ => {
                stats.malformed_lines.fetch_add(1, Ordering::Relaxed);
            }
        }
    }
}
