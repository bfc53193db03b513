//! Sensor side: a bounded spool of numbered alerts and the uplink thread
//! that ships them to the master and applies rule pushes.

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::wire::{decode, encode, AlertRecord, Message, PushStatus, RulePush, PROTO_VERSION};
use crate::alert::Alert;
use crate::pcap::CaptureRecord;
use crate::pipeline::{PacketOutcome, Pipeline};
use crate::rules::{compile_ruleset, Variables};

pub const DEFAULT_SPOOL: usize = 10_000;

/// Alerts waiting for the master's ack, oldest first.
#[derive(Debug)]
pub struct Spool {
    capacity: usize,
    entries: VecDeque<AlertRecord>,
    next_seq: u64,
    /// First seq not yet written on the current connection.
    send_from: u64,
    pub dropped: u64,
}

impl Spool {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), entries: VecDeque::new(), next_seq: 1, send_from: 1, dropped: 0 }
    }

    /// Numbers the alert; evicts the oldest entry when full.
    pub fn push(&mut self, sensor_id: &str, alert: Alert) -> u64 {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
            self.dropped += 1;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.entries.push_back(AlertRecord { sensor_id: sensor_id.to_string(), seq, alert, received_at_us: None });
        seq
    }

    /// Forgets every entry up to `seq`.
    pub fn ack(&mut self, seq: u64) {
        while self.entries.front().is_some_and(|e| e.seq <= seq) {
            self.entries.pop_front();
        }
        self.send_from = self.send_from.max(seq + 1);
    }

    /// Resend everything still held.
    pub fn rewind(&mut self) {
        self.send_from = self.entries.front().map_or(self.next_seq, |e| e.seq);
    }

    fn unsent(&self) -> Vec<AlertRecord> {
        self.entries.iter().filter(|e| e.seq >= self.send_from).cloned().collect()
    }

    fn mark_sent(&mut self, seq: u64) {
        self.send_from = self.send_from.max(seq + 1);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Alerts numbered so far.
    pub fn emitted(&self) -> u64 {
        self.next_seq - 1
    }
}

#[derive(Debug, Clone)]
pub struct UplinkConfig {
    pub sensor_id: String,
    pub master: SocketAddr,
    pub token: String,
    pub spool_capacity: usize,
    pub reconnect_interval: Duration,
}

impl UplinkConfig {
    pub fn new(sensor_id: impl Into<String>, master: SocketAddr) -> Self {
        Self {
            sensor_id: sensor_id.into(),
            master,
            token: String::new(),
            spool_capacity: DEFAULT_SPOOL,
            reconnect_interval: Duration::from_millis(200),
        }
    }
}

struct Shared {
    spool: Mutex<Spool>,
    wake: Condvar,
    stop: AtomicBool,
    connected: AtomicBool,
    pushes_applied: AtomicU64,
}

/// Ships spooled alerts over one persistent connection, reconnecting as
/// needed. Rule pushes are swapped into `rules` between packets.
pub struct Uplink {
    config: UplinkConfig,
    shared: Arc<Shared>,
    worker: Option<JoinHandle<()>>,
}

impl Uplink {
    pub fn start(config: UplinkConfig, rules: crate::pipeline::RuleHandle) -> Self {
        let shared = Arc::new(Shared {
            spool: Mutex::new(Spool::new(config.spool_capacity)),
            wake: Condvar::new(),
            stop: AtomicBool::new(false),
            connected: AtomicBool::new(false),
            pushes_applied: AtomicU64::new(0),
        });
        let worker = {
            let (cfg, shared) = (config.clone(), shared.clone());
            thread::spawn(move || run(cfg, shared, rules))
        };
        Self { config, shared, worker: Some(worker) }
    }

    pub fn submit(&self, alert: Alert) -> u64 {
        let seq = self.shared.spool.lock().expect("spool lock").push(&self.config.sensor_id, alert);
        self.shared.wake.notify_all();
        seq
    }

    pub fn is_connected(&self) -> bool {
        self.shared.connected.load(Ordering::Relaxed)
    }

    pub fn pushes_applied(&self) -> u64 {
        self.shared.pushes_applied.load(Ordering::Relaxed)
    }

    pub fn emitted(&self) -> u64 {
        self.shared.spool.lock().expect("spool lock").emitted()
    }

    pub fn dropped(&self) -> u64 {
        self.shared.spool.lock().expect("spool lock").dropped
    }

    pub fn pending(&self) -> usize {
        self.shared.spool.lock().expect("spool lock").len()
    }

    /// Waits until the master has acked every alert. Returns false on timeout.
    pub fn flush(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut spool = self.shared.spool.lock().expect("spool lock");
        while !spool.is_empty() {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return false;
            }
            spool = self.shared.wake.wait_timeout(spool, left.min(Duration::from_millis(20))).expect("spool lock").0;
        }
        true
    }

    pub fn shutdown(mut self) {
        self.stop_worker();
    }

    fn stop_worker(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        self.shared.wake.notify_all();
        if let Some(h) = self.worker.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Uplink {
    fn drop(&mut self) {
        self.stop_worker();
    }
}

fn write_msg(w: &Mutex<TcpStream>, msg: &Message) -> io::Result<()> {
    let mut s = w.lock().expect("writer lock");
    s.write_all(encode(msg).as_bytes())?;
    s.flush()
}

fn run(cfg: UplinkConfig, shared: Arc<Shared>, rules: crate::pipeline::RuleHandle) {
    while !shared.stop.load(Ordering::Relaxed) {
        match session(&cfg, &shared, &rules) {
            Ok(()) => debug!("uplink closed"),
            Err(e) => debug!("uplink error: {e}"),
        }
        shared.connected.store(false, Ordering::Relaxed);
        if shared.stop.load(Ordering::Relaxed) {
            break;
        }
        thread::sleep(cfg.reconnect_interval);
    }
}

fn session(cfg: &UplinkConfig, shared: &Arc<Shared>, rules: &crate::pipeline::RuleHandle) -> io::Result<()> {
    let stream = TcpStream::connect_timeout(&cfg.master, Duration::from_secs(2))?;
    stream.set_nodelay(true)?;
    let writer = Arc::new(Mutex::new(stream.try_clone()?));
    write_msg(
        &writer,
        &Message::Hello {
            sensor_id: cfg.sensor_id.clone(),
            proto_ver: PROTO_VERSION,
            token: cfg.token.clone(),
            rule_version: rules.version(),
        },
    )?;
    shared.spool.lock().expect("spool lock").rewind();
    shared.connected.store(true, Ordering::Relaxed);
    info!("sensor {} connected to {}", cfg.sensor_id, cfg.master);

    let alive = Arc::new(AtomicBool::new(true));
    let reader = {
        let (writer, shared, rules, alive, id) =
            (writer.clone(), shared.clone(), rules.clone(), alive.clone(), cfg.sensor_id.clone());
        let stream = stream.try_clone()?;
        thread::spawn(move || {
            let r = read_loop(stream, &writer, &shared, &rules, &id);
            if let Err(e) = r {
                debug!("uplink reader: {e}");
            }
            alive.store(false, Ordering::Relaxed);
            shared.wake.notify_all();
        })
    };

    let result = (|| -> io::Result<()> {
        while alive.load(Ordering::Relaxed) && !shared.stop.load(Ordering::Relaxed) {
            let batch = {
                let spool = shared.spool.lock().expect("spool lock");
                let batch = spool.unsent();
                if batch.is_empty() {
                    drop(shared.wake.wait_timeout(spool, Duration::from_millis(50)).expect("spool lock"));
                    continue;
                }
                batch
            };
            for r in batch {
                let seq = r.seq;
                write_msg(&writer, &Message::Alert(r))?;
                shared.spool.lock().expect("spool lock").mark_sent(seq);
            }
        }
        Ok(())
    })();
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader.join();
    result
}

fn read_loop(
    stream: TcpStream,
    writer: &Mutex<TcpStream>,
    shared: &Shared,
    rules: &crate::pipeline::RuleHandle,
    sensor_id: &str,
) -> io::Result<()> {
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        match decode(&line) {
            Ok(Message::Ack { seq }) => {
                shared.spool.lock().expect("spool lock").ack(seq);
                shared.wake.notify_all();
            }
            Ok(Message::RulePush(p)) => {
                let (status, error) = apply_push(&p, rules);
                if status == PushStatus::Ok {
                    shared.pushes_applied.fetch_add(1, Ordering::Relaxed);
                    info!("sensor {sensor_id} applied rules v{}", p.version);
                } else {
                    warn!("sensor {sensor_id} refused rules v{}: {status:?}", p.version);
                }
                write_msg(
                    writer,
                    &Message::RuleAck { sensor_id: sensor_id.to_string(), version: p.version, status, error },
                )?;
            }
            Ok(Message::Ping) => {}
            Ok(other) => debug!("unexpected message {other:?}"),
            Err(e) => debug!("malformed line from master: {e}"),
        }
    }
}

/// Verifies, compiles and swaps in a pushed rule set.
pub fn apply_push(p: &RulePush, rules: &crate::pipeline::RuleHandle) -> (PushStatus, Option<String>) {
    if !p.checksum_ok() {
        return (PushStatus::ChecksumMismatch, None);
    }
    if p.version <= rules.version() {
        return (PushStatus::Stale, None);
    }
    let vars = match Variables::parse(&p.vars) {
        Ok(v) => v,
        Err(e) => return (PushStatus::CompileFailed, Some(e)),
    };
    match compile_ruleset(&p.rules, &vars, p.version) {
        Ok(set) => {
            rules.swap(set);
            (PushStatus::Ok, None)
        }
        Err(e) => (PushStatus::CompileFailed, Some(e.to_string())),
    }
}

/// A pipeline whose alerts are forwarded through an uplink.
pub struct Sensor {
    pipeline: Pipeline,
    uplink: Uplink,
}

impl Sensor {
    pub fn new(pipeline: Pipeline, uplink: UplinkConfig) -> Self {
        let uplink = Uplink::start(uplink, pipeline.rules().clone());
        Self { pipeline, uplink }
    }

    pub fn process(&mut self, record: &CaptureRecord) -> PacketOutcome {
        let out = self.pipeline.process(record);
        for a in &out.alerts {
            self.uplink.submit(a.clone());
        }
        out
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn uplink(&self) -> &Uplink {
        &self.uplink
    }

    pub fn into_parts(self) -> (Pipeline, Uplink) {
        (self.pipeline, self.uplink)
    }
}
