//! Central coordinator.
//!
//! One acceptor thread, one reader thread per connection and a single
//! aggregator thread. Readers only decode frames and forward them over a
//! channel; the aggregator is the only writer of the telemetry store, the
//! log file and the outbound sockets.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::merge_qtables;
use super::protocol::{
    write_message, FleetMessage, Payload, SetTarget, TelemetrySnapshot, UnitId, BRAIN_ID,
};
use crate::error::Result;
use crate::rl::{QTable, TargetLabel};

const POLL: Duration = Duration::from_millis(20);

#[derive(Clone, Debug)]
pub struct BrainConfig {
    /// Target handed to units without an explicit assignment.
    pub default_target: TargetLabel,
    pub unit_targets: BTreeMap<u32, TargetLabel>,
    /// Q-table push cadence announced to units; `None` disables merging.
    pub merge_every: Option<u64>,
    /// NDJSON log of every accepted inbound message.
    pub log_path: Option<PathBuf>,
}

impl Default for BrainConfig {
    fn default() -> Self {
        BrainConfig {
            default_target: TargetLabel::new(4).expect("L4 exists"),
            unit_targets: BTreeMap::new(),
            merge_every: None,
            log_path: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BrainStats {
    pub connections: u64,
    pub hellos: u64,
    pub telemetry: u64,
    pub seq_regressions: u64,
    pub malformed: u64,
    pub pushes: u64,
    pub merges: u64,
    pub merge_failures: u64,
    pub byes: u64,
}

#[derive(Debug, Default)]
struct Store {
    telemetry: Vec<TelemetrySnapshot>,
    merged: Vec<QTable>,
    stats: BrainStats,
}

enum Event {
    Connected { conn: u64, writer: TcpStream },
    Frame { conn: u64, msg: FleetMessage },
    Malformed { conn: u64, reason: String },
    Closed { conn: u64 },
    Assign { unit: UnitId, target: TargetLabel },
}

pub struct BrainHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    events: Sender<Event>,
    store: Arc<Mutex<Store>>,
    threads: Vec<JoinHandle<()>>,
}

impl BrainHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> BrainStats {
        self.store
            .lock()
            .expect("brain store poisoned")
            .stats
            .clone()
    }

    pub fn telemetry(&self) -> Vec<TelemetrySnapshot> {
        self.store
            .lock()
            .expect("brain store poisoned")
            .telemetry
            .clone()
    }

    /// Every merged table broadcast so far, oldest first.
    pub fn merged_tables(&self) -> Vec<QTable> {
        self.store
            .lock()
            .expect("brain store poisoned")
            .merged
            .clone()
    }

    /// Sends SET_TARGET to `unit` and remembers the assignment for reconnects.
    pub fn set_target(&self, unit: UnitId, target: TargetLabel) {
        let _ = self.events.send(Event::Assign { unit, target });
    }

    /// Polls `pred` against the current stats until it holds or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&BrainStats) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(&self.stats()) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for BrainHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

/// Binds `addr` and starts serving in background threads.
pub fn brain_serve(addr: impl ToSocketAddrs, cfg: BrainConfig) -> Result<BrainHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let log = match &cfg.log_path {
        Some(p) => Some(BufWriter::new(
            OpenOptions::new().create(true).append(true).open(p)?,
        )),
        None => None,
    };
    info!("brain listening on {local}");

    let stop = Arc::new(AtomicBool::new(false));
    let store = Arc::new(Mutex::new(Store::default()));
    let (tx, rx) = mpsc::channel();

    let acceptor = {
        let stop = stop.clone();
        let tx = tx.clone();
        thread::Builder::new()
            .name("brain-accept".into())
            .spawn(move || accept_loop(listener, tx, stop))?
    };
    let aggregator = {
        let stop = stop.clone();
        let store = store.clone();
        thread::Builder::new()
            .name("brain-aggregate".into())
            .spawn(move || Aggregator::new(cfg, store, log).run(rx, stop))?
    };
    Ok(BrainHandle {
        addr: local,
        stop,
        events: tx,
        store,
        threads: vec![acceptor, aggregator],
    })
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next_conn = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("connection {next_conn} from {peer}");
                let conn = next_conn;
                next_conn += 1;
                if let Err(e) = spawn_reader(conn, stream, tx.clone(), stop.clone()) {
                    warn!("dropping connection from {peer}: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(2)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn spawn_reader(
    conn: u64,
    stream: TcpStream,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL))?;
    let writer = stream.try_clone()?;
    let _ = tx.send(Event::Connected { conn, writer });
    thread::Builder::new()
        .name(format!("brain-conn-{conn}"))
        .spawn(move || {
            let mut reader = BufReader::new(stream);
            let mut buf = Vec::new();
            loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                match reader.read_until(b'\n', &mut buf) {
                    Ok(0) => break,
                    Ok(_) if buf.last() != Some(&b'\n') => continue,
                    Ok(_) => {
                        let line = String::from_utf8_lossy(&buf).into_owned();
                        buf.clear();
                        if line.trim().is_empty() {
                            continue;
                        }
                        match FleetMessage::decode(&line) {
                            Ok(msg) => {
                                let _ = tx.send(Event::Frame { conn, msg });
                            }
                            Err(e) => {
                                let _ = tx.send(Event::Malformed {
                                    conn,
                                    reason: e.to_string(),
                                });
                                return;
                            }
                        }
                    }
                    Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                        continue
                    }
                    Err(_) => break,
                }
            }
            let _ = tx.send(Event::Closed { conn });
        })?;
    Ok(())
}

struct Connection {
    writer: TcpStream,
    unit: Option<UnitId>,
}

struct Aggregator {
    cfg: BrainConfig,
    store: Arc<Mutex<Store>>,
    log: Option<BufWriter<File>>,
    conns: HashMap<u64, Connection>,
    last_seq: HashMap<UnitId, u64>,
    pending: BTreeMap<UnitId, QTable>,
    seq: u64,
}

impl Aggregator {
    fn new(cfg: BrainConfig, store: Arc<Mutex<Store>>, log: Option<BufWriter<File>>) -> Self {
        Aggregator {
            cfg,
            store,
            log,
            conns: HashMap::new(),
            last_seq: HashMap::new(),
            pending: BTreeMap::new(),
            seq: 0,
        }
    }

    fn run(mut self, rx: Receiver<Event>, stop: Arc<AtomicBool>) {
        loop {
            match rx.recv_timeout(POLL) {
                Ok(ev) => self.handle(ev),
                Err(RecvTimeoutError::Timeout) => {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                }
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        for (_, c) in self.conns.drain() {
            let _ = c.writer.shutdown(Shutdown::Both);
        }
        if let Some(log) = self.log.as_mut() {
            let _ = log.flush();
        }
    }

    fn stats(&self) -> std::sync::MutexGuard<'_, Store> {
        self.store.lock().expect("brain store poisoned")
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Connected { conn, writer } => {
                self.conns.insert(conn, Connection { writer, unit: None });
                self.stats().stats.connections += 1;
            }
            Event::Closed { conn } => {
                if let Some(c) = self.conns.remove(&conn) {
                    debug!("connection {conn} ({:?}) closed", c.unit);
                }
            }
            Event::Malformed { conn, reason } => {
                warn!("dropping connection {conn}: {reason}");
                self.stats().stats.malformed += 1;
                if let Some(c) = self.conns.remove(&conn) {
                    let _ = c.writer.shutdown(Shutdown::Both);
                }
            }
            Event::Assign { unit, target } => {
                self.cfg.unit_targets.insert(unit.0, target);
                let conns: Vec<u64> = self
                    .conns
                    .iter()
                    .filter(|(_, c)| c.unit == Some(unit))
                    .map(|(&k, _)| k)
                    .collect();
                for conn in conns {
                    self.send_target(conn, unit);
                }
            }
            Event::Frame { conn, msg } => self.on_frame(conn, msg),
        }
    }

    fn on_frame(&mut self, conn: u64, msg: FleetMessage) {
        if let Some(&last) = self.last_seq.get(&msg.unit) {
            if msg.seq <= last {
                debug!("{}: seq {} after {last}, discarded", msg.unit, msg.seq);
                self.stats().stats.seq_regressions += 1;
                return;
            }
        }
        self.last_seq.insert(msg.unit, msg.seq);
        if let Some(c) = self.conns.get_mut(&conn) {
            c.unit = Some(msg.unit);
        }
        if let Some(log) = self.log.as_mut() {
            if let Ok(line) = msg.encode() {
                let _ = writeln!(log, "{line}");
                let _ = log.flush();
            }
        }

        match msg.payload {
            Payload::Hello(_) => {
                self.stats().stats.hellos += 1;
                self.send_target(conn, msg.unit);
            }
            Payload::Telemetry(snap) => {
                let mut store = self.stats();
                store.stats.telemetry += 1;
                store.telemetry.push(snap);
            }
            Payload::QsyncPush(table) => {
                self.stats().stats.pushes += 1;
                if self.cfg.merge_every.is_some() {
                    self.pending.insert(msg.unit, table);
                    self.maybe_merge();
                }
            }
            Payload::Bye(b) => {
                debug!("{} says bye: {}", msg.unit, b.reason);
                self.stats().stats.byes += 1;
            }
            Payload::SetTarget(_) | Payload::QsyncMerged(_) => {
                warn!("{} sent a brain-only message; ignored", msg.unit);
            }
        }
    }

    fn next_seq(&mut self) -> u64 {
        self.seq += 1;
        self.seq
    }

    fn send(&mut self, conn: u64, payload: Payload) {
        let seq = self.next_seq();
        let msg = FleetMessage::new(BRAIN_ID, seq, payload);
        let failed = match self.conns.get_mut(&conn) {
            Some(c) => write_message(&mut c.writer, &msg).is_err(),
            None => false,
        };
        if failed {
            warn!("write to connection {conn} failed; dropping it");
            self.conns.remove(&conn);
        }
    }

    fn send_target(&mut self, conn: u64, unit: UnitId) {
        let target = self
            .cfg
            .unit_targets
            .get(&unit.0)
            .copied()
            .unwrap_or(self.cfg.default_target);
        let merge_every = self.cfg.merge_every;
        self.send(
            conn,
            Payload::SetTarget(SetTarget {
                target,
                merge_every,
            }),
        );
    }

    /// Merges once every connected unit has pushed since the last merge.
    fn maybe_merge(&mut self) {
        let connected: Vec<UnitId> = {
            let mut u: Vec<UnitId> = self.conns.values().filter_map(|c| c.unit).collect();
            u.sort();
            u.dedup();
            u
        };
        if connected.iter().any(|u| !self.pending.contains_key(u)) {
            return;
        }
        let tables: Vec<QTable> = std::mem::take(&mut self.pending).into_values().collect();
        match merge_qtables(&tables) {
            Ok(merged) => {
                let targets: Vec<u64> = self
                    .conns
                    .iter()
                    .filter(|(_, c)| c.unit.is_some())
                    .map(|(&k, _)| k)
                    .collect();
                for conn in targets {
                    self.send(conn, Payload::QsyncMerged(merged.clone()));
                }
                let mut store = self.stats();
                store.stats.merges += 1;
                store.merged.push(merged);
                info!("merged {} tables", tables.len());
            }
            Err(e) => {
                warn!("merge failed: {e}");
                self.stats().stats.merge_failures += 1;
            }
        }
    }
}
