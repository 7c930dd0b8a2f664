//! Edge unit: the local learning loop plus a best-effort link to the brain.
//!
//! The control loop never blocks on the network. Outbound messages go into a
//! bounded outbox drained by a sender thread that (re)connects with
//! exponential backoff; inbound messages arrive on a channel that the loop
//! polls between steps. With no brain at all the unit behaves exactly like a
//! standalone trial.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, ErrorKind};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::protocol::{
    write_message, Bye, FleetMessage, Hello, Payload, TelemetrySnapshot, UnitId,
};
use crate::error::{Error, Result};
use crate::harness::{EpisodeRecord, TrialConfig, TrialRunner};
use crate::rl::{QTable, TargetLabel};

#[derive(Clone, Debug)]
pub struct UnitConfig {
    pub unit: UnitId,
    pub trial: TrialConfig,
    /// One TELEMETRY message every this many control steps.
    pub telemetry_every: u64,
    /// Outbox capacity; the oldest message is dropped when it is full.
    pub buffer_capacity: usize,
    /// Stop at first convergence like a standalone trial, or run to `max_steps`.
    pub stop_on_convergence: bool,
    /// Pause after every control step; zero runs flat out.
    pub step_delay: Duration,
    pub backoff_initial: Duration,
    pub backoff_max: Duration,
    /// How long to keep trying to deliver the outbox after the loop ends.
    pub flush_timeout: Duration,
}

impl UnitConfig {
    pub fn new(unit: UnitId, trial: TrialConfig) -> Self {
        UnitConfig {
            unit,
            trial,
            telemetry_every: 10,
            buffer_capacity: 256,
            stop_on_convergence: true,
            step_delay: Duration::ZERO,
            backoff_initial: Duration::from_millis(50),
            backoff_max: Duration::from_secs(2),
            flush_timeout: Duration::from_secs(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unit == super::protocol::BRAIN_ID {
            return Err(Error::validation("unit id 0 is reserved for the brain"));
        }
        if self.telemetry_every == 0 || self.buffer_capacity == 0 {
            return Err(Error::validation(
                "telemetry_every and buffer_capacity must be positive",
            ));
        }
        if self.backoff_initial.is_zero() || self.backoff_max < self.backoff_initial {
            return Err(Error::validation("need 0 < backoff_initial <= backoff_max"));
        }
        self.trial.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnitOutcome {
    pub record: EpisodeRecord,
    pub table: QTable,
    /// Messages the sender actually wrote to a socket.
    pub sent: u64,
    /// Messages evicted from a full outbox.
    pub dropped: u64,
    pub telemetry_queued: u64,
    pub pushes_queued: u64,
    pub merges_applied: u64,
    pub merges_rejected: u64,
    pub connects: u64,
    /// Targets received from the brain, in arrival order.
    pub targets: Vec<TargetLabel>,
}

struct Outbox {
    queue: Mutex<VecDeque<Payload>>,
    ready: Condvar,
    capacity: usize,
    dropped: AtomicU64,
}

impl Outbox {
    fn push(&self, p: Payload) {
        let mut q = self.queue.lock().expect("outbox poisoned");
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(p);
        self.ready.notify_one();
    }
}

struct Link {
    outbox: Arc<Outbox>,
    inbox: Receiver<FleetMessage>,
    closing: Arc<AtomicBool>,
    sent: Arc<AtomicU64>,
    connects: Arc<AtomicU64>,
    sender: JoinHandle<()>,
}

/// Runs one unit to completion. With `brain = None` no network activity happens.
pub fn unit_run(brain: Option<SocketAddr>, cfg: &UnitConfig) -> Result<UnitOutcome> {
    cfg.validate()?;
    let link = match brain {
        Some(addr) => Some(start_link(addr, cfg)?),
        None => None,
    };
    let mut runner = TrialRunner::new(&cfg.trial, None)?;
    let mut merge_every: Option<u64> = None;
    let mut targets = Vec::new();
    let (mut merges_applied, mut merges_rejected) = (0, 0);
    let (mut telemetry_queued, mut pushes_queued) = (0, 0);
    let start = Instant::now();
    let mut wall_ms = None;

    loop {
        if let Some(link) = &link {
            while let Ok(msg) = link.inbox.try_recv() {
                match msg.payload {
                    Payload::SetTarget(st) => {
                        debug!(
                            "{}: target {} merge_every {:?}",
                            cfg.unit, st.target, st.merge_every
                        );
                        if st.target != runner.config().target {
                            runner.set_target(st.target);
                        }
                        merge_every = st.merge_every.filter(|&n| n > 0);
                        targets.push(st.target);
                    }
                    Payload::QsyncMerged(table) => match runner.table_mut().replace_with(&table) {
                        Ok(()) => merges_applied += 1,
                        Err(e) => {
                            warn!("{}: merged table rejected: {e}", cfg.unit);
                            merges_rejected += 1;
                        }
                    },
                    other => warn!(
                        "{}: unexpected {} from brain",
                        cfg.unit,
                        other.kind().as_str()
                    ),
                }
            }
        }

        let done = if cfg.stop_on_convergence {
            runner.is_done()
        } else {
            runner.steps() >= cfg.trial.max_steps
        };
        if done {
            break;
        }

        let row = runner.step()?.clone();
        if wall_ms.is_none() && runner.first_convergence().is_some() {
            wall_ms = Some(start.elapsed().as_secs_f64() * 1e3);
        }
        if let Some(link) = &link {
            if row.t % cfg.telemetry_every == 0 {
                link.outbox.push(Payload::Telemetry(TelemetrySnapshot {
                    unit: cfg.unit,
                    t: row.t,
                    smoothed: row.smoothed,
                    state: row.state,
                    pwm: row.pwm,
                    epsilon: row.epsilon,
                    converged: runner.holding_target(),
                }));
                telemetry_queued += 1;
            }
            if let Some(n) = merge_every {
                if row.t % n == 0 {
                    link.outbox.push(Payload::QsyncPush(runner.table().clone()));
                    pushes_queued += 1;
                }
            }
        }
        if !cfg.step_delay.is_zero() {
            thread::sleep(cfg.step_delay);
        }
    }

    let wall = wall_ms.unwrap_or_else(|| start.elapsed().as_secs_f64() * 1e3);
    let (sent, dropped, connects) = match link {
        Some(link) => {
            link.outbox.push(Payload::Bye(Bye {
                reason: "done".into(),
            }));
            link.closing.store(true, Ordering::SeqCst);
            link.outbox.ready.notify_all();
            let _ = link.sender.join();
            (
                link.sent.load(Ordering::SeqCst),
                link.outbox.dropped.load(Ordering::SeqCst),
                link.connects.load(Ordering::SeqCst),
            )
        }
        None => (0, 0, 0),
    };
    let (record, table) = runner.finish(0, wall);
    info!(
        "{} finished after {} steps, {sent} messages sent",
        cfg.unit,
        record.rows.len()
    );
    Ok(UnitOutcome {
        record,
        table,
        sent,
        dropped,
        telemetry_queued,
        pushes_queued,
        merges_applied,
        merges_rejected,
        connects,
        targets,
    })
}

fn start_link(addr: SocketAddr, cfg: &UnitConfig) -> Result<Link> {
    let outbox = Arc::new(Outbox {
        queue: Mutex::new(VecDeque::new()),
        ready: Condvar::new(),
        capacity: cfg.buffer_capacity,
        dropped: AtomicU64::new(0),
    });
    let closing = Arc::new(AtomicBool::new(false));
    let sent = Arc::new(AtomicU64::new(0));
    let connects = Arc::new(AtomicU64::new(0));
    let (tx, rx) = mpsc::channel();
    let sender = {
        let s = SenderLoop {
            addr,
            unit: cfg.unit,
            hello: Hello {
                num_states: crate::rl::NUM_STATES,
                action_deltas: cfg.trial.agent.action_deltas.clone(),
            },
            outbox: outbox.clone(),
            closing: closing.clone(),
            sent: sent.clone(),
            connects: connects.clone(),
            inbox: tx,
            backoff_initial: cfg.backoff_initial,
            backoff_max: cfg.backoff_max,
            flush_timeout: cfg.flush_timeout,
            seq: 0,
        };
        thread::Builder::new()
            .name(format!("{}-send", cfg.unit))
            .spawn(move || s.run())?
    };
    Ok(Link {
        outbox,
        inbox: rx,
        closing,
        sent,
        connects,
        sender,
    })
}

struct SenderLoop {
    addr: SocketAddr,
    unit: UnitId,
    hello: Hello,
    outbox: Arc<Outbox>,
    closing: Arc<AtomicBool>,
    sent: Arc<AtomicU64>,
    connects: Arc<AtomicU64>,
    inbox: Sender<FleetMessage>,
    backoff_initial: Duration,
    backoff_max: Duration,
    flush_timeout: Duration,
    seq: u64,
}

struct Conn {
    stream: TcpStream,
    alive: Arc<AtomicBool>,
    reader: JoinHandle<()>,
}

impl Conn {
    fn close(self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        let _ = self.reader.join();
    }
}

impl SenderLoop {
    fn write(
        &mut self,
        stream: &mut TcpStream,
        payload: Payload,
    ) -> std::result::Result<(), Payload> {
        self.seq += 1;
        let msg = FleetMessage::new(self.unit, self.seq, payload);
        match write_message(stream, &msg) {
            Ok(()) => {
                self.sent.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Err(e) => {
                debug!("{}: write failed: {e}", self.unit);
                Err(msg.payload)
            }
        }
    }

    fn connect(&mut self) -> Option<Conn> {
        let mut stream = TcpStream::connect_timeout(&self.addr, Duration::from_millis(500)).ok()?;
        let _ = stream.set_nodelay(true);
        let hello = Payload::Hello(self.hello.clone());
        self.write(&mut stream, hello).ok()?;
        let read_half = stream.try_clone().ok()?;
        read_half
            .set_read_timeout(Some(Duration::from_millis(50)))
            .ok()?;
        let alive = Arc::new(AtomicBool::new(true));
        let reader = {
            let alive = alive.clone();
            let tx = self.inbox.clone();
            let unit = self.unit;
            thread::Builder::new()
                .name(format!("{unit}-recv"))
                .spawn(move || read_loop(unit, read_half, tx, alive))
                .ok()?
        };
        self.connects.fetch_add(1, Ordering::SeqCst);
        info!("{} connected to {}", self.unit, self.addr);
        Some(Conn {
            stream,
            alive,
            reader,
        })
    }

    fn run(mut self) {
        let mut conn: Option<Conn> = None;
        let mut backoff = self.backoff_initial;
        let mut next_attempt = Instant::now();
        let mut deadline: Option<Instant> = None;
        loop {
            if self.closing.load(Ordering::SeqCst) && deadline.is_none() {
                deadline = Some(Instant::now() + self.flush_timeout);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                break;
            }
            if conn
                .as_ref()
                .is_some_and(|c| !c.alive.load(Ordering::SeqCst))
            {
                if let Some(c) = conn.take() {
                    c.close();
                }
            }
            if conn.is_none() {
                if Instant::now() < next_attempt {
                    thread::sleep(Duration::from_millis(5).min(next_attempt - Instant::now()));
                    continue;
                }
                match self.connect() {
                    Some(c) => {
                        conn = Some(c);
                        backoff = self.backoff_initial;
                    }
                    None => {
                        next_attempt = Instant::now() + backoff;
                        backoff = (backoff * 2).min(self.backoff_max);
                        continue;
                    }
                }
            }

            let next = {
                let mut q = self.outbox.queue.lock().expect("outbox poisoned");
                if q.is_empty() {
                    if self.closing.load(Ordering::SeqCst) {
                        break;
                    }
                    q = self
                        .outbox
                        .ready
                        .wait_timeout(q, Duration::from_millis(20))
                        .expect("outbox poisoned")
                        .0;
                }
                q.pop_front()
            };
            let Some(payload) = next else { continue };
            let c = conn.as_mut().expect("connected above");
            if let Err(payload) = self.write(&mut c.stream, payload) {
                self.outbox
                    .queue
                    .lock()
                    .expect("outbox poisoned")
                    .push_front(payload);
                if let Some(c) = conn.take() {
                    c.close();
                }
                next_attempt = Instant::now() + backoff;
            }
        }
        if let Some(c) = conn {
            c.close();
        }
    }
}

fn read_loop(unit: UnitId, stream: TcpStream, tx: Sender<FleetMessage>, alive: Arc<AtomicBool>) {
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
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
                        if tx.send(msg).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        warn!("{unit}: malformed frame from brain: {e}");
                        break;
                    }
                }
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if !alive.load(Ordering::SeqCst) {
                    break;
                }
            }
            Err(_) => break,
        }
    }
    alive.store(false, Ordering::SeqCst);
}
