//! Wire format: one JSON object per line,
//! `{"kind": "...", "unit": <u32>, "seq": <u64>, "payload": {...}}`.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::env::{PwmLevel, ADC_MAX};
use crate::error::{Error, Result};
use crate::rl::{QTable, StateIndex, TargetLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(pub u32);

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unit-{}", self.0)
    }
}

/// Sender id used by the brain.
pub const BRAIN_ID: UnitId = UnitId(0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MessageKind {
    Hello,
    SetTarget,
    Telemetry,
    QsyncPush,
    QsyncMerged,
    Bye,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Hello => "HELLO",
            MessageKind::SetTarget => "SET_TARGET",
            MessageKind::Telemetry => "TELEMETRY",
            MessageKind::QsyncPush => "QSYNC_PUSH",
            MessageKind::QsyncMerged => "QSYNC_MERGED",
            MessageKind::Bye => "BYE",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "HELLO" => MessageKind::Hello,
            "SET_TARGET" => MessageKind::SetTarget,
            "TELEMETRY" => MessageKind::Telemetry,
            "QSYNC_PUSH" => MessageKind::QsyncPush,
            "QSYNC_MERGED" => MessageKind::QsyncMerged,
            "BYE" => MessageKind::Bye,
            other => return Err(Error::Protocol(format!("unknown message kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub num_states: usize,
    pub action_deltas: Vec<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetTarget {
    pub target: TargetLabel,
    /// Steps between Q-table pushes; absent when merging is off.
    #[serde(default)]
    pub merge_every: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetrySnapshot {
    pub unit: UnitId,
    pub t: u64,
    pub smoothed: f64,
    pub state: StateIndex,
    pub pwm: PwmLevel,
    pub epsilon: f64,
    pub converged: bool,
}

impl TelemetrySnapshot {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=ADC_MAX as f64).contains(&self.smoothed) {
            return Err(Error::Protocol(format!(
                "telemetry smoothed {} out of range",
                self.smoothed
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Protocol(format!(
                "telemetry epsilon {} out of range",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bye {
    #[serde(default)]
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Hello(Hello),
    SetTarget(SetTarget),
    Telemetry(TelemetrySnapshot),
    QsyncPush(QTable),
    QsyncMerged(QTable),
    Bye(Bye),
}

impl Payload {
    pub fn kind(&self) -> MessageKind {
        match self {
            Payload::Hello(_) => MessageKind::Hello,
            Payload::SetTarget(_) => MessageKind::SetTarget,
            Payload::Telemetry(_) => MessageKind::Telemetry,
            Payload::QsyncPush(_) => MessageKind::QsyncPush,
            Payload::QsyncMerged(_) => MessageKind::QsyncMerged,
            Payload::Bye(_) => MessageKind::Bye,
        }
    }

    fn to_value(&self) -> Result<Value> {
        Ok(match self {
            Payload::Hello(b) => serde_json::to_value(b)?,
            Payload::SetTarget(b) => serde_json::to_value(b)?,
            Payload::Telemetry(b) => serde_json::to_value(b)?,
            Payload::QsyncPush(t) | Payload::QsyncMerged(t) => serde_json::to_value(t)?,
            Payload::Bye(b) => serde_json::to_value(b)?,
        })
    }

    fn from_value(kind: MessageKind, v: Value) -> Result<Self> {
        let bad =
            |e: serde_json::Error| Error::Protocol(format!("bad {} payload: {e}", kind.as_str()));
        Ok(match kind {
            MessageKind::Hello => Payload::Hello(serde_json::from_value(v).map_err(bad)?),
            MessageKind::SetTarget => Payload::SetTarget(serde_json::from_value(v).map_err(bad)?),
            MessageKind::Telemetry => {
                let snap: TelemetrySnapshot = serde_json::from_value(v).map_err(bad)?;
                snap.validate()?;
                Payload::Telemetry(snap)
            }
            MessageKind::QsyncPush => Payload::QsyncPush(serde_json::from_value(v).map_err(bad)?),
            MessageKind::QsyncMerged => {
                Payload::QsyncMerged(serde_json::from_value(v).map_err(bad)?)
            }
            MessageKind::Bye => Payload::Bye(serde_json::from_value(v).map_err(bad)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FleetMessage {
    pub unit: UnitId,
    pub seq: u64,
    pub payload: Payload,
}

#[derive(Serialize)]
struct WireOut<'a> {
    kind: &'a str,
    unit: u32,
    seq: u64,
    payload: Value,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    kind: String,
    unit: u32,
    seq: u64,
    payload: Value,
}

impl FleetMessage {
    pub fn new(unit: UnitId, seq: u64, payload: Payload) -> Self {
        FleetMessage { unit, seq, payload }
    }

    pub fn kind(&self) -> MessageKind {
        self.payload.kind()
    }

    /// Single-line JSON, without the trailing newline.
    pub fn encode(&self) -> Result<String> {
        let wire = WireOut {
            kind: self.kind().as_str(),
            unit: self.unit.0,
            seq: self.seq,
            payload: self.payload.to_value()?,
        };
        Ok(serde_json::to_string(&wire)?)
    }

    pub fn decode(line: &str) -> Result<Self> {
        let wire: WireIn = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
        let kind = MessageKind::parse(&wire.kind)?;
        Ok(FleetMessage {
            unit: UnitId(wire.unit),
            seq: wire.seq,
            payload: Payload::from_value(kind, wire.payload)?,
        })
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &FleetMessage) -> Result<()> {
    let mut line = msg.encode()?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads one frame; `Ok(None)` at end of stream. Blank lines are skipped.
pub fn read_message<R: BufRead>(r: &mut R) -> Result<Option<FleetMessage>> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            return FleetMessage::decode(&line).map(Some);
        }
    }
}
