//! Digital-twin link: a line-delimited JSON protocol, a controller emulator
//! that executes joint moves in simulated or wall-clock time, a TCP server
//! for it, and the matching client.

use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::arm::{ArmModel, JointVector, DOF};
use crate::plan::{Plan, MOVE_SPEED};

pub const PROTOCOL_VERSION: &str = "1";

/// Reply error codes.
pub mod codes {
    pub const BUSY: &str = "busy";
    pub const JOINT_LIMIT: &str = "joint-limit";
    pub const BAD_ARITY: &str = "bad-arity";
    pub const BAD_SPEED: &str = "bad-speed";
    pub const BAD_DEVICE: &str = "bad-device";
    pub const BAD_STEP: &str = "bad-step";
    pub const MALFORMED: &str = "malformed";
    pub const UNKNOWN_TYPE: &str = "unknown-type";
    pub const NOT_A_REQUEST: &str = "not-a-request";
    pub const SIM_TIME_ONLY: &str = "sim-time-only";
    pub const VERSION: &str = "unsupported-version";
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type '{0}'")]
    UnknownType(String),
    #[error("joint payload has {0} values, expected 6")]
    BadArity(usize),
}

impl DecodeError {
    pub fn code(&self) -> &'static str {
        match self {
            DecodeError::Malformed(_) => codes::MALFORMED,
            DecodeError::UnknownType(_) => codes::UNKNOWN_TYPE,
            DecodeError::BadArity(_) => codes::BAD_ARITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    Sim,
    Wall,
}

/// Message payloads. Requests: HELLO, MOVEJ, GETPOS, LASER, STATE.
/// Replies: ACK, POS, ERR.
#[derive(Clone, Debug, PartialEq)]
pub enum Body {
    Hello {
        version: String,
    },
    MoveJ {
        q: JointVector,
        speed: f64,
    },
    GetPos,
    /// Sim-clock advance (`dt`) and/or motion halt; replied with POS.
    State {
        dt: Option<f64>,
        halt: bool,
    },
    Laser {
        device: u32,
        on: bool,
    },
    Ack {
        version: Option<String>,
        mode: Option<ClockMode>,
    },
    Pos {
        q: JointVector,
        moving: bool,
        clock: f64,
    },
    Err {
        code: String,
        text: String,
    },
}

impl Body {
    pub fn type_name(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "HELLO",
            Body::MoveJ { .. } => "MOVEJ",
            Body::GetPos => "GETPOS",
            Body::State { .. } => "STATE",
            Body::Laser { .. } => "LASER",
            Body::Ack { .. } => "ACK",
            Body::Pos { .. } => "POS",
            Body::Err { .. } => "ERR",
        }
    }

    pub fn is_request(&self) -> bool {
        matches!(
            self,
            Body::Hello { .. } | Body::MoveJ { .. } | Body::GetPos | Body::State { .. } | Body::Laser { .. }
        )
    }

    pub fn err(code: &str, text: impl Into<String>) -> Self {
        Body::Err {
            code: code.into(),
            text: text.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwinMessage {
    pub id: u64,
    pub body: Body,
}

impl TwinMessage {
    pub fn new(id: u64, body: Body) -> Self {
        Self { id, body }
    }
}

/// One JSON object, no trailing newline.
pub fn encode(m: &TwinMessage) -> String {
    let mut o = Map::new();
    o.insert("type".into(), json!(m.body.type_name()));
    o.insert("id".into(), json!(m.id));
    match &m.body {
        Body::Hello { version } => {
            o.insert("version".into(), json!(version));
        }
        Body::MoveJ { q, speed } => {
            o.insert("q".into(), json!(q.0));
            o.insert("speed".into(), json!(speed));
        }
        Body::GetPos => {}
        Body::State { dt, halt } => {
            if let Some(dt) = dt {
                o.insert("dt".into(), json!(dt));
            }
            if *halt {
                o.insert("halt".into(), json!(true));
            }
        }
        Body::Laser { device, on } => {
            o.insert("device".into(), json!(device));
            o.insert("on".into(), json!(on));
        }
        Body::Ack { version, mode } => {
            if let Some(v) = version {
                o.insert("version".into(), json!(v));
            }
            if let Some(m) = mode {
                o.insert("mode".into(), json!(m));
            }
        }
        Body::Pos { q, moving, clock } => {
            o.insert("q".into(), json!(q.0));
            o.insert("moving".into(), json!(moving));
            o.insert("clock".into(), json!(clock));
        }
        Body::Err { code, text } => {
            o.insert("code".into(), json!(code));
            o.insert("text".into(), json!(text));
        }
    }
    Value::Object(o).to_string()
}

fn malformed(s: impl Into<String>) -> DecodeError {
    DecodeError::Malformed(s.into())
}

fn field<'a>(o: &'a Map<String, Value>, k: &str) -> Result<&'a Value, DecodeError> {
    o.get(k).ok_or_else(|| malformed(format!("missing field '{k}'")))
}

fn f64_field(o: &Map<String, Value>, k: &str) -> Result<f64, DecodeError> {
    field(o, k)?
        .as_f64()
        .ok_or_else(|| malformed(format!("'{k}' must be a number")))
}

fn bool_field(o: &Map<String, Value>, k: &str) -> Result<bool, DecodeError> {
    field(o, k)?
        .as_bool()
        .ok_or_else(|| malformed(format!("'{k}' must be a boolean")))
}

fn str_field(o: &Map<String, Value>, k: &str) -> Result<String, DecodeError> {
    Ok(field(o, k)?
        .as_str()
        .ok_or_else(|| malformed(format!("'{k}' must be a string")))?
        .to_owned())
}

fn joints(o: &Map<String, Value>) -> Result<JointVector, DecodeError> {
    let arr = field(o, "q")?
        .as_array()
        .ok_or_else(|| malformed("'q' must be an array"))?;
    let vals: Vec<f64> = arr
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| malformed("'q' must hold numbers")))
        .collect::<Result<_, _>>()?;
    if vals.len() != DOF {
        return Err(DecodeError::BadArity(vals.len()));
    }
    Ok(JointVector(std::array::from_fn(|i| vals[i])))
}

/// Best-effort id of a (possibly invalid) line, for error replies.
pub fn salvage_id(line: &str) -> u64 {
    serde_json::from_str::<Value>(line.trim())
        .ok()
        .and_then(|v| v.get("id").and_then(Value::as_u64))
        .unwrap_or(0)
}

pub fn decode(line: &str) -> Result<TwinMessage, DecodeError> {
    let v: Value = serde_json::from_str(line.trim()).map_err(|e| malformed(e.to_string()))?;
    let o = v.as_object().ok_or_else(|| malformed("expected an object"))?;
    let ty = str_field(o, "type")?;
    let id = field(o, "id")?
        .as_u64()
        .ok_or_else(|| malformed("'id' must be a non-negative integer"))?;
    let body = match ty.as_str() {
        "HELLO" => Body::Hello {
            version: str_field(o, "version")?,
        },
        "MOVEJ" => Body::MoveJ {
            q: joints(o)?,
            speed: f64_field(o, "speed")?,
        },
        "GETPOS" => Body::GetPos,
        "STATE" => Body::State {
            dt: match o.get("dt") {
                None => None,
                Some(_) => Some(f64_field(o, "dt")?),
            },
            halt: match o.get("halt") {
                None => false,
                Some(_) => bool_field(o, "halt")?,
            },
        },
        "LASER" => Body::Laser {
            device: field(o, "device")?
                .as_u64()
                .and_then(|d| u32::try_from(d).ok())
                .ok_or_else(|| malformed("'device' must be a small non-negative integer"))?,
            on: bool_field(o, "on")?,
        },
        "ACK" => Body::Ack {
            version: match o.get("version") {
                None => None,
                Some(_) => Some(str_field(o, "version")?),
            },
            mode: match o.get("mode") {
                None => None,
                Some(m) => {
                    Some(serde_json::from_value(m.clone()).map_err(|_| malformed("'mode' must be sim or wall"))?)
                }
            },
        },
        "POS" => Body::Pos {
            q: joints(o)?,
            moving: bool_field(o, "moving")?,
            clock: f64_field(o, "clock")?,
        },
        "ERR" => Body::Err {
            code: str_field(o, "code")?,
            text: str_field(o, "text")?,
        },
        other => return Err(DecodeError::UnknownType(other.to_owned())),
    };
    Ok(TwinMessage { id, body })
}

/// Emulated controller state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmulatorState {
    pub q: JointVector,
    pub moving: bool,
    pub lasers: Vec<bool>,
    /// Seconds.
    pub clock: f64,
    pub start: JointVector,
    pub goal: JointVector,
    /// Per-joint velocity magnitudes of the current move, rad/s.
    pub rates: [f64; DOF],
    pub move_started: f64,
    /// Clock value at which the last move arrived.
    pub arrived_at: Option<f64>,
    /// Closed-form duration of the current (or last) move.
    pub move_duration: f64,
}

impl EmulatorState {
    pub fn at_rest(q: JointVector, lasers: usize) -> Self {
        Self {
            q,
            moving: false,
            lasers: vec![false; lasers],
            clock: 0.0,
            start: q,
            goal: q,
            rates: [0.0; DOF],
            move_started: 0.0,
            arrived_at: Some(0.0),
            move_duration: 0.0,
        }
    }

    /// Starts a constant-velocity move: every joint runs at `speed` times its
    /// own maximum; the move ends when the slowest joint arrives.
    pub fn start_move(&mut self, arm: &ArmModel, goal: JointVector, speed: f64) {
        self.start = self.q;
        self.goal = goal;
        self.rates = std::array::from_fn(|i| speed * arm.joints[i].max_speed);
        self.move_started = self.clock;
        self.move_duration = arm.move_time(&self.q, &goal, speed);
        if self.move_duration == 0.0 {
            self.q = goal;
            self.moving = false;
            self.arrived_at = Some(self.clock);
        } else {
            self.moving = true;
            self.arrived_at = None;
        }
    }

    pub fn halt(&mut self) {
        if self.moving {
            self.moving = false;
            self.goal = self.q;
        }
    }
}

/// Advances the emulator clock by `dt` seconds. Joint positions are
/// evaluated from the move start, so each joint lies on the segment from
/// its start to its goal and lands on the goal exactly.
pub fn emulator_step(state: &EmulatorState, dt: f64) -> EmulatorState {
    let mut s = state.clone();
    s.clock += dt;
    if !s.moving {
        return s;
    }
    let t = s.clock - s.move_started;
    let mut all = true;
    for i in 0..DOF {
        let delta = s.goal[i] - s.start[i];
        let travelled = s.rates[i] * t;
        if travelled >= delta.abs() {
            s.q[i] = s.goal[i];
        } else {
            s.q[i] = s.start[i] + delta.signum() * travelled;
            all = false;
        }
    }
    if all {
        s.moving = false;
        s.arrived_at = Some(s.move_started + s.move_duration);
    }
    s
}

/// Controller emulator: owns the arm model and the state, answers requests.
#[derive(Clone, Debug)]
pub struct Emulator {
    pub arm: ArmModel,
    pub state: EmulatorState,
    pub mode: ClockMode,
    /// Wall-clock reference for `ClockMode::Wall`.
    last_tick: Option<Instant>,
}

impl Emulator {
    pub fn new(arm: ArmModel, lasers: usize, mode: ClockMode) -> Self {
        let state = EmulatorState::at_rest(arm.home, lasers);
        Self {
            arm,
            state,
            mode,
            last_tick: None,
        }
    }

    /// Brings the clock up to real time in wall-clock mode.
    fn tick(&mut self) {
        if self.mode == ClockMode::Wall {
            let now = Instant::now();
            if let Some(prev) = self.last_tick {
                let dt = now.duration_since(prev).as_secs_f64();
                if dt > 0.0 {
                    self.state = emulator_step(&self.state, dt);
                }
            }
            self.last_tick = Some(now);
        }
    }

    fn pos(&self) -> Body {
        Body::Pos {
            q: self.state.q,
            moving: self.state.moving,
            clock: self.state.clock,
        }
    }

    pub fn handle(&mut self, m: &TwinMessage) -> TwinMessage {
        self.tick();
        let body = match &m.body {
            Body::Hello { version } => {
                if version == PROTOCOL_VERSION {
                    Body::Ack {
                        version: Some(PROTOCOL_VERSION.into()),
                        mode: Some(self.mode),
                    }
                } else {
                    Body::err(codes::VERSION, format!("server speaks version {PROTOCOL_VERSION}"))
                }
            }
            Body::MoveJ { q, speed } => {
                if !(speed.is_finite() && *speed > 0.0 && *speed <= 1.0) {
                    Body::err(codes::BAD_SPEED, "speed must lie in (0, 1]")
                } else if self.state.moving {
                    Body::err(codes::BUSY, "a move is in progress")
                } else if let Err(e) = self.arm.check_limits(q) {
                    Body::err(codes::JOINT_LIMIT, e.to_string())
                } else {
                    self.state.start_move(&self.arm, *q, *speed);
                    Body::Ack {
                        version: None,
                        mode: None,
                    }
                }
            }
            Body::GetPos => self.pos(),
            Body::State { dt, halt } => match dt {
                Some(_) if self.mode == ClockMode::Wall => {
                    Body::err(codes::SIM_TIME_ONLY, "clock steps need a sim-time emulator")
                }
                Some(dt) if !(dt.is_finite() && *dt >= 0.0) => Body::err(codes::BAD_STEP, "dt must be >= 0"),
                _ => {
                    if *halt {
                        self.state.halt();
                    }
                    if let Some(dt) = dt {
                        if *dt > 0.0 {
                            self.state = emulator_step(&self.state, *dt);
                        }
                    }
                    self.pos()
                }
            },
            Body::Laser { device, on } => match self.state.lasers.get_mut(*device as usize) {
                Some(l) => {
                    *l = *on;
                    Body::Ack {
                        version: None,
                        mode: None,
                    }
                }
                None => Body::err(codes::BAD_DEVICE, format!("no laser device {device}")),
            },
            other => Body::err(codes::NOT_A_REQUEST, format!("{} is a reply type", other.type_name())),
        };
        TwinMessage::new(m.id, body)
    }

    /// Decodes and answers one raw line.
    pub fn handle_line(&mut self, line: &str) -> TwinMessage {
        match decode(line) {
            Ok(m) => self.handle(&m),
            Err(e) => TwinMessage::new(salvage_id(line), Body::err(e.code(), e.to_string())),
        }
    }
}

/// Running emulator service; dropping the handle does not stop it, call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub emulator: Arc<Mutex<Emulator>>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn snapshot(&self) -> EmulatorState {
        self.emulator.lock().expect("emulator lock").state.clone()
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_connection(stream: TcpStream, emulator: &Mutex<Emulator>, stop: &AtomicBool) {
    let Ok(write) = stream.try_clone() else { return };
    let mut write = write;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if stop.load(Ordering::SeqCst) {
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let reply = emulator.lock().expect("emulator lock").handle_line(&line);
        if writeln!(write, "{}", encode(&reply)).is_err() {
            break;
        }
    }
}

/// Serves `emulator` on `listener`, one controller connection at a time;
/// extra connections get `ERR busy` and are closed.
pub fn serve_emulator(emulator: Emulator, listener: TcpListener) -> std::io::Result<ServerHandle> {
    let addr = listener.local_addr()?;
    let emulator = Arc::new(Mutex::new(emulator));
    let stop = Arc::new(AtomicBool::new(false));
    let busy = Arc::new(AtomicBool::new(false));
    let (em, st) = (emulator.clone(), stop.clone());
    let thread = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if st.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut conn) = conn else { continue };
            let _ = conn.set_nodelay(true);
            if busy.swap(true, Ordering::SeqCst) {
                let _ = writeln!(
                    conn,
                    "{}",
                    encode(&TwinMessage::new(
                        0,
                        Body::err(codes::BUSY, "another controller is connected")
                    ))
                );
                let _ = conn.shutdown(Shutdown::Both);
                continue;
            }
            let (em, st, busy) = (em.clone(), st.clone(), busy.clone());
            std::thread::spawn(move || {
                log::info!("controller connected");
                serve_connection(conn, &em, &st);
                busy.store(false, Ordering::SeqCst);
                log::info!("controller disconnected");
            });
        }
    });
    Ok(ServerHandle {
        addr,
        emulator,
        stop,
        thread: Some(thread),
    })
}

#[derive(Debug, Error)]
pub enum TwinError {
    #[error("connection: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed by controller")]
    Closed,
    #[error("bad reply: {0}")]
    Decode(#[from] DecodeError),
    #[error("reply id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("controller error {code}: {text}")]
    Remote { code: String, text: String },
    #[error("unexpected {0} reply")]
    Unexpected(&'static str),
}

/// Controller position report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Position {
    pub q: JointVector,
    pub moving: bool,
    pub clock: f64,
}

/// One request/reply exchange as seen on the wire.
#[derive(Clone, Debug, PartialEq)]
pub struct Exchange {
    pub request: String,
    pub reply: String,
}

/// Synchronous client: one outstanding request at a time, replies matched
/// by id.
pub struct TwinClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_id: u64,
    pub mode: ClockMode,
    pub log: Vec<Exchange>,
    pub keep_log: bool,
}

impl TwinClient {
    /// Connects and performs the HELLO handshake.
    pub fn connect(addr: &str) -> Result<Self, TwinError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut c = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
            next_id: 1,
            mode: ClockMode::Sim,
            log: Vec::new(),
            keep_log: false,
        };
        match c.request(Body::Hello {
            version: PROTOCOL_VERSION.into(),
        })? {
            Body::Ack { mode, .. } => c.mode = mode.unwrap_or(ClockMode::Wall),
            _ => return Err(TwinError::Unexpected("HELLO")),
        }
        Ok(c)
    }

    pub fn request(&mut self, body: Body) -> Result<Body, TwinError> {
        let id = self.next_id;
        self.next_id += 1;
        let line = encode(&TwinMessage::new(id, body));
        writeln!(self.writer, "{line}")?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(TwinError::Closed);
        }
        if self.keep_log {
            self.log.push(Exchange {
                request: line,
                reply: reply.trim_end().to_owned(),
            });
        }
        let m = decode(&reply)?;
        if m.id != id {
            return Err(TwinError::IdMismatch {
                expected: id,
                got: m.id,
            });
        }
        match m.body {
            Body::Err { code, text } => Err(TwinError::Remote { code, text }),
            b => Ok(b),
        }
    }

    fn position(&mut self, body: Body) -> Result<Position, TwinError> {
        match self.request(body)? {
            Body::Pos { q, moving, clock } => Ok(Position { q, moving, clock }),
            _ => Err(TwinError::Unexpected("non-POS")),
        }
    }

    pub fn movej(&mut self, q: JointVector, speed: f64) -> Result<(), TwinError> {
        self.request(Body::MoveJ { q, speed }).map(drop)
    }

    pub fn getpos(&mut self) -> Result<Position, TwinError> {
        self.position(Body::GetPos)
    }

    pub fn step(&mut self, dt: f64) -> Result<Position, TwinError> {
        self.position(Body::State {
            dt: Some(dt),
            halt: false,
        })
    }

    pub fn halt(&mut self) -> Result<Position, TwinError> {
        self.position(Body::State { dt: None, halt: true })
    }

    pub fn laser(&mut self, device: u32, on: bool) -> Result<(), TwinError> {
        self.request(Body::Laser { device, on }).map(drop)
    }

    /// Waits (stepping the sim clock, or sleeping in wall mode) until the
    /// current move has finished.
    pub fn wait_idle(&mut self, dt: f64, timeout: Duration) -> Result<Position, TwinError> {
        let deadline = Instant::now() + timeout;
        loop {
            let p = match self.mode {
                ClockMode::Sim => self.step(dt)?,
                ClockMode::Wall => {
                    std::thread::sleep(Duration::from_secs_f64(dt.min(0.05)));
                    self.getpos()?
                }
            };
            if !p.moving {
                return Ok(p);
            }
            if Instant::now() > deadline {
                return Err(TwinError::Unexpected("timeout while waiting for arrival"));
            }
        }
    }
}

/// Program file: the wire-message sequence a Plan executes, one encoded
/// message per line (HELLO, then per task MOVEJ, LASER on, LASER off).
pub fn export_program(plan: &Plan) -> String {
    let mut id = 0;
    let mut next = |body: Body| {
        id += 1;
        encode(&TwinMessage::new(id, body))
    };
    let mut lines = vec![next(Body::Hello {
        version: PROTOCOL_VERSION.into(),
    })];
    for s in &plan.solutions {
        lines.push(next(Body::MoveJ {
            q: s.q,
            speed: MOVE_SPEED,
        }));
        lines.push(next(Body::Laser {
            device: s.device as u32,
            on: true,
        }));
        lines.push(next(Body::Laser {
            device: s.device as u32,
            on: false,
        }));
    }
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

/// Parses a program file back into messages.
pub fn parse_program(text: &str) -> Result<Vec<TwinMessage>, DecodeError> {
    text.lines().filter(|l| !l.trim().is_empty()).map(decode).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_messages() -> Vec<TwinMessage> {
        let q = JointVector([0.1, -0.2, 0.3, -1e-17, 2.5, -3.0]);
        vec![
            TwinMessage::new(1, Body::Hello { version: "1".into() }),
            TwinMessage::new(
                2,
                Body::MoveJ {
                    q: JointVector::zeros(),
                    speed: 1.0,
                },
            ),
            TwinMessage::new(3, Body::MoveJ { q, speed: 0.25 }),
            TwinMessage::new(4, Body::GetPos),
            TwinMessage::new(
                5,
                Body::State {
                    dt: Some(0.05),
                    halt: false,
                },
            ),
            TwinMessage::new(6, Body::State { dt: None, halt: true }),
            TwinMessage::new(7, Body::Laser { device: 1, on: true }),
            TwinMessage::new(
                8,
                Body::Ack {
                    version: Some("1".into()),
                    mode: Some(ClockMode::Sim),
                },
            ),
            TwinMessage::new(
                9,
                Body::Ack {
                    version: None,
                    mode: None,
                },
            ),
            TwinMessage::new(
                10,
                Body::Pos {
                    q,
                    moving: true,
                    clock: 12.125,
                },
            ),
            TwinMessage::new(u64::MAX, Body::err("busy", "a \"quoted\"\nline")),
        ]
    }

    #[test]
    fn round_trip_examples() {
        for m in sample_messages() {
            let line = encode(&m);
            assert!(!line.contains('\n'));
            assert_eq!(decode(&line).unwrap(), m);
        }
    }

    #[test]
    fn decode_errors() {
        let line = encode(&TwinMessage::new(
            2,
            Body::MoveJ {
                q: JointVector::zeros(),
                speed: 1.0,
            },
        ));
        assert!(matches!(
            decode(&line[..line.len() - 3]),
            Err(DecodeError::Malformed(_))
        ));
        assert!(matches!(
            decode(r#"{"type":"JUMP","id":1}"#),
            Err(DecodeError::UnknownType(_))
        ));
        assert_eq!(
            decode(r#"{"type":"MOVEJ","id":1,"q":[0,0,0,0,0],"speed":1}"#),
            Err(DecodeError::BadArity(5))
        );
        assert!(matches!(
            decode(r#"{"type":"GETPOS","id":-1}"#),
            Err(DecodeError::Malformed(_))
        ));
        assert!(matches!(decode(r#"[1,2]"#), Err(DecodeError::Malformed(_))));
        assert!(matches!(decode(""), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn fuzz_never_panics() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let seeds: Vec<String> = sample_messages().iter().map(encode).collect();
        for i in 0..10_000 {
            let line: Vec<u8> = if i % 2 == 0 {
                (0..rng.random_range(0..80)).map(|_| rng.random()).collect()
            } else {
                // Mutate a valid line.
                let mut b = seeds[i % seeds.len()].clone().into_bytes();
                for _ in 0..rng.random_range(1..4) {
                    let k = rng.random_range(0..b.len());
                    b[k] = rng.random();
                }
                b
            };
            let s = String::from_utf8_lossy(&line);
            let _ = decode(&s);
            let mut em = Emulator::new(ArmModel::default_6r(), 2, ClockMode::Sim);
            let _ = em.handle_line(&s);
        }
    }

    #[test]
    fn step_examples() {
        let arm = ArmModel::default_6r();
        let mut s = EmulatorState::at_rest(JointVector::zeros(), 1);
        s.start_move(&arm, JointVector::zeros(), 1.0);
        assert!(!s.moving);
        assert_eq!(s.q, JointVector::zeros());

        let goal = JointVector::from_degrees([60.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        s.start_move(&arm, goal, 1.0);
        let half = emulator_step(&s, 0.5);
        assert!((half.q[0] - 30f64.to_radians()).abs() < 1e-12 && half.moving);
        let done = emulator_step(&half, 0.5);
        assert!(!done.moving);
        assert_eq!(done.q, goal);
        assert!((done.arrived_at.unwrap() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn arrival_time_and_no_overshoot(seed in 0u64..500, speed in 0.05f64..1.0, dt in 0.01f64..0.3) {
            let arm = ArmModel::default_6r();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rand_q = |rng: &mut ChaCha8Rng| JointVector(std::array::from_fn(|i| rng.random_range(arm.joints[i].lo..arm.joints[i].hi)));
            let start = rand_q(&mut rng);
            let goal = rand_q(&mut rng);
            let mut s = EmulatorState::at_rest(start, 0);
            s.start_move(&arm, goal, speed);
            let expect = arm.move_time(&start, &goal, speed);
            let mut steps = 0;
            while s.moving {
                s = emulator_step(&s, dt);
                steps += 1;
                for i in 0..DOF {
                    let (lo, hi) = if start[i] <= goal[i] { (start[i], goal[i]) } else { (goal[i], start[i]) };
                    prop_assert!(s.q[i] >= lo && s.q[i] <= hi);
                }
            }
            prop_assert_eq!(s.q, goal);
            prop_assert!((steps as f64 * dt - expect) < dt + 1e-9 && steps as f64 * dt >= expect - 1e-9);
            prop_assert_eq!(s.arrived_at, Some(expect));
        }
    }

    #[test]
    fn emulator_replies() {
        let mut em = Emulator::new(ArmModel::default_6r(), 2, ClockMode::Sim);
        let r = em.handle(&TwinMessage::new(1, Body::Hello { version: "1".into() }));
        assert_eq!(
            r.body,
            Body::Ack {
                version: Some("1".into()),
                mode: Some(ClockMode::Sim)
            }
        );
        let r = em.handle_line(r#"{"type":"MOVEJ","id":2,"q":[0,0,0,0,0],"speed":1}"#);
        assert_eq!(
            (r.id, r.body.clone()),
            (2, Body::err(codes::BAD_ARITY, "joint payload has 5 values, expected 6"))
        );
        let far = JointVector::from_degrees([90.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            em.handle(&TwinMessage::new(3, Body::MoveJ { q: far, speed: 1.0 })).body,
            Body::Ack { .. }
        ));
        assert!(
            matches!(em.handle(&TwinMessage::new(4, Body::MoveJ { q: far, speed: 1.0 })).body, Body::Err { ref code, .. } if code == codes::BUSY)
        );
        match em
            .handle(&TwinMessage::new(
                5,
                Body::State {
                    dt: Some(0.5),
                    halt: false,
                },
            ))
            .body
        {
            Body::Pos { q, moving, .. } => assert!(moving && q[0] > 0.0 && q[0] < far[0]),
            b => panic!("{b:?}"),
        }
        let bad = JointVector::from_degrees([0.0, 0.0, 0.0, 0.0, 0.0, 175.0]);
        em.handle(&TwinMessage::new(6, Body::State { dt: None, halt: true }));
        assert!(
            matches!(em.handle(&TwinMessage::new(7, Body::MoveJ { q: bad, speed: 1.0 })).body, Body::Err { ref code, .. } if code == codes::JOINT_LIMIT)
        );
        assert!(matches!(
            em.handle(&TwinMessage::new(8, Body::Laser { device: 5, on: true }))
                .body,
            Body::Err { .. }
        ));
        assert!(
            matches!(em.handle(&TwinMessage::new(9, Body::MoveJ { q: far, speed: 0.0 })).body, Body::Err { ref code, .. } if code == codes::BAD_SPEED)
        );
    }

    #[test]
    fn server_session_discipline() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let server = serve_emulator(Emulator::new(ArmModel::default_6r(), 2, ClockMode::Sim), listener).unwrap();
        let addr = server.addr.to_string();
        let mut c = TwinClient::connect(&addr).unwrap();
        c.keep_log = true;

        // A second controller is turned away.
        let mut other = BufReader::new(TcpStream::connect(&addr).unwrap());
        let mut line = String::new();
        other.read_line(&mut line).unwrap();
        assert!(matches!(decode(&line).unwrap().body, Body::Err { ref code, .. } if code == codes::BUSY));

        // Long move: immediate GETPOS lands strictly between start and goal.
        let goal = JointVector::from_degrees([120.0, 30.0, 0.0, 0.0, 0.0, 0.0]);
        c.movej(goal, 1.0).unwrap();
        let p = c.step(0.1).unwrap();
        assert!(p.moving && p.q[0] > 0.0 && p.q[0] < goal[0]);
        c.wait_idle(0.05, Duration::from_secs(5)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        while c.log.len() < 1000 {
            let r = match rng.random_range(0..4) {
                0 => c.getpos().map(drop),
                1 => c.step(rng.random_range(0.0..0.5)).map(drop),
                2 => c.laser(rng.random_range(0..3), rng.random()).map(drop),
                _ => c
                    .movej(
                        JointVector::from_degrees([rng.random_range(-90.0..90.0), 0.0, 0.0, 0.0, 0.0, 0.0]),
                        1.0,
                    )
                    .map(drop),
            };
            if let Err(e) = r {
                assert!(matches!(e, TwinError::Remote { .. }), "{e}");
            }
        }
        // Replies match requests id-for-id, in order.
        let ids: Vec<(u64, u64)> = c
            .log
            .iter()
            .map(|x| (decode(&x.request).unwrap().id, decode(&x.reply).unwrap().id))
            .collect();
        assert!(ids.iter().all(|(a, b)| a == b));
        assert!(ids.windows(2).all(|w| w[1].0 == w[0].0 + 1));
        drop(c);
        server.shutdown();
    }
}
