//! Operator-driven task sequencer, the run loop that drives a plan over the
//! twin link, and the accuracy report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::mpsc::{Receiver, TryRecvError};
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::arm::{ArmModel, JointVector, ToolPose};
use crate::geom::{RigidTransform, Vec3};
use crate::locate::{add_noise, localize, synthesize_measurements, LocalizationResult, LocateError};
use crate::optics::{project_mark, verify_mark, LaserRig};
use crate::plan::{solve_aim_at, Plan, Station, MOVE_SPEED};
use crate::twin::{encode, Body, ClockMode, TwinClient, TwinError, TwinMessage};
use crate::workcell::Workcell;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "name", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Idle,
    Localizing,
    /// Station id.
    AtStation(usize),
    /// Task index.
    Projecting(usize),
    Moving,
    Stopped,
    Done,
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Idle => "IDLE",
            Phase::Localizing => "LOCALIZING",
            Phase::AtStation(_) => "AT_STATION",
            Phase::Projecting(_) => "PROJECTING",
            Phase::Moving => "MOVING",
            Phase::Stopped => "STOPPED",
            Phase::Done => "DONE",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::AtStation(s) => write!(f, "AT_STATION({s})"),
            Phase::Projecting(i) => write!(f, "PROJECTING({i})"),
            p => f.write_str(p.name()),
        }
    }
}

/// The four operator channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Command {
    Next,
    Prev,
    Restart,
    Stop,
}

impl Command {
    pub const ALL: [Command; 4] = [Command::Next, Command::Prev, Command::Restart, Command::Stop];

    pub fn name(&self) -> &'static str {
        match self {
            Command::Next => "NEXT",
            Command::Prev => "PREV",
            Command::Restart => "RESTART",
            Command::Stop => "STOP",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Command::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown command '{s}' (expected NEXT, PREV, RESTART or STOP)"))
    }
}

/// Sequencer inputs: operator commands plus the two completion events the
/// run loop feeds back.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Input {
    Command(Command),
    Localized,
    Arrived,
}

impl Input {
    pub fn name(&self) -> &'static str {
        match self {
            Input::Command(c) => c.name(),
            Input::Localized => "LOCALIZED",
            Input::Arrived => "ARRIVED",
        }
    }
}

impl FromStr for Input {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "LOCALIZED" => Ok(Input::Localized),
            "ARRIVED" => Ok(Input::Arrived),
            c => c.parse().map(Input::Command),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequencerState {
    pub phase: Phase,
    /// Current (or next) task index, in [0, task count].
    pub task: usize,
    /// Device whose laser is on; only ever set while PROJECTING.
    pub laser: Option<u32>,
    pub last_event: String,
    /// Station id the base is currently localized at.
    pub localized: Option<usize>,
}

impl Default for SequencerState {
    fn default() -> Self {
        Self {
            phase: Phase::Idle,
            task: 0,
            laser: None,
            last_event: "start".into(),
            localized: None,
        }
    }
}

impl SequencerState {
    pub fn laser_on(&self) -> bool {
        self.laser.is_some()
    }
}

fn devices_in(plan: &Plan) -> BTreeSet<u32> {
    let mut d: BTreeSet<u32> = plan.solutions.iter().map(|s| s.device as u32).collect();
    if d.is_empty() {
        d.insert(0);
    }
    d
}

fn station_of(plan: &Plan, task: usize) -> Option<usize> {
    plan.solutions.get(task).map(|s| s.station)
}

/// Operator command transition; see [`apply`].
pub fn apply_command(state: &SequencerState, cmd: Command, plan: &Plan) -> (SequencerState, Vec<Body>) {
    apply(state, Input::Command(cmd), plan)
}

/// Pure transition function: next state plus the twin requests to emit.
/// Every input is legal in every phase; ignored ones are recorded as
/// `noop-*` / `ignored-*` in `last_event`.
pub fn apply(state: &SequencerState, input: Input, plan: &Plan) -> (SequencerState, Vec<Body>) {
    let n = plan.solutions.len();
    let mut s = state.clone();
    let mut out = Vec::new();
    let laser_off = |s: &mut SequencerState, out: &mut Vec<Body>| {
        if let Some(device) = s.laser.take() {
            out.push(Body::Laser { device, on: false });
        }
    };
    let move_to = |s: &mut SequencerState, out: &mut Vec<Body>, i: usize| {
        s.task = i;
        s.phase = Phase::Moving;
        out.push(Body::MoveJ {
            q: plan.solutions[i].q,
            speed: MOVE_SPEED,
        });
    };
    let note = match (state.phase, input) {
        (_, Input::Command(Command::Stop)) => {
            s.laser = None;
            for device in devices_in(plan) {
                out.push(Body::Laser { device, on: false });
            }
            out.push(Body::State { dt: None, halt: true });
            s.phase = Phase::Stopped;
            "stop"
        }
        (Phase::Idle, Input::Command(Command::Next)) => {
            if n == 0 {
                s.phase = Phase::Done;
                "empty-plan"
            } else {
                s.task = 0;
                s.phase = Phase::Localizing;
                "localize"
            }
        }
        (Phase::Idle, Input::Command(_)) => "noop-idle",
        (Phase::Localizing, Input::Localized) => {
            let st = station_of(plan, s.task).expect("localizing a valid task");
            s.localized = Some(st);
            s.phase = Phase::AtStation(st);
            "localized"
        }
        (Phase::Localizing, Input::Command(_)) => "noop-busy-localizing",
        (Phase::AtStation(_), Input::Command(Command::Next | Command::Restart)) => {
            let i = s.task;
            move_to(&mut s, &mut out, i);
            "move"
        }
        (Phase::AtStation(_), Input::Command(Command::Prev)) => {
            if s.task == 0 {
                "noop-prev-at-first"
            } else {
                "noop-prev-at-station-start"
            }
        }
        (Phase::Projecting(i), Input::Command(Command::Next)) => {
            laser_off(&mut s, &mut out);
            if i + 1 >= n {
                s.task = n;
                s.phase = Phase::Done;
                "done"
            } else if station_of(plan, i + 1) != station_of(plan, i) {
                s.task = i + 1;
                s.localized = None;
                s.phase = Phase::Localizing;
                "station-change"
            } else {
                move_to(&mut s, &mut out, i + 1);
                "next"
            }
        }
        (Phase::Projecting(i), Input::Command(Command::Prev)) => {
            if i == 0 {
                "noop-prev-at-first"
            } else if station_of(plan, i - 1) != station_of(plan, i) {
                "noop-prev-at-station-start"
            } else {
                laser_off(&mut s, &mut out);
                move_to(&mut s, &mut out, i - 1);
                "prev"
            }
        }
        (Phase::Projecting(i), Input::Command(Command::Restart)) => {
            laser_off(&mut s, &mut out);
            move_to(&mut s, &mut out, plan.station_start(i));
            "restart"
        }
        (Phase::Moving, Input::Arrived) => {
            let device = plan.solutions[s.task].device as u32;
            s.phase = Phase::Projecting(s.task);
            s.laser = Some(device);
            out.push(Body::Laser { device, on: true });
            "arrived"
        }
        (Phase::Moving, Input::Command(_)) => "noop-busy-moving",
        (Phase::Stopped, Input::Command(Command::Next)) => {
            if s.task >= n {
                s.phase = Phase::Done;
                "done"
            } else if s.localized != station_of(plan, s.task) {
                s.phase = Phase::Localizing;
                "resume-localize"
            } else {
                let i = s.task;
                move_to(&mut s, &mut out, i);
                "resume"
            }
        }
        (Phase::Stopped, Input::Command(_)) => "noop-stopped",
        (Phase::Done, Input::Command(_)) => "noop-done",
        (_, Input::Localized) => "ignored-localized",
        (_, Input::Arrived) => "ignored-arrived",
    };
    s.last_event = note.into();
    (s, out)
}

/// One sequencer transition as recorded in the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub clock: f64,
    pub input: String,
    pub from: Phase,
    pub to: Phase,
    pub task: usize,
    pub laser: Option<u32>,
    pub note: String,
    /// Emitted requests, encoded with id 0.
    pub emitted: Vec<String>,
}

/// Append-only transition log, optionally mirrored to a line sink.
#[derive(Default)]
pub struct EventLog {
    pub records: Vec<EventRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

impl EventLog {
    pub fn with_sink(sink: Box<dyn Write + Send>) -> Self {
        Self {
            records: Vec::new(),
            sink: Some(sink),
        }
    }

    pub fn push(&mut self, r: EventRecord) {
        if let Some(w) = &mut self.sink {
            let line = serde_json::to_string(&r).expect("record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                log::warn!("event log write failed: {e}");
            }
        }
        self.records.push(r);
    }

    pub fn parse(text: &str) -> Result<Vec<EventRecord>, String> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect()
    }
}

/// Emitted requests agree up to MOVEJ joint values, which a run re-aims
/// after localization.
fn same_requests(a: &[Body], b: &[Body]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (Body::MoveJ { speed: s, .. }, Body::MoveJ { speed: t, .. }) => s == t,
            _ => x == y,
        })
}

/// Re-applies a recorded log to a fresh sequencer and checks every
/// transition and emitted message; returns the final state.
pub fn replay(plan: &Plan, records: &[EventRecord]) -> Result<SequencerState, String> {
    let mut s = SequencerState::default();
    for r in records {
        if s.phase != r.from {
            return Err(format!(
                "event {}: log says from {}, replay is in {}",
                r.seq, r.from, s.phase
            ));
        }
        let input: Input = r.input.parse()?;
        let (next, out) = apply(&s, input, plan);
        let recorded: Vec<Body> = r
            .emitted
            .iter()
            .map(|l| {
                crate::twin::decode(l)
                    .map(|m| m.body)
                    .map_err(|e| format!("event {}: {e}", r.seq))
            })
            .collect::<Result<_, _>>()?;
        if next.phase != r.to || next.task != r.task || next.laser != r.laser || !same_requests(&out, &recorded) {
            return Err(format!("event {}: replay diverges", r.seq));
        }
        s = next;
    }
    Ok(s)
}

/// What a command source returns when polled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Poll {
    Command(Command),
    /// Nothing yet; the run loop lets time pass.
    Idle,
    /// No more commands will come.
    Closed,
}

/// Operator input, polled by the run loop with the controller clock.
pub trait CommandSource {
    fn poll(&mut self, state: &SequencerState, clock: f64) -> Poll;
}

/// Scripted operator: issues NEXT whenever the sequencer waits, after
/// letting each projected mark dwell for `dwell_s` seconds.
#[derive(Clone, Copy, Debug, Default)]
pub struct NextOnArrival {
    pub dwell_s: f64,
    lit_since: Option<(usize, f64)>,
}

impl NextOnArrival {
    pub fn with_dwell(dwell_s: f64) -> Self {
        Self {
            dwell_s,
            lit_since: None,
        }
    }
}

impl CommandSource for NextOnArrival {
    fn poll(&mut self, state: &SequencerState, clock: f64) -> Poll {
        match state.phase {
            Phase::Done => Poll::Closed,
            Phase::Moving | Phase::Localizing => Poll::Idle,
            Phase::Projecting(i) => {
                let since = match self.lit_since {
                    Some((j, t)) if j == i => t,
                    _ => {
                        self.lit_since = Some((i, clock));
                        clock
                    }
                };
                if clock - since + 1e-9 >= self.dwell_s {
                    self.lit_since = None;
                    Poll::Command(Command::Next)
                } else {
                    Poll::Idle
                }
            }
            _ => Poll::Command(Command::Next),
        }
    }
}

/// Closure-backed source for scripted scenarios.
pub struct FnSource<F>(pub F);

impl<F: FnMut(&SequencerState, f64) -> Poll> CommandSource for FnSource<F> {
    fn poll(&mut self, state: &SequencerState, clock: f64) -> Poll {
        (self.0)(state, clock)
    }
}

/// Commands queued by any producer (console, keyboard) over a channel.
pub struct ChannelSource(pub Receiver<Command>);

impl CommandSource for ChannelSource {
    fn poll(&mut self, _: &SequencerState, _: f64) -> Poll {
        match self.0.try_recv() {
            Ok(c) => Poll::Command(c),
            Err(TryRecvError::Empty) => Poll::Idle,
            Err(TryRecvError::Disconnected) => Poll::Closed,
        }
    }
}

pub trait Localizer {
    fn localize(&mut self, station: &Station) -> Result<LocalizationResult, LocateError>;

    /// Actual base pose when known (simulation only); used to report the
    /// physically achieved marks instead of the predicted ones.
    fn truth(&self, _station: &Station) -> Option<RigidTransform> {
        None
    }
}

/// Simulated fixture measurement: the base is parked at the planned pose
/// composed with `parking_error`, and each measured point gets isotropic
/// Gaussian noise of `noise_sigma` meters.
pub struct SimLocalizer<'a> {
    pub cell: &'a Workcell,
    pub parking_error: RigidTransform,
    pub noise_sigma: f64,
    pub threshold: f64,
    rng: ChaCha8Rng,
}

impl<'a> SimLocalizer<'a> {
    pub fn new(cell: &'a Workcell, seed: u64) -> Self {
        Self {
            cell,
            parking_error: RigidTransform::identity(),
            noise_sigma: 0.0,
            threshold: crate::locate::DEFAULT_RMS_THRESHOLD,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Localizer for SimLocalizer<'_> {
    fn localize(&mut self, station: &Station) -> Result<LocalizationResult, LocateError> {
        let truth = station.base_pose.compose(&self.parking_error);
        let mut m = synthesize_measurements(self.cell, &station.localization_set, &truth);
        add_noise(&mut m, self.noise_sigma, self.rng.next_u64());
        localize(self.cell, &m, self.threshold)
    }

    fn truth(&self, station: &Station) -> Option<RigidTransform> {
        Some(station.base_pose.compose(&self.parking_error))
    }
}

/// Pre-computed results per station id, e.g. loaded from files; stations
/// without one fall back to `fallback`.
pub struct FixedLocalizer<L> {
    pub results: BTreeMap<usize, LocalizationResult>,
    pub fallback: L,
}

impl<L: Localizer> Localizer for FixedLocalizer<L> {
    fn localize(&mut self, station: &Station) -> Result<LocalizationResult, LocateError> {
        match self.results.get(&station.id) {
            Some(r) => Ok(r.clone()),
            None => self.fallback.localize(station),
        }
    }

    fn truth(&self, station: &Station) -> Option<RigidTransform> {
        self.fallback.truth(station)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub id: String,
    pub station: usize,
    pub device: usize,
    pub nominal_point: Vec3,
    pub nominal_direction: Vec3,
    /// None when the beam missed the surface.
    pub achieved_point: Option<Vec3>,
    pub achieved_direction: Option<Vec3>,
    pub pos_err: Option<f64>,
    pub ang_err: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rows: usize,
    pub pass_count: usize,
    pub mean_pos_err: f64,
    pub max_pos_err: f64,
    pub mean_ang_err: f64,
    pub max_ang_err: f64,
    /// Controller clock at the end of the run, seconds.
    pub run_time_s: f64,
}

impl ReportSummary {
    pub fn from_rows(rows: &[ReportRow], run_time_s: f64) -> Self {
        let pos: Vec<f64> = rows.iter().filter_map(|r| r.pos_err).collect();
        let ang: Vec<f64> = rows.iter().filter_map(|r| r.ang_err).collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Self {
            rows: rows.len(),
            pass_count: rows.iter().filter(|r| r.pass).count(),
            mean_pos_err: mean(&pos),
            max_pos_err: max(&pos),
            mean_ang_err: mean(&ang),
            max_ang_err: max(&ang),
            run_time_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: u32,
    pub workcell: String,
    /// True when the run ended before DONE.
    pub partial: bool,
    pub rows: Vec<ReportRow>,
    pub summary: ReportSummary,
}

impl RunReport {
    pub fn new(workcell: &str, rows: Vec<ReportRow>, run_time_s: f64, partial: bool) -> Self {
        let summary = ReportSummary::from_rows(&rows, run_time_s);
        Self {
            version: 1,
            workcell: workcell.into(),
            partial,
            rows,
            summary,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Structured,
}

fn fmt_opt(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map(|x| format!("{:.*}", digits, x * scale))
        .unwrap_or_else(|| "-".into())
}

pub fn write_report(r: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Structured => {
            let mut s = serde_json::to_string_pretty(r).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let header = [
                "id",
                "station",
                "device",
                "pos_err_mm",
                "ang_err_deg",
                "pass",
                "x",
                "y",
                "z",
            ];
            let mut rows: Vec<Vec<String>> = vec![header.iter().map(|h| h.to_string()).collect()];
            for row in &r.rows {
                let p = row.achieved_point;
                rows.push(vec![
                    row.id.clone(),
                    row.station.to_string(),
                    row.device.to_string(),
                    fmt_opt(row.pos_err, 1e3, 3),
                    fmt_opt(row.ang_err, 180.0 / std::f64::consts::PI, 3),
                    if row.pass { "yes" } else { "no" }.into(),
                    fmt_opt(p.map(|p| p.x), 1.0, 4),
                    fmt_opt(p.map(|p| p.y), 1.0, 4),
                    fmt_opt(p.map(|p| p.z), 1.0, 4),
                ]);
            }
            let widths: Vec<usize> = (0..header.len())
                .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            for row in &rows {
                let cells: Vec<String> = row
                    .iter()
                    .enumerate()
                    .map(|(c, v)| {
                        if c == 0 {
                            format!("{v:<w$}", w = widths[c])
                        } else {
                            format!("{v:>w$}", w = widths[c])
                        }
                    })
                    .collect();
                out.push_str(cells.join("  ").trim_end());
                out.push('\n');
            }
            let s = &r.summary;
            let deg = 180.0 / std::f64::consts::PI;
            out.push_str(&format!(
                "\nworkcell: {}\npartial: {}\nrows: {}\npass: {}\nmean_pos_err_mm: {:.6}\nmax_pos_err_mm: {:.6}\nmean_ang_err_deg: {:.6}\nmax_ang_err_deg: {:.6}\nrun_time_s: {:.3}\n",
                r.workcell,
                r.partial,
                s.rows,
                s.pass_count,
                s.mean_pos_err * 1e3,
                s.max_pos_err * 1e3,
                s.mean_ang_err * deg,
                s.max_ang_err * deg,
                s.run_time_s
            ));
            out
        }
    }
}

pub fn read_report(text: &str) -> Result<RunReport, String> {
    let r: RunReport = serde_json::from_str(text).map_err(|e| e.to_string())?;
    crate::format::check_version(r.version, "report")?;
    Ok(r)
}

#[derive(Debug, Error)]
pub enum OperateError {
    #[error("twin connection lost: {reason}")]
    TwinDisconnected { reason: String, partial: Box<RunReport> },
    #[error("controller rejected a request: {0}")]
    TwinRejected(String),
    #[error("workcell changed since {what} (digest mismatch)")]
    LocalizationStale { what: String },
    #[error("localization failed at station {station}: {source}")]
    Localization { station: usize, source: LocateError },
    #[error("no command for {idle_s:.1} s in {phase}")]
    Stalled {
        idle_s: f64,
        phase: Phase,
        partial: Box<RunReport>,
    },
    #[error("plan has no tasks")]
    EmptyPlan,
}

/// Published after every transition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Snapshot {
    pub state: SequencerState,
    pub clock: f64,
    pub q: JointVector,
    pub connected: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct RunConfig {
    /// Sim-clock step while waiting, seconds.
    pub step_dt: f64,
    /// Sleep between polls against a wall-clock controller.
    pub wall_poll: Duration,
    /// Abort with `Stalled` after this much controller time without a
    /// command in a waiting phase.
    pub idle_limit_s: Option<f64>,
    /// Poses closer than this to the planned station reuse the planned joints.
    pub reaim_tolerance: f64,
    /// Against a sim-clock controller, advance the clock by this much for
    /// each drive between stations.
    pub sim_base_move_s: Option<f64>,
    /// Pace a sim-clock controller at this many sim seconds per wall
    /// second (e.g. when a human drives the run); unpaced when None.
    pub time_scale: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            step_dt: 0.05,
            wall_poll: Duration::from_millis(20),
            idle_limit_s: None,
            reaim_tolerance: 1e-6,
            sim_base_move_s: None,
            time_scale: None,
        }
    }
}

pub struct RunContext<'a> {
    pub plan: &'a Plan,
    pub cell: &'a Workcell,
    pub arm: &'a ArmModel,
    /// Calibrated rig.
    pub rig: &'a LaserRig,
    /// Physical rig, when simulating; marks are then reported as the real
    /// beams would land (true rig, true base pose) rather than through the
    /// calibrated model and the localized frames.
    pub truth_rig: Option<&'a LaserRig>,
    pub config: RunConfig,
}

struct Progress {
    /// Localized base pose (workcell frame) per station id.
    bases: BTreeMap<usize, RigidTransform>,
    /// Actual base pose per station id, when the localizer knows it.
    truth: BTreeMap<usize, RigidTransform>,
    /// Reported joints at the latest arrival per task.
    reached: BTreeMap<usize, JointVector>,
    /// Station the base was last localized at.
    parked: Option<usize>,
    clock: f64,
    q: JointVector,
}

/// Achieved marks for every reached task, re-projected from the reported
/// joints through the localized base frames and the calibrated rig.
fn build_report(ctx: &RunContext, p: &Progress, partial: bool) -> RunReport {
    let rows =
        p.reached
            .iter()
            .filter_map(|(&i, q)| {
                let sol = &ctx.plan.solutions[i];
                let target = ctx.cell.target(&sol.target)?;
                let (base, rig) = match ctx.truth_rig {
                    Some(rig) => (p.truth.get(&sol.station).or_else(|| p.bases.get(&sol.station))?, rig),
                    None => (p.bases.get(&sol.station)?, ctx.rig),
                };
                let mark =
                    ctx.arm.fk(q).ok().zip(rig.device(sol.device)).and_then(|(tool, dev)| {
                        project_mark(&ToolPose(base.compose(&tool.0)), dev, &ctx.cell.mesh).ok()
                    });
                let check = mark.as_ref().map(|m| verify_mark(m, target));
                Some(ReportRow {
                    id: sol.target.clone(),
                    station: sol.station,
                    device: sol.device,
                    nominal_point: target.point,
                    nominal_direction: target.direction,
                    achieved_point: mark.map(|m| m.point),
                    achieved_direction: mark.map(|m| m.direction),
                    pos_err: check.map(|c| c.pos_err),
                    ang_err: check.map(|c| c.ang_err),
                    pass: check.is_some_and(|c| c.pass),
                })
            })
            .collect();
    RunReport::new(&ctx.cell.name, rows, p.clock, partial)
}

/// Drives `ctx.plan` over the twin link until DONE (or the command source
/// closes), then reports the achieved marks.
pub fn run(
    ctx: &RunContext,
    client: &mut TwinClient,
    localizer: &mut dyn Localizer,
    source: &mut dyn CommandSource,
    log: &mut EventLog,
    observer: &mut dyn FnMut(&Snapshot),
) -> Result<RunReport, OperateError> {
    if ctx.plan.solutions.is_empty() {
        return Err(OperateError::EmptyPlan);
    }
    let digest = ctx.cell.digest();
    if ctx.plan.workcell_digest != digest {
        return Err(OperateError::LocalizationStale {
            what: "planning".into(),
        });
    }
    let mut plan = ctx.plan.clone();
    let mut state = SequencerState::default();
    let start = client.getpos();
    let mut p = Progress {
        bases: BTreeMap::new(),
        truth: BTreeMap::new(),
        parked: None,
        reached: BTreeMap::new(),
        clock: start.as_ref().map(|x| x.clock).unwrap_or(0.0),
        q: start.as_ref().map(|x| x.q).unwrap_or_else(|_| ctx.arm.home),
    };
    let disconnected = |e: TwinError, p: &Progress| match e {
        TwinError::Remote { code, text } => OperateError::TwinRejected(format!("{code}: {text}")),
        e => OperateError::TwinDisconnected {
            reason: e.to_string(),
            partial: Box::new(build_report(ctx, p, true)),
        },
    };
    if let Err(e) = start {
        return Err(disconnected(e, &p));
    }
    let mut seq = 0u64;
    let mut idle = 0.0;
    observer(&Snapshot {
        state: state.clone(),
        clock: p.clock,
        q: p.q,
        connected: true,
    });

    macro_rules! transition {
        ($input:expr) => {{
            let input = $input;
            let (next, out) = apply(&state, input, &plan);
            let mut emitted = Vec::with_capacity(out.len());
            for body in out {
                emitted.push(encode(&TwinMessage::new(0, body.clone())));
                let r = match body {
                    Body::State { halt: true, .. } => client.halt().map(|pos| {
                        p.q = pos.q;
                        p.clock = pos.clock;
                    }),
                    b => client.request(b).map(drop),
                };
                r.map_err(|e| disconnected(e, &p))?;
            }
            seq += 1;
            log.push(EventRecord {
                seq,
                clock: p.clock,
                input: input.name().into(),
                from: state.phase,
                to: next.phase,
                task: next.task,
                laser: next.laser,
                note: next.last_event.clone(),
                emitted,
            });
            log::debug!(
                "{} --{}--> {} ({})",
                state.phase,
                input.name(),
                next.phase,
                next.last_event
            );
            state = next;
            observer(&Snapshot {
                state: state.clone(),
                clock: p.clock,
                q: p.q,
                connected: true,
            });
        }};
    }

    let wait = |client: &mut TwinClient, p: &mut Progress| -> Result<bool, TwinError> {
        let pos = match client.mode {
            ClockMode::Sim => {
                if let Some(scale) = ctx.config.time_scale.filter(|s| *s > 0.0) {
                    std::thread::sleep(Duration::from_secs_f64(ctx.config.step_dt / scale));
                }
                client.step(ctx.config.step_dt)?
            }
            ClockMode::Wall => {
                std::thread::sleep(ctx.config.wall_poll);
                client.getpos()?
            }
        };
        p.clock = pos.clock;
        p.q = pos.q;
        Ok(pos.moving)
    };

    loop {
        match state.phase {
            Phase::Done => break,
            Phase::Localizing => {
                let sol = &plan.solutions[state.task];
                let station = plan.station(sol.station).expect("plan lists the station").clone();
                if let (ClockMode::Sim, Some(d), false) = (
                    client.mode,
                    ctx.config.sim_base_move_s,
                    p.parked.is_none_or(|s| s == station.id),
                ) {
                    let pos = client.step(d).map_err(|e| disconnected(e, &p))?;
                    p.clock = pos.clock;
                }
                let result = localizer
                    .localize(&station)
                    .map_err(|source| OperateError::Localization {
                        station: station.id,
                        source,
                    })?;
                if result.workcell_digest.as_deref() != Some(digest.as_str()) {
                    return Err(OperateError::LocalizationStale {
                        what: format!("localization at station {}", station.id),
                    });
                }
                let base = result.base_in_workcell();
                let (dt, dr) = base.distance_to(&station.base_pose);
                if dt > ctx.config.reaim_tolerance || dr > ctx.config.reaim_tolerance {
                    // The base is not where planned: re-aim this station's tasks.
                    for (i, s) in ctx.plan.solutions.iter().enumerate() {
                        if s.station != station.id {
                            continue;
                        }
                        let target = ctx.cell.target(&s.target).expect("plan checked");
                        match solve_aim_at(
                            ctx.cell,
                            s.station,
                            &base,
                            target,
                            ctx.arm,
                            ctx.rig,
                            s.device,
                            ctx.plan.seed,
                        ) {
                            Ok(a) => plan.solutions[i].q = a.q,
                            Err(e) => log::warn!("re-aim failed, keeping planned joints: {e}"),
                        }
                    }
                }
                p.bases.insert(station.id, base);
                p.parked = Some(station.id);
                if let Some(t) = localizer.truth(&station) {
                    p.truth.insert(station.id, t);
                }
                transition!(Input::Localized);
            }
            Phase::Moving => {
                if let Poll::Command(c) = source.poll(&state, p.clock) {
                    transition!(Input::Command(c));
                    continue;
                }
                let moving = wait(client, &mut p).map_err(|e| disconnected(e, &p))?;
                if !moving {
                    let pos = client.getpos().map_err(|e| disconnected(e, &p))?;
                    p.q = pos.q;
                    p.clock = pos.clock;
                    p.reached.insert(state.task, pos.q);
                    transition!(Input::Arrived);
                }
            }
            _ => match source.poll(&state, p.clock) {
                Poll::Command(c) => {
                    idle = 0.0;
                    transition!(Input::Command(c));
                }
                Poll::Idle => {
                    let before = p.clock;
                    wait(client, &mut p).map_err(|e| disconnected(e, &p))?;
                    idle += p.clock - before;
                    if let Some(limit) = ctx.config.idle_limit_s {
                        if idle >= limit {
                            return Err(OperateError::Stalled {
                                idle_s: idle,
                                phase: state.phase,
                                partial: Box::new(build_report(ctx, &p, true)),
                            });
                        }
                    }
                }
                Poll::Closed => {
                    return Ok(build_report(ctx, &p, true));
                }
            },
        }
    }
    Ok(build_report(ctx, &p, false))
}

/// State document served to the operator console.
pub fn status_document(plan: &Plan, cell: &Workcell, snap: &Snapshot) -> serde_json::Value {
    let st = &snap.state;
    let n = plan.solutions.len();
    let active = match st.phase {
        Phase::Moving | Phase::Projecting(_) | Phase::AtStation(_) | Phase::Localizing if st.task < n => Some(st.task),
        _ => None,
    };
    let tasks: Vec<_> = plan
        .solutions
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let status = if st.phase == Phase::Done || i < st.task {
                "done"
            } else if Some(i) == active {
                "active"
            } else {
                "pending"
            };
            let t = cell.target(&s.target);
            json!({
                "index": i,
                "id": s.target,
                "station": s.station,
                "status": status,
                "point": t.map(|t| [t.point.x, t.point.y]),
            })
        })
        .collect();
    let current_station = active.map(|i| plan.solutions[i].station);
    let stations: Vec<_> = plan
        .stations
        .iter()
        .map(|s| {
            let (_, _, yaw) = s.base_pose.rotation.to_rpy();
            json!({
                "id": s.id,
                "x": s.base_pose.translation.x,
                "y": s.base_pose.translation.y,
                "yaw_deg": yaw.to_degrees(),
                "active": Some(s.id) == current_station,
                "targets": s.assigned_targets.len(),
            })
        })
        .collect();
    let mark = match st.phase {
        Phase::Projecting(i) => plan.solutions.get(i).map(|s| {
            json!({
                "x": s.predicted.point.x,
                "y": s.predicted.point.y,
                "dx": s.predicted.direction.x,
                "dy": s.predicted.direction.y,
            })
        }),
        _ => None,
    };
    let (lo, hi) = cell.mesh.bounds();
    json!({
        "version": 1,
        "phase": st.phase.name(),
        "phase_detail": st.phase.to_string(),
        "task_index": st.task,
        "task_count": n,
        "current_task": active.map(|i| plan.solutions[i].target.clone()),
        "station": current_station,
        "laser_on": st.laser_on(),
        "last_event": st.last_event,
        "clock": snap.clock,
        "connected": snap.connected,
        "tasks": tasks,
        "stations": stations,
        "footprint": { "min": [lo.x, lo.y], "max": [hi.x, hi.y] },
        "mark": mark,
        "uncovered": plan.uncovered,
        "estimated_cycle_s": plan.estimated_cycle_s,
    })
}
