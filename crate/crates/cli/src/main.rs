//! `laserguide` command-line workflow: validate inputs, calibrate, localize,
//! plan, export programs, serve the emulator, run plans and render reports.

mod console;
mod files;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use laserguide::arm::ArmModel;
use laserguide::demo;
use laserguide::geom::{RigidTransform, Rotation, Vec3};
use laserguide::locate::{add_noise, localize, synthesize_measurements, LocalizationRecord, LocateError, Measurements};
use laserguide::operate::{
    read_report, run, status_document, write_report, ChannelSource, Command, CommandSource, EventLog, FixedLocalizer,
    NextOnArrival, OperateError, Poll, ReportFormat, RunConfig, RunContext, RunReport, SequencerState, SimLocalizer,
    Snapshot,
};
use laserguide::optics::calibrate_offset;
use laserguide::plan::{plan, PlanConfig, DEFAULT_BASE_MOVE_S, DEFAULT_DWELL_S, DEFAULT_SEED};
use laserguide::twin::{export_program, serve_emulator, ClockMode, Emulator, TwinClient};
use laserguide::Execution;
use serde_json::Value;

use files::{
    load_arm, load_observations, load_plan, load_rig, load_workcell, output_path, read_text, write_atomic, CliError,
    CliResult,
};

#[derive(Parser)]
#[command(
    name = "laserguide",
    version,
    about = "Laser-projection assembly assistant: design, twin validation and run"
)]
struct Cli {
    /// Directory for relative output paths.
    #[arg(long, global = true, env = "LASERGUIDE_OUT", default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load and check input files (workcell + mesh, arm, rig, plan).
    Validate(ValidateArgs),
    /// Fit boresight offsets from observation files and write a calibrated rig.
    Calibrate(CalibrateArgs),
    /// Fit the robot base pose from a fixture measurement file.
    Localize(LocalizeArgs),
    /// Choose stations and aim every target; writes a plan with a cycle estimate.
    Plan(PlanArgs),
    /// Convert a plan into a protocol program file (one request per line).
    ExportProgram(ExportArgs),
    /// Serve the robot-controller emulator over TCP until interrupted.
    ServeEmulator(ServeArgs),
    /// Execute a plan against a controller endpoint and write the accuracy report.
    Run(RunArgs),
    /// Render a report file as a table or structured text.
    Report(ReportArgs),
    /// Write the bundled synthetic demo files.
    Demo(DemoArgs),
    /// Synthesize a fixture measurement file for a planned station.
    SynthMeasure(SynthArgs),
}

#[derive(Args)]
struct ValidateArgs {
    /// Workcell file (references its mesh file).
    #[arg(long)]
    workcell: Option<PathBuf>,
    /// Arm model file.
    #[arg(long)]
    arm: Option<PathBuf>,
    /// Laser rig file.
    #[arg(long)]
    rig: Option<PathBuf>,
    /// Plan file; checked against --workcell when given.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Directory holding workcell.toml, arm.toml and rig.toml (e.g. the demo).
    #[arg(long)]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Nominal laser rig file.
    #[arg(long)]
    rig: PathBuf,
    /// Observation file(s), one per device; each names its calibration mesh.
    #[arg(long = "observations", required = true)]
    observations: Vec<PathBuf>,
    /// Calibrated rig output.
    #[arg(short, long, default_value = "rig-calibrated.toml")]
    output: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    workcell: PathBuf,
    /// Measured fixture points in the robot base frame.
    #[arg(long)]
    measurements: PathBuf,
    /// Station id to record (overrides the one in the measurement file).
    #[arg(long)]
    station: Option<usize>,
    /// Reject fits whose rms residual exceeds this, millimeters.
    #[arg(long, default_value_t = 2.0)]
    threshold_mm: f64,
    /// Localization output.
    #[arg(short, long, default_value = "localization.json")]
    output: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    workcell: PathBuf,
    #[arg(long)]
    arm: PathBuf,
    /// Calibrated laser rig.
    #[arg(long)]
    rig: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Operator dwell per mark for the cycle estimate, seconds.
    #[arg(long, default_value_t = DEFAULT_DWELL_S)]
    dwell: f64,
    /// Base relocation time per station change, seconds.
    #[arg(long, default_value_t = DEFAULT_BASE_MOVE_S)]
    base_move: f64,
    /// Single-threaded evaluation (identical output).
    #[arg(long)]
    sequential: bool,
    /// Plan output.
    #[arg(short, long, default_value = "plan.json")]
    output: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    plan: PathBuf,
    /// Program output.
    #[arg(short, long, default_value = "program.jsonl")]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClockArg {
    Sim,
    Wall,
}

#[derive(Args)]
struct ServeArgs {
    /// Arm model the emulator enforces (limits, speeds); default arm if omitted.
    #[arg(long)]
    arm: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:7070")]
    listen: String,
    /// sim: time advances only by STATE dt; wall: real time.
    #[arg(long, value_enum, default_value = "sim")]
    clock: ClockArg,
    /// Number of laser devices.
    #[arg(long, default_value_t = 2)]
    lasers: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Script {
    /// NEXT whenever the sequencer waits (after --dwell seconds of projection).
    NextOnArrival,
    /// One command per line on standard input (NEXT, PREV, RESTART, STOP).
    Stdin,
    /// Console commands only.
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Table => ReportFormat::Table,
            FormatArg::Json => ReportFormat::Structured,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    workcell: PathBuf,
    #[arg(long)]
    arm: PathBuf,
    /// Calibrated laser rig.
    #[arg(long)]
    rig: PathBuf,
    /// Controller endpoint host:port; an in-process sim emulator when omitted.
    #[arg(long)]
    endpoint: Option<String>,
    /// Operator command source.
    #[arg(long, value_enum, default_value = "next-on-arrival")]
    script: Script,
    /// Projection dwell for the next-on-arrival script, seconds.
    #[arg(long, default_value_t = 0.0)]
    dwell: f64,
    /// Localization file(s) from `localize`, each tagged with its station;
    /// stations without one are measured in simulation.
    #[arg(long = "localization")]
    localizations: Vec<PathBuf>,
    /// Simulated fixture probing noise (1 sigma), millimeters.
    #[arg(long, default_value_t = 0.0)]
    probe_noise_mm: f64,
    /// Simulated parking error "dx,dy,dyaw" in millimeters and degrees.
    #[arg(long, value_parser = parse_park, allow_hyphen_values = true)]
    park_error: Option<RigidTransform>,
    /// Physical rig for simulation; marks are then reported as the real
    /// beams land instead of through the calibrated model.
    #[arg(long)]
    truth_rig: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Sim-clock step while waiting, seconds.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Advance the sim clock by the plan's base-move time per station change.
    #[arg(long)]
    simulate_base_moves: bool,
    /// Pace a sim-clock controller at this many sim seconds per wall second
    /// (default 1 with --console, unpaced otherwise; 0 disables pacing).
    #[arg(long)]
    time_scale: Option<f64>,
    /// Abort after this many controller seconds without an operator command.
    #[arg(long)]
    idle_limit: Option<f64>,
    /// Serve the operator console on this address (e.g. 127.0.0.1:8080).
    #[arg(long)]
    console: Option<String>,
    /// Directory of console assets served at /.
    #[arg(long)]
    console_assets: Option<PathBuf>,
    /// Keep the console up this many seconds after the run ends.
    #[arg(long, default_value_t = 0.0)]
    linger: f64,
    /// Transition event log output (JSON lines).
    #[arg(long)]
    events: Option<PathBuf>,
    /// Report output.
    #[arg(short, long, default_value = "report.json")]
    output: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    format: FormatArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Structured report file written by `run`.
    report: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
    /// Write here instead of standard output.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DemoArgs {
    /// Destination directory (relative to the output directory).
    #[arg(long, default_value = "demo")]
    dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    workcell: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Planned station id.
    #[arg(long)]
    station: usize,
    /// Measurement noise (1 sigma), millimeters.
    #[arg(long, default_value_t = 0.0)]
    noise_mm: f64,
    /// Parking error "dx,dy,dyaw" in millimeters and degrees.
    #[arg(long, value_parser = parse_park, allow_hyphen_values = true)]
    park_error: Option<RigidTransform>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Measurement output.
    #[arg(short, long, default_value = "measurements.toml")]
    output: PathBuf,
}

fn parse_park(s: &str) -> Result<RigidTransform, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("'{x}': {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [dx, dy, yaw] if v.iter().all(|x| x.is_finite()) => Ok(RigidTransform::new(
            Rotation::rot_z(yaw.to_radians()),
            Vec3::new(dx * 1e-3, dy * 1e-3, 0.0),
        )),
        _ => Err("expected dx_mm,dy_mm,dyaw_deg".into()),
    }
}

fn diag(level: &str, code: &str, message: impl std::fmt::Display) {
    eprintln!("{level}: {code}: {message}");
}

fn stdout_lines(lines: &[String]) {
    let mut out = std::io::stdout().lock();
    for l in lines {
        let _ = writeln!(out, "{l}");
    }
}

fn validate(a: &ValidateArgs) -> CliResult<()> {
    let pick =
        |explicit: &Option<PathBuf>, name: &str| explicit.clone().or_else(|| a.dir.as_ref().map(|d| d.join(name)));
    let (wc, arm, rig) = (
        pick(&a.workcell, demo::WORKCELL_FILE),
        pick(&a.arm, demo::ARM_FILE),
        pick(&a.rig, demo::RIG_FILE),
    );
    if wc.is_none() && arm.is_none() && rig.is_none() && a.plan.is_none() {
        return Err(CliError::invalid(
            "usage",
            "nothing to validate; pass --dir or file options",
        ));
    }
    let mut lines = Vec::new();
    let cell = match &wc {
        Some(p) => {
            let cell = load_workcell(p)?;
            lines.push(format!(
                "workcell: {} ({} triangles, {} targets, {} fixtures in {} sets, {} candidate stations, digest {})",
                cell.name,
                cell.mesh.triangle_count(),
                cell.targets.len(),
                cell.fixtures.len(),
                cell.fixture_sets().len(),
                cell.candidate_stations.len(),
                &cell.digest()[..12]
            ));
            Some(cell)
        }
        None => None,
    };
    if let Some(p) = &arm {
        let arm = load_arm(p)?;
        lines.push(format!(
            "arm: {} joints, reach {:.3} m",
            arm.joints.len(),
            arm.max_reach
        ));
    }
    if let Some(p) = &rig {
        let rig = load_rig(p)?;
        lines.push(format!(
            "rig: {} devices, max range {:.1} m",
            rig.devices().len(),
            rig.max_range()
        ));
    }
    if let Some(p) = &a.plan {
        let plan = load_plan(p)?;
        if let Some(cell) = &cell {
            plan.check(cell).map_err(|e| CliError::invalid("invalid-plan", e))?;
            if plan.workcell_digest != cell.digest() {
                return Err(CliError::invalid(
                    "stale-plan",
                    "plan was made for a different workcell revision",
                ));
            }
        }
        lines.push(format!(
            "plan: {} stations, {} solutions",
            plan.stations.len(),
            plan.solutions.len()
        ));
    }
    lines.push("ok".into());
    stdout_lines(&lines);
    Ok(())
}

fn calibrate(a: &CalibrateArgs, out_dir: &Path) -> CliResult<()> {
    let mut rig = load_rig(&a.rig)?;
    let mut lines = Vec::new();
    for p in &a.observations {
        let (set, mesh) = load_observations(p)?;
        let dev = rig
            .device(set.device)
            .ok_or_else(|| {
                CliError::invalid(
                    "invalid-input",
                    format!("{}: no device {} in rig", p.display(), set.device),
                )
            })?
            .clone();
        let c = calibrate_offset(&set.observations, &dev, &mesh)
            .map_err(|e| CliError::invalid("calibration", format!("device {}: {e}", set.device)))?;
        rig.set_offset(set.device, c.offset)
            .map_err(|e| CliError::invalid("calibration", e))?;
        lines.push(format!(
            "device {}: pitch {:.4} deg, yaw {:.4} deg, rms {:.3} mm, {} iterations",
            set.device,
            c.offset.pitch.to_degrees(),
            c.offset.yaw.to_degrees(),
            c.rms * 1e3,
            c.iterations
        ));
    }
    let out = output_path(out_dir, &a.output);
    write_atomic(&out, &rig.to_toml_string())?;
    lines.push(format!("wrote: {}", out.display()));
    stdout_lines(&lines);
    Ok(())
}

fn localize_cmd(a: &LocalizeArgs, out_dir: &Path) -> CliResult<()> {
    let cell = load_workcell(&a.workcell)?;
    let m = Measurements::from_toml_str(&read_text(&a.measurements)?)
        .map_err(|e| CliError::invalid("invalid-input", format!("{}: {e}", a.measurements.display())))?;
    let r = localize(&cell, &m.points, a.threshold_mm * 1e-3).map_err(|e| match e {
        LocateError::ResidualTooHigh { worst, result, .. } => CliError::invalid(
            "residual-too-high",
            format!(
                "rms {:.3} mm exceeds {:.3} mm; check fixture {worst}",
                result.rms * 1e3,
                a.threshold_mm
            ),
        ),
        e => CliError::invalid("localization", e),
    })?;
    let rec = LocalizationRecord::new(a.station.or(m.station), r);
    let out = output_path(out_dir, &a.output);
    write_atomic(&out, &rec.to_json())?;
    let b = &rec.base_in_workcell;
    stdout_lines(&[
        format!("rms_mm: {:.4}", rec.result.rms * 1e3),
        format!(
            "base: x {:.4} y {:.4} z {:.4} yaw {:.3} deg",
            b.translation.x,
            b.translation.y,
            b.translation.z,
            b.rotation.to_rpy().2.to_degrees()
        ),
        format!("wrote: {}", out.display()),
    ]);
    Ok(())
}

fn plan_cmd(a: &PlanArgs, out_dir: &Path) -> CliResult<()> {
    let cell = load_workcell(&a.workcell)?;
    let arm = load_arm(&a.arm)?;
    let rig = load_rig(&a.rig)?;
    let cfg = PlanConfig {
        seed: a.seed,
        dwell_s: a.dwell,
        base_move_s: a.base_move,
        execution: if a.sequential {
            Execution::Sequential
        } else {
            Execution::default()
        },
    };
    let p = plan(&cell, &arm, &rig, &cfg).map_err(|e| CliError::invalid("planning", e))?;
    let out = output_path(out_dir, &a.output);
    write_atomic(&out, &p.to_json())?;
    if !p.uncovered.is_empty() {
        diag(
            "warning",
            "uncovered",
            format!("{} targets: {}", p.uncovered.len(), p.uncovered.join(", ")),
        );
    }
    let ids: Vec<String> = p.stations.iter().map(|s| s.id.to_string()).collect();
    stdout_lines(&[
        format!("stations: {} ({})", p.stations.len(), ids.join(", ")),
        format!("solutions: {}", p.solutions.len()),
        format!("uncovered: {}", p.uncovered.len()),
        format!("estimated_cycle_s: {:.1}", p.estimated_cycle_s),
        format!("wrote: {}", out.display()),
    ]);
    Ok(())
}

fn export_cmd(a: &ExportArgs, out_dir: &Path) -> CliResult<()> {
    let p = load_plan(&a.plan)?;
    let out = output_path(out_dir, &a.output);
    write_atomic(&out, &export_program(&p))?;
    stdout_lines(&[
        format!("requests: {}", 1 + 3 * p.solutions.len()),
        format!("wrote: {}", out.display()),
    ]);
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> CliResult<()> {
    let arm = match &a.arm {
        Some(p) => load_arm(p)?,
        None => ArmModel::default_6r(),
    };
    let mode = match a.clock {
        ClockArg::Sim => ClockMode::Sim,
        ClockArg::Wall => ClockMode::Wall,
    };
    let listener = TcpListener::bind(&a.listen).map_err(|e| CliError::runtime("bind", format!("{}: {e}", a.listen)))?;
    let h = serve_emulator(Emulator::new(arm, a.lasers, mode), listener).map_err(|e| CliError::runtime("bind", e))?;
    diag("info", "emulator", format!("listening on {}", h.addr));
    loop {
        std::thread::park();
    }
}

/// Console commands first, then the script; closed when the script is.
struct MergedSource {
    console: Option<ChannelSource>,
    script: Option<Box<dyn CommandSource>>,
}

impl CommandSource for MergedSource {
    fn poll(&mut self, state: &SequencerState, clock: f64) -> Poll {
        if let Some(c) = &mut self.console {
            match c.poll(state, clock) {
                Poll::Command(cmd) => return Poll::Command(cmd),
                Poll::Closed => self.console = None,
                Poll::Idle => {}
            }
        }
        match &mut self.script {
            Some(s) => s.poll(state, clock),
            None if self.console.is_some() => Poll::Idle,
            None => Poll::Closed,
        }
    }
}

fn stdin_source() -> ChannelSource {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        for line in std::io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match line.parse::<Command>() {
                Ok(c) => {
                    if tx.send(c).is_err() {
                        break;
                    }
                }
                Err(e) => diag("warning", "bad-command", e),
            }
        }
    });
    ChannelSource(rx)
}

struct ConsoleService {
    runtime: tokio::runtime::Runtime,
    state: tokio::sync::watch::Sender<Value>,
    commands: Arc<Mutex<Option<mpsc::Sender<Command>>>>,
    received: Arc<AtomicU64>,
}

impl ConsoleService {
    fn start(addr: &str, assets: Option<PathBuf>, initial: Value) -> CliResult<(Self, ChannelSource)> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| CliError::runtime("console", e))?;
        let (state, state_rx) = tokio::sync::watch::channel(initial);
        let (tx, rx) = mpsc::channel();
        let shared = console::ConsoleShared {
            state: state_rx,
            commands: Arc::new(Mutex::new(Some(tx))),
            received: Arc::new(AtomicU64::new(0)),
            assets,
        };
        let (commands, received) = (shared.commands.clone(), shared.received.clone());
        let listener = runtime
            .block_on(tokio::net::TcpListener::bind(addr))
            .map_err(|e| CliError::runtime("bind", format!("{addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::runtime("bind", e))?;
        runtime.spawn(async move {
            if let Err(e) = axum::serve(listener, console::router(shared)).await {
                diag("error", "console", e);
            }
        });
        diag("info", "console", format!("listening on http://{local}"));
        Ok((
            Self {
                runtime,
                state,
                commands,
                received,
            },
            ChannelSource(rx),
        ))
    }

    fn publish(&self, doc: Value) {
        let accepting = self.commands.lock().expect("command lock").is_some();
        self.state
            .send_replace(console::decorate(doc, self.received.load(Ordering::SeqCst), accepting));
    }

    fn close_commands(&self) {
        self.commands.lock().expect("command lock").take();
    }
}

fn report_lines(r: &RunReport, out: &Path) -> Vec<String> {
    let s = &r.summary;
    vec![
        format!("rows: {}", s.rows),
        format!("pass: {}", s.pass_count),
        format!("max_pos_err_mm: {:.3}", s.max_pos_err * 1e3),
        format!("max_ang_err_deg: {:.3}", s.max_ang_err.to_degrees()),
        format!("run_time_s: {:.2}", s.run_time_s),
        format!("wrote: {}", out.display()),
    ]
}

fn run_cmd(a: &RunArgs, out_dir: &Path) -> CliResult<()> {
    let started = Instant::now();
    let cell = load_workcell(&a.workcell)?;
    let arm = load_arm(&a.arm)?;
    let rig = load_rig(&a.rig)?;
    let truth = a.truth_rig.as_deref().map(load_rig).transpose()?;
    let p = load_plan(&a.plan)?;
    p.check(&cell).map_err(|e| CliError::invalid("invalid-plan", e))?;
    if p.workcell_digest != cell.digest() {
        return Err(CliError::invalid(
            "stale-plan",
            "plan was made for a different workcell revision",
        ));
    }

    let mut results = BTreeMap::new();
    for f in &a.localizations {
        let rec = LocalizationRecord::from_json(&read_text(f)?)
            .map_err(|e| CliError::invalid("invalid-input", format!("{}: {e}", f.display())))?;
        let station = rec
            .station
            .ok_or_else(|| CliError::invalid("invalid-input", format!("{}: no station recorded", f.display())))?;
        results.insert(station, rec.result);
    }
    let mut sim = SimLocalizer::new(&cell, a.seed);
    sim.noise_sigma = a.probe_noise_mm * 1e-3;
    if let Some(e) = a.park_error {
        sim.parking_error = e;
    }
    let mut localizer = FixedLocalizer { results, fallback: sim };

    let (addr, local_server) = match &a.endpoint {
        Some(e) => (e.clone(), None),
        None => {
            let l = TcpListener::bind("127.0.0.1:0").map_err(|e| CliError::runtime("bind", e))?;
            let h = serve_emulator(Emulator::new(arm.clone(), rig.devices().len(), ClockMode::Sim), l)
                .map_err(|e| CliError::runtime("bind", e))?;
            (h.addr.to_string(), Some(h))
        }
    };
    let mut client =
        TwinClient::connect(&addr).map_err(|e| CliError::runtime("twin-connect", format!("{addr}: {e}")))?;

    let script: Option<Box<dyn CommandSource>> = match a.script {
        Script::NextOnArrival => Some(Box::new(NextOnArrival::with_dwell(a.dwell))),
        Script::Stdin => Some(Box::new(stdin_source())),
        Script::None => None,
    };
    let idle = Snapshot {
        state: SequencerState::default(),
        clock: 0.0,
        q: arm.home,
        connected: true,
    };
    let (service, console_source) = match &a.console {
        Some(addr) => {
            let (s, src) = ConsoleService::start(addr, a.console_assets.clone(), status_document(&p, &cell, &idle))?;
            (Some(s), Some(src))
        }
        None => (None, None),
    };
    if script.is_none() && console_source.is_none() {
        return Err(CliError::invalid("usage", "--script none needs --console"));
    }
    let mut source = MergedSource {
        console: console_source,
        script,
    };
    let mut log = match &a.events {
        Some(path) => {
            let path = output_path(out_dir, path);
            if let Some(d) = path.parent() {
                std::fs::create_dir_all(d).map_err(|e| CliError::runtime("io", e))?;
            }
            let f = std::fs::File::create(&path)
                .map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
            EventLog::with_sink(Box::new(std::io::LineWriter::new(f)))
        }
        None => EventLog::default(),
    };
    let config = RunConfig {
        step_dt: a.step,
        idle_limit_s: a.idle_limit,
        sim_base_move_s: a.simulate_base_moves.then_some(p.base_move_s),
        time_scale: a.time_scale.or(a.console.as_ref().map(|_| 1.0)),
        ..RunConfig::default()
    };
    let ctx = RunContext {
        plan: &p,
        cell: &cell,
        arm: &arm,
        rig: &rig,
        truth_rig: truth.as_ref(),
        config,
    };
    let mut last = None;
    let mut observer = |snap: &Snapshot| {
        if let Some(s) = &service {
            s.publish(status_document(&p, &cell, snap));
        }
        last = Some(snap.clone());
    };
    let outcome = run(&ctx, &mut client, &mut localizer, &mut source, &mut log, &mut observer);
    drop(client);

    let out = output_path(out_dir, &a.output);
    let result = match outcome {
        Ok(report) => {
            write_atomic(&out, &write_report(&report, a.format.into()))?;
            stdout_lines(&report_lines(&report, &out));
            if report.partial {
                Err(CliError::runtime(
                    "incomplete",
                    "command source closed before the plan finished",
                ))
            } else if !report.all_pass() {
                let failed: Vec<&str> = report.rows.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect();
                Err(CliError::invalid(
                    "out-of-tolerance",
                    format!("{} marks: {}", failed.len(), failed.join(", ")),
                ))
            } else {
                Ok(())
            }
        }
        Err(e) => {
            let partial = match &e {
                OperateError::TwinDisconnected { partial, .. } | OperateError::Stalled { partial, .. } => Some(partial),
                _ => None,
            };
            if let Some(r) = partial {
                write_atomic(&out, &write_report(r, a.format.into()))?;
                diag("info", "partial-report", out.display());
            }
            Err(match e {
                OperateError::TwinDisconnected { reason, .. } => CliError::runtime("twin-disconnected", reason),
                OperateError::TwinRejected(m) => CliError::runtime("twin-rejected", m),
                OperateError::Stalled { idle_s, phase, .. } => {
                    CliError::runtime("stalled", format!("no command for {idle_s:.1} s in {phase}"))
                }
                e @ OperateError::LocalizationStale { .. } => CliError::invalid("localization-stale", e),
                e @ OperateError::Localization { .. } => CliError::invalid("localization", e),
                OperateError::EmptyPlan => CliError::invalid("empty-plan", "plan has no tasks"),
            })
        }
    };
    if let Some(s) = &service {
        s.close_commands();
        if let Some(snap) = &last {
            let mut snap = snap.clone();
            snap.connected = false;
            s.publish(status_document(&p, &cell, &snap));
        }
        if a.linger > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(a.linger));
        }
    }
    if let Some(s) = service {
        s.runtime.shutdown_timeout(Duration::from_millis(200));
    }
    if let Some(h) = local_server {
        h.shutdown();
    }
    log::info!("run finished in {:.2} s wall-clock", started.elapsed().as_secs_f64());
    result
}

fn report_cmd(a: &ReportArgs, out_dir: &Path) -> CliResult<()> {
    let r = read_report(&read_text(&a.report)?)
        .map_err(|e| CliError::invalid("invalid-input", format!("{}: {e}", a.report.display())))?;
    let text = write_report(&r, a.format.into());
    match &a.output {
        Some(p) => {
            let out = output_path(out_dir, p);
            write_atomic(&out, &text)?;
            stdout_lines(&[format!("wrote: {}", out.display())]);
        }
        None => {
            let _ = std::io::stdout().lock().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn demo_cmd(a: &DemoArgs, out_dir: &Path) -> CliResult<()> {
    let dir = output_path(out_dir, &a.dir);
    let written = demo::write_demo(&dir).map_err(|e| CliError::runtime("io", format!("{}: {e}", dir.display())))?;
    stdout_lines(
        &written
            .iter()
            .map(|p| format!("wrote: {}", p.display()))
            .collect::<Vec<_>>(),
    );
    Ok(())
}

fn synth_cmd(a: &SynthArgs, out_dir: &Path) -> CliResult<()> {
    let cell = load_workcell(&a.workcell)?;
    let p = load_plan(&a.plan)?;
    let station = p
        .station(a.station)
        .ok_or_else(|| CliError::invalid("unknown-station", format!("station {} is not in the plan", a.station)))?;
    let truth = station
        .base_pose
        .compose(&a.park_error.unwrap_or_else(RigidTransform::identity));
    let mut points = synthesize_measurements(&cell, &station.localization_set, &truth);
    if !(a.noise_mm >= 0.0 && a.noise_mm.is_finite()) {
        return Err(CliError::invalid(
            "usage",
            "--noise-mm must be a finite non-negative number",
        ));
    }
    add_noise(&mut points, a.noise_mm * 1e-3, a.seed);
    let m = Measurements {
        station: Some(a.station),
        points,
    };
    let out = output_path(out_dir, &a.output);
    write_atomic(&out, &m.to_toml_string())?;
    stdout_lines(&[
        format!("points: {}", m.points.len()),
        format!("wrote: {}", out.display()),
    ]);
    Ok(())
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format(|buf, record| {
            let code = record.target().rsplit("::").next().unwrap_or("laserguide");
            writeln!(
                buf,
                "{}: {}: {}",
                record.level().as_str().to_lowercase(),
                code,
                record.args()
            )
        })
        .init();
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let out_dir = cli.out_dir.as_path();
    let result = match &cli.command {
        Cmd::Validate(a) => validate(a),
        Cmd::Calibrate(a) => calibrate(a, out_dir),
        Cmd::Localize(a) => localize_cmd(a, out_dir),
        Cmd::Plan(a) => plan_cmd(a, out_dir),
        Cmd::ExportProgram(a) => export_cmd(a, out_dir),
        Cmd::ServeEmulator(a) => serve_cmd(a),
        Cmd::Run(a) => run_cmd(a, out_dir),
        Cmd::Report(a) => report_cmd(a, out_dir),
        Cmd::Demo(a) => demo_cmd(a, out_dir),
        Cmd::SynthMeasure(a) => synth_cmd(a, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            diag("error", e.code, &e.message);
            ExitCode::from(e.exit)
        }
    }
}
