use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_laserguide");

const SUBCOMMANDS: [&str; 10] = [
    "validate",
    "calibrate",
    "localize",
    "plan",
    "export-program",
    "serve-emulator",
    "run",
    "report",
    "demo",
    "synth-measure",
];

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("LASERGUIDE_OUT", dir)
        .env_remove("RUST_LOG")
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn field(stdout: &str, key: &str) -> f64 {
    let line = stdout
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no {key} in {stdout}"));
    line[key.len()..]
        .trim_start_matches(':')
        .split_whitespace()
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

/// Demo files, calibrated rig and plan, generated once per test binary.
struct Fixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    plan_stdout: String,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        ok(&cli(&dir, &["demo", "--dir", "demo"]));
        ok(&cli(
            &dir,
            &[
                "calibrate",
                "--rig",
                "demo/rig.toml",
                "--observations",
                "demo/calibration-0.toml",
                "--observations",
                "demo/calibration-1.toml",
            ],
        ));
        let plan_stdout = ok(&cli(&dir, &plan_args("plan.json")));
        Fixture {
            _tmp: tmp,
            dir,
            plan_stdout,
        }
    })
}

fn plan_args(out: &str) -> Vec<&str> {
    vec![
        "plan",
        "--workcell",
        "demo/workcell.toml",
        "--arm",
        "demo/arm.toml",
        "--rig",
        "rig-calibrated.toml",
        "-o",
        out,
    ]
}

fn run_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        "run",
        "--plan",
        "plan.json",
        "--workcell",
        "demo/workcell.toml",
        "--arm",
        "demo/arm.toml",
        "--rig",
        "rig-calibrated.toml",
    ];
    v.extend_from_slice(extra);
    v
}

/// Spawns the binary and waits for its `listening on ADDR` diagnostic.
fn spawn_listening(dir: &Path, args: &[&str]) -> (Child, String) {
    let mut child = Command::new(BIN)
        .args(args)
        .env("LASERGUIDE_OUT", dir)
        .current_dir(dir)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut err = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    let addr = loop {
        line.clear();
        assert!(err.read_line(&mut line).unwrap() > 0, "exited before listening");
        if let Some(i) = line.find("listening on ") {
            break line[i + 13..].trim().trim_start_matches("http://").to_string();
        }
    };
    std::thread::spawn(move || std::io::copy(&mut err, &mut std::io::sink()));
    (child, addr)
}

fn http(addr: &str, req: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(req.as_bytes()).unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    let status = out[9..12].parse().unwrap();
    (
        status,
        out.split_once("\r\n\r\n").map(|x| x.1.to_string()).unwrap_or_default(),
    )
}

fn get(addr: &str, path: &str) -> (u16, String) {
    http(
        addr,
        &format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n"),
    )
}

fn press(addr: &str, cmd: &str) -> u16 {
    let body = format!(r#"{{"command":"{cmd}","client_ts":0}}"#);
    let req = format!(
        "POST /api/command HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    http(addr, &req).0
}

#[test]
fn every_subcommand_has_help() {
    let dir = tempfile::tempdir().unwrap();
    let top = ok(&cli(dir.path(), &["--help"]));
    for sub in SUBCOMMANDS {
        assert!(top.contains(sub), "{sub} missing from top-level help");
        let h = ok(&cli(dir.path(), &[sub, "--help"]));
        assert!(h.contains("Usage: laserguide"), "{sub}");
        assert!(h.contains("--"), "{sub} help names no options");
    }
}

#[test]
fn validate_demo_and_bad_inputs() {
    let f = fixture();
    let out = ok(&cli(&f.dir, &["validate", "--dir", "demo"]));
    assert!(out.contains("53 targets") && out.trim_end().ends_with("ok"));
    ok(&cli(
        &f.dir,
        &["validate", "--workcell", "demo/workcell.toml", "--plan", "plan.json"],
    ));

    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("arm.toml"), "version = 1\n").unwrap();
    let o = cli(tmp.path(), &["validate", "--arm", "arm.toml"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.lines().any(|l| l.starts_with("error: invalid-input: ")), "{err}");

    let o = cli(tmp.path(), &["validate", "--rig", "missing.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: io: "));

    assert_eq!(cli(tmp.path(), &["validate"]).status.code(), Some(1));
    assert_eq!(cli(tmp.path(), &["plan"]).status.code(), Some(2));
}

#[test]
fn plan_demo_is_small_complete_and_reproducible() {
    let f = fixture();
    assert!(field(&f.plan_stdout, "stations") <= 5.0);
    assert_eq!(field(&f.plan_stdout, "solutions"), 53.0);
    assert_eq!(field(&f.plan_stdout, "uncovered"), 0.0);
    let mut args = plan_args("plan-seq.json");
    args.push("--sequential");
    ok(&cli(&f.dir, &args));
    let a = std::fs::read(f.dir.join("plan.json")).unwrap();
    assert_eq!(a, std::fs::read(f.dir.join("plan-seq.json")).unwrap());
    ok(&cli(&f.dir, &plan_args("plan-again.json")));
    assert_eq!(a, std::fs::read(f.dir.join("plan-again.json")).unwrap());
}

#[test]
fn export_program_lists_three_requests_per_task() {
    let f = fixture();
    ok(&cli(
        &f.dir,
        &["export-program", "--plan", "plan.json", "-o", "prog.jsonl"],
    ));
    let text = std::fs::read_to_string(f.dir.join("prog.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 53);
    assert!(text.starts_with(r#"{"id":1,"type":"HELLO""#));
}

#[test]
fn run_against_served_emulator() {
    let f = fixture();
    let (mut emu, addr) = spawn_listening(
        &f.dir,
        &["serve-emulator", "--listen", "127.0.0.1:0", "--arm", "demo/arm.toml"],
    );
    let started = Instant::now();
    let o = cli(
        &f.dir,
        &run_args(&[
            "--endpoint",
            &addr,
            "--script",
            "next-on-arrival",
            "--probe-noise-mm",
            "0.05",
            "--park-error=15,-10,0.3",
            "--truth-rig",
            "demo/rig-true.toml",
            "-o",
            "report-served.json",
        ]),
    );
    emu.kill().unwrap();
    let _ = emu.wait();
    let out = ok(&o);
    assert!(started.elapsed() < Duration::from_secs(60));
    assert_eq!(field(&out, "rows"), 53.0);
    assert_eq!(field(&out, "pass"), 53.0);
    assert!(field(&out, "max_pos_err_mm") <= 5.0);
    let table = ok(&cli(&f.dir, &["report", "report-served.json"]));
    assert!(table.contains("rows: 53"));
}

#[test]
fn run_outputs_are_byte_identical() {
    let f = fixture();
    let args = |o: &'static str, e: &'static str| {
        run_args(&[
            "--probe-noise-mm",
            "0.05",
            "--park-error=5,5,0.1",
            "-o",
            o,
            "--events",
            e,
        ])
    };
    ok(&cli(&f.dir, &args("r1.json", "e1.jsonl")));
    ok(&cli(&f.dir, &args("r2.json", "e2.jsonl")));
    let r1 = std::fs::read(f.dir.join("r1.json")).unwrap();
    assert_eq!(r1, std::fs::read(f.dir.join("r2.json")).unwrap());
    assert_eq!(
        std::fs::read(f.dir.join("e1.jsonl")).unwrap(),
        std::fs::read(f.dir.join("e2.jsonl")).unwrap()
    );
    let events = std::fs::read_to_string(f.dir.join("e1.jsonl")).unwrap();
    assert!(events.lines().last().unwrap().contains(r#""to":{"name":"DONE"}"#));
}

#[test]
fn measured_localization_feeds_the_run() {
    let f = fixture();
    let plan = std::fs::read_to_string(f.dir.join("plan.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&plan).unwrap();
    let station = v["stations"][0]["id"].as_u64().unwrap().to_string();
    ok(&cli(
        &f.dir,
        &[
            "synth-measure",
            "--workcell",
            "demo/workcell.toml",
            "--plan",
            "plan.json",
            "--station",
            &station,
            "--park-error=12,-8,0.5",
            "-o",
            "m.toml",
        ],
    ));
    let out = ok(&cli(
        &f.dir,
        &[
            "localize",
            "--workcell",
            "demo/workcell.toml",
            "--measurements",
            "m.toml",
            "-o",
            "loc.json",
        ],
    ));
    assert!(field(&out, "rms_mm") < 1e-6);
    let o = ok(&cli(
        &f.dir,
        &run_args(&["--localization", "loc.json", "-o", "r-loc.json"]),
    ));
    assert_eq!(field(&o, "pass"), 53.0);

    // A mis-seated fixture is rejected with its name.
    let m = std::fs::read_to_string(f.dir.join("m.toml")).unwrap();
    let mut lines: Vec<String> = m.lines().map(String::from).collect();
    let i = lines.iter().position(|l| l.starts_with("xyz")).unwrap();
    let nums: Vec<f64> = lines[i][lines[i].find('[').unwrap() + 1..lines[i].find(']').unwrap()]
        .split(',')
        .map(|x| x.trim().parse().unwrap())
        .collect();
    lines[i] = format!("xyz = [{}, {}, {}]", nums[0] + 0.02, nums[1], nums[2]);
    std::fs::write(f.dir.join("m-bad.toml"), lines.join("\n")).unwrap();
    let o = cli(
        &f.dir,
        &[
            "localize",
            "--workcell",
            "demo/workcell.toml",
            "--measurements",
            "m-bad.toml",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error: residual-too-high: "));
}

#[test]
fn console_loopback() {
    let f = fixture();
    let (mut child, addr) = spawn_listening(
        &f.dir,
        &run_args(&[
            "--script",
            "none",
            "--console",
            "127.0.0.1:0",
            "--time-scale",
            "50",
            "--idle-limit",
            "100",
            "--events",
            "console-events.jsonl",
            "-o",
            "console-report.json",
        ]),
    );
    let (code, body) = get(&addr, "/api/state");
    assert_eq!(code, 200);
    let doc: serde_json::Value = serde_json::from_str(&body).unwrap();
    assert_eq!(doc["phase"], "IDLE");
    assert_eq!(doc["task_count"], 53);

    // SSE delivers the current document first.
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(b"GET /api/events HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut r = BufReader::new(s);
    let mut line = String::new();
    loop {
        line.clear();
        r.read_line(&mut line).unwrap();
        if line.starts_with("data: ") {
            assert!(line.contains("\"phase\""));
            break;
        }
    }

    let cycle = ["NEXT", "NEXT", "PREV", "NEXT", "RESTART"];
    let presses: Vec<&str> = (0..100).map(|i| cycle[i % cycle.len()]).collect();
    for p in &presses {
        assert_eq!(press(&addr, p), 202);
    }
    assert_eq!(press(&addr, "STOP"), 202);
    let t0 = Instant::now();
    loop {
        let doc: serde_json::Value = serde_json::from_str(&get(&addr, "/api/state").1).unwrap();
        if doc["phase"] == "STOPPED" {
            assert_eq!(doc["commands_received"], 101);
            assert_eq!(doc["laser_on"], false);
            break;
        }
        assert!(t0.elapsed() < Duration::from_secs(2), "STOP not reflected");
        std::thread::sleep(Duration::from_millis(20));
    }
    let status = child.wait().unwrap();
    assert_eq!(status.code(), Some(2), "stalled run exits as a runtime error");
    let events = std::fs::read_to_string(f.dir.join("console-events.jsonl")).unwrap();
    let inputs: Vec<String> = events
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["input"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .filter(|i| i != "LOCALIZED" && i != "ARRIVED")
        .collect();
    let mut expected: Vec<String> = presses.iter().map(|s| s.to_string()).collect();
    expected.push("STOP".into());
    assert_eq!(inputs, expected);
    assert!(f.dir.join("console-report.json").exists());
}
