//! Loading inputs and writing outputs atomically, with errors mapped to
//! exit codes and diagnostic codes.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use laserguide::arm::ArmModel;
use laserguide::optics::{LaserRig, ObservationSet};
use laserguide::plan::Plan;
use laserguide::workcell::{TriMesh, Workcell};

/// Input files or data that fail their checks.
pub const EXIT_INVALID: u8 = 1;
/// Anything else: I/O, connection, aborted run.
pub const EXIT_RUNTIME: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub exit: u8,
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn invalid(code: &'static str, message: impl fmt::Display) -> Self {
        Self {
            exit: EXIT_INVALID,
            code,
            message: message.to_string(),
        }
    }

    pub fn runtime(code: &'static str, message: impl fmt::Display) -> Self {
        Self {
            exit: EXIT_RUNTIME,
            code,
            message: message.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn parse_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::invalid("invalid-input", format!("{}: {e}", path.display()))
}

pub fn load_workcell(path: &Path) -> CliResult<Workcell> {
    use laserguide::workcell::WorkcellError;
    Workcell::load(path).map_err(|e| match e {
        WorkcellError::Io(m) => CliError::runtime("io", m),
        e => parse_err(path, e),
    })
}

pub fn load_arm(path: &Path) -> CliResult<ArmModel> {
    ArmModel::from_toml_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

pub fn load_rig(path: &Path) -> CliResult<LaserRig> {
    LaserRig::from_toml_str(&read_text(path)?).map_err(|e| parse_err(path, e))
}

pub fn load_plan(path: &Path) -> CliResult<Plan> {
    Plan::from_json(&read_text(path)?).map_err(|e| parse_err(path, e))
}

/// Observation set plus the mesh it refers to (resolved next to the file).
pub fn load_observations(path: &Path) -> CliResult<(ObservationSet, TriMesh)> {
    let set = ObservationSet::from_toml_str(&read_text(path)?).map_err(|e| parse_err(path, e))?;
    let mesh_path = path.parent().unwrap_or(Path::new(".")).join(&set.mesh_ref);
    let mesh = TriMesh::parse(&read_text(&mesh_path)?).map_err(|e| parse_err(&mesh_path, e))?;
    Ok((set, mesh))
}

/// Resolves an output path: relative paths land in `out_dir`.
pub fn output_path(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}

/// Writes via a temporary file in the same directory and renames it into
/// place, so readers never see a half-written file.
pub fn write_atomic(path: &Path, text: &str) -> CliResult<()> {
    let io = |e: std::io::Error| CliError::runtime("io", format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(text.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    log::info!("wrote {}", path.display());
    Ok(())
}
