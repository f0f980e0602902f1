//! Robot base localization from fixture (or marker) point correspondences.

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{check_version, vec3};
use crate::geom::{RigidTransform, Rotation, Vec3};
use crate::workcell::{spread, Workcell};

/// Default acceptance threshold on the fit RMS, meters.
pub const DEFAULT_RMS_THRESHOLD: f64 = 0.002;
pub const MIN_SPREAD: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LocateError {
    #[error("need at least 3 point pairs, got {0}")]
    TooFewPoints(usize),
    #[error("reference points are collinear")]
    DegenerateGeometry,
    #[error("rigid fit failed numerically")]
    RankDeficient,
    #[error("unknown fixture '{0}'")]
    UnknownFixture(String),
    #[error("fit rms {:.2} mm exceeds {:.2} mm; worst fixture '{worst}'", result.rms * 1e3, threshold * 1e3)]
    ResidualTooHigh {
        result: Box<LocalizationResult>,
        worst: String,
        threshold: f64,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    Fixture,
    Marker,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    /// (workcell point, robot-frame point)
    pairs: Vec<(Vec3, Vec3)>,
    pub source: PointSource,
}

impl Correspondences {
    pub fn new(pairs: Vec<(Vec3, Vec3)>, source: PointSource) -> Result<Self, LocateError> {
        if pairs.len() < 3 {
            return Err(LocateError::TooFewPoints(pairs.len()));
        }
        let pts: Vec<Vec3> = pairs.iter().map(|p| p.0).collect();
        if !(spread(&pts) > MIN_SPREAD) {
            return Err(LocateError::DegenerateGeometry);
        }
        Ok(Self { pairs, source })
    }

    pub fn pairs(&self) -> &[(Vec3, Vec3)] {
        &self.pairs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Workcell frame expressed in the robot base frame:
    /// `robot_point = pose.apply(workcell_point)`.
    pub pose: RigidTransform,
    pub rms: f64,
    pub residuals: Vec<f64>,
    /// Fixture names aligned with `residuals`, empty for raw registrations.
    #[serde(default)]
    pub labels: Vec<String>,
    /// Digest of the workcell this result was computed against.
    #[serde(default)]
    pub workcell_digest: Option<String>,
}

impl LocalizationResult {
    /// Robot base pose in the workcell frame.
    pub fn base_in_workcell(&self) -> RigidTransform {
        self.pose.invert()
    }

    pub fn worst(&self) -> Option<usize> {
        self.residuals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

/// Closed-form least-squares rigid fit (cross-covariance SVD with a
/// determinant correction, so the result is never a reflection).
pub fn register_points(c: &Correspondences) -> Result<LocalizationResult, LocateError> {
    let n = c.pairs.len() as f64;
    let cw = c.pairs.iter().map(|p| p.0).sum::<Vec3>() / n;
    let cr = c.pairs.iter().map(|p| p.1).sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (w, r) in &c.pairs {
        h += (w - cw) * (r - cr).transpose();
    }
    if !h.iter().all(|x| x.is_finite()) {
        return Err(LocateError::RankDeficient);
    }
    let svd = h.svd(true, true);
    let (Some(u), Some(vt)) = (svd.u, svd.v_t) else {
        return Err(LocateError::RankDeficient);
    };
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation::from_matrix(&r).map_err(|_| LocateError::RankDeficient)?;
    let translation = cr - rotation.apply(&cw);
    let pose = RigidTransform::new(rotation, translation);
    let residuals: Vec<f64> = c.pairs.iter().map(|(w, r)| (r - pose.apply(w)).norm()).collect();
    let rms = (residuals.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    Ok(LocalizationResult {
        pose,
        rms,
        residuals,
        labels: Vec::new(),
        workcell_digest: None,
    })
}

/// Fits the workcell pose from measured fixture positions (robot frame) and
/// rejects fits whose RMS exceeds `threshold`.
pub fn localize(
    cell: &Workcell,
    measured: &[(String, Vec3)],
    threshold: f64,
) -> Result<LocalizationResult, LocateError> {
    if measured.len() < 3 {
        return Err(LocateError::TooFewPoints(measured.len()));
    }
    let mut pairs = Vec::with_capacity(measured.len());
    for (name, p) in measured {
        let f = cell
            .fixture(name)
            .ok_or_else(|| LocateError::UnknownFixture(name.clone()))?;
        pairs.push((f.point, *p));
    }
    let mut result = register_points(&Correspondences::new(pairs, PointSource::Fixture)?)?;
    result.labels = measured.iter().map(|m| m.0.clone()).collect();
    result.workcell_digest = Some(cell.digest());
    if result.rms > threshold {
        let worst = result.labels[result.worst().expect("non-empty")].clone();
        return Err(LocateError::ResidualTooHigh {
            result: Box::new(result),
            worst,
            threshold,
        });
    }
    Ok(result)
}

/// Noiseless fixture measurements for a robot parked at `base_in_workcell`.
pub fn synthesize_measurements(cell: &Workcell, set: &str, base_in_workcell: &RigidTransform) -> Vec<(String, Vec3)> {
    let to_robot = base_in_workcell.invert();
    cell.fixtures_in(set)
        .map(|f| (f.name.clone(), to_robot.apply(&f.point)))
        .collect()
}

/// Adds isotropic Gaussian noise of `sigma` meters to every point.
pub fn add_noise(points: &mut [(String, Vec3)], sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for (_, p) in points {
        *p += Vec3::from_fn(|_, _| normal.sample(&mut rng));
    }
}

#[derive(Serialize, Deserialize)]
struct MeasurementFile {
    version: u32,
    #[serde(default)]
    station: Option<usize>,
    points: Vec<MeasuredPoint>,
}

#[derive(Serialize, Deserialize)]
struct MeasuredPoint {
    fixture: String,
    xyz: [f64; 3],
}

/// Measured fixture positions in the robot base frame, optionally tagged
/// with the station they were taken at.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurements {
    pub station: Option<usize>,
    pub points: Vec<(String, Vec3)>,
}

impl Measurements {
    pub fn from_toml_str(text: &str) -> Result<Self, LocateError> {
        let f: MeasurementFile = toml::from_str(text).map_err(|e| LocateError::Parse(e.to_string()))?;
        check_version(f.version, "measurement file").map_err(LocateError::Parse)?;
        Ok(Self {
            station: f.station,
            points: f.points.into_iter().map(|p| (p.fixture, vec3(p.xyz))).collect(),
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&MeasurementFile {
            version: 1,
            station: self.station,
            points: self
                .points
                .iter()
                .map(|(n, p)| MeasuredPoint {
                    fixture: n.clone(),
                    xyz: (*p).into(),
                })
                .collect(),
        })
        .expect("measurements serialize")
    }
}

/// Localization output file: a result tagged with the station it was
/// taken at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub version: u32,
    pub station: Option<usize>,
    /// Robot base pose in the workcell frame (inverse of `result.pose`);
    /// informational, recomputed on load.
    pub base_in_workcell: RigidTransform,
    pub result: LocalizationResult,
}

impl LocalizationRecord {
    pub fn new(station: Option<usize>, result: LocalizationResult) -> Self {
        Self {
            version: 1,
            station,
            base_in_workcell: result.base_in_workcell(),
            result,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("record serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, LocateError> {
        let mut r: Self = serde_json::from_str(text).map_err(|e| LocateError::Parse(e.to_string()))?;
        check_version(r.version, "localization file").map_err(LocateError::Parse)?;
        r.base_in_workcell = r.result.base_in_workcell();
        Ok(r)
    }
}
