//! Fan-line laser devices on the robot tool.
//!
//! Each device emits one light plane. The plane contains the beam axis
//! (device +z) and is perpendicular to `fan_normal`. A boresight offset
//! rotates the whole emitter by pitch (about device x) then yaw (about
//! device y), so the true emitter frame is `tool ∘ mount ∘ Rx(pitch)·Ry(yaw)`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::ToolPose;
use crate::format::{check_version, vec3, PoseSpec};
use crate::geom::{rotation_between, Ray, RigidTransform, Rotation, Vec3};
use crate::workcell::{TargetMark, TriMesh};

pub const MAX_OFFSET_DEG: f64 = 5.0;
pub const DEFAULT_MAX_RANGE: f64 = 10.0;
pub const MAX_DEVICES: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("beam misses the mesh")]
    NoHit,
    #[error("hit at {range:.3} m is beyond the {max_range:.1} m visibility limit")]
    OutOfRange { range: f64, max_range: f64 },
    #[error("light plane is parallel to the hit surface")]
    Grazing,
    #[error("observations do not constrain both offset angles")]
    Degenerate,
    #[error("offset pitch {pitch_deg:.3}°, yaw {yaw_deg:.3}° exceeds ±{MAX_OFFSET_DEG}°")]
    Implausible { pitch_deg: f64, yaw_deg: f64 },
    #[error("invalid laser device: {0}")]
    InvalidDevice(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Angular error of the true beam axis relative to the nominal device axis.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct BeamOffset {
    pub pitch: f64,
    pub yaw: f64,
}

impl BeamOffset {
    pub fn new(pitch: f64, yaw: f64) -> Result<Self, OpticsError> {
        let lim = MAX_OFFSET_DEG.to_radians();
        if !(pitch.abs() < lim && yaw.abs() < lim) {
            return Err(OpticsError::Implausible {
                pitch_deg: pitch.to_degrees(),
                yaw_deg: yaw.to_degrees(),
            });
        }
        Ok(Self { pitch, yaw })
    }

    pub fn from_degrees(pitch: f64, yaw: f64) -> Result<Self, OpticsError> {
        Self::new(pitch.to_radians(), yaw.to_radians())
    }

    pub fn rotation(&self) -> Rotation {
        Rotation::rot_x(self.pitch).compose(&Rotation::rot_y(self.yaw))
    }

    /// Undoes `rotation()`: `Ry(-yaw)·Rx(-pitch)`.
    pub fn compensation(&self) -> Rotation {
        Rotation::rot_y(-self.yaw).compose(&Rotation::rot_x(-self.pitch))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaserDevice {
    pub name: String,
    /// Device frame in the tool frame.
    pub mount: RigidTransform,
    /// Light-plane normal in the device frame, perpendicular to device z.
    pub fan_normal: Vec3,
    pub offset: BeamOffset,
    pub max_range: f64,
}

impl LaserDevice {
    pub fn new(
        name: impl Into<String>,
        mount: RigidTransform,
        fan_normal: Vec3,
        offset: BeamOffset,
        max_range: f64,
    ) -> Result<Self, OpticsError> {
        let name = name.into();
        let bad = |m: &str| Err(OpticsError::InvalidDevice(format!("{name}: {m}")));
        if (fan_normal.norm() - 1.0).abs() > 1e-9 {
            return bad("fan normal must be a unit vector");
        }
        if fan_normal.z.abs() > 1e-9 {
            return bad("fan normal must be perpendicular to the beam axis (device z)");
        }
        if !(1.0..=20.0).contains(&max_range) {
            return bad("max range must lie in [1, 20] m");
        }
        BeamOffset::new(offset.pitch, offset.yaw)?;
        Ok(Self {
            name,
            mount,
            fan_normal,
            offset,
            max_range,
        })
    }

    /// Device with the given fan normal at the tool origin, no offset.
    pub fn ideal(name: &str, fan_normal: Vec3) -> Self {
        Self::new(
            name,
            RigidTransform::identity(),
            fan_normal,
            BeamOffset::default(),
            DEFAULT_MAX_RANGE,
        )
        .expect("ideal device is valid")
    }

    pub fn with_offset(&self, offset: BeamOffset) -> Self {
        Self { offset, ..self.clone() }
    }

    /// True emitter frame (offset applied) for a tool pose.
    pub fn emitter_frame(&self, tool: &ToolPose) -> RigidTransform {
        tool.0
            .compose(&self.mount)
            .compose(&RigidTransform::from_rotation(self.offset.rotation()))
    }

    /// In-plane direction marking the fan's positive half, device frame.
    pub fn fan_spread(&self) -> Vec3 {
        Vec3::z().cross(&self.fan_normal)
    }

    /// Tool pose that puts the true beam origin at `origin`, the true beam
    /// axis along `axis` and the light plane through `line_dir`, with the
    /// fan's positive half on the `line_dir` side. The boresight offset is
    /// compensated.
    pub fn tool_pose_for(&self, origin: &Vec3, axis: &Vec3, line_dir: &Vec3) -> Option<ToolPose> {
        let axis = axis.try_normalize(1e-12)?;
        let plane_normal = line_dir.cross(&axis).try_normalize(1e-9)?;
        let aim = rotation_between(&Vec3::z(), &axis);
        let current = aim.apply(&self.fan_normal);
        let roll = current
            .cross(&plane_normal)
            .dot(&axis)
            .atan2(current.dot(&plane_normal));
        let emitter_rot = Rotation::from_axis_angle(&axis, roll).compose(&aim);
        let emitter = RigidTransform::new(emitter_rot, *origin);
        let tool = emitter
            .compose(&RigidTransform::from_rotation(self.offset.compensation()))
            .compose(&self.mount.invert());
        Some(ToolPose(tool))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaserRig {
    devices: Vec<LaserDevice>,
}

impl LaserRig {
    pub fn new(devices: Vec<LaserDevice>) -> Result<Self, OpticsError> {
        if devices.is_empty() || devices.len() > MAX_DEVICES {
            return Err(OpticsError::InvalidDevice(format!(
                "a rig holds 1 to {MAX_DEVICES} devices, got {}",
                devices.len()
            )));
        }
        Ok(Self { devices })
    }

    /// Two coaxial devices at the tool origin with perpendicular light
    /// planes, forming a cross.
    pub fn cross(offset_a: BeamOffset, offset_b: BeamOffset) -> Self {
        Self::new(vec![
            LaserDevice::ideal("line-a", Vec3::x()).with_offset(offset_a),
            LaserDevice::ideal("line-b", Vec3::y()).with_offset(offset_b),
        ])
        .expect("two devices")
    }

    pub fn devices(&self) -> &[LaserDevice] {
        &self.devices
    }

    pub fn device(&self, i: usize) -> Option<&LaserDevice> {
        self.devices.get(i)
    }

    pub fn set_offset(&mut self, i: usize, offset: BeamOffset) -> Result<(), OpticsError> {
        let d = self
            .devices
            .get_mut(i)
            .ok_or_else(|| OpticsError::InvalidDevice(format!("no device {i}")))?;
        d.offset = BeamOffset::new(offset.pitch, offset.yaw)?;
        Ok(())
    }

    pub fn max_range(&self) -> f64 {
        self.devices.iter().map(|d| d.max_range).fold(0.0, f64::max)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, OpticsError> {
        let file: RigFile = toml::from_str(text).map_err(|e| OpticsError::Parse(e.to_string()))?;
        check_version(file.version, "rig file").map_err(OpticsError::Parse)?;
        let devices = file
            .devices
            .into_iter()
            .map(|d| {
                LaserDevice::new(
                    d.name,
                    d.mount.to_transform(),
                    vec3(d.fan_normal),
                    BeamOffset::from_degrees(d.pitch_deg, d.yaw_deg)?,
                    d.max_range,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(devices)
    }

    pub fn to_toml_string(&self) -> String {
        let file = RigFile {
            version: 1,
            devices: self
                .devices
                .iter()
                .map(|d| DeviceSpec {
                    name: d.name.clone(),
                    fan_normal: d.fan_normal.into(),
                    pitch_deg: d.offset.pitch.to_degrees(),
                    yaw_deg: d.offset.yaw.to_degrees(),
                    max_range: d.max_range,
                    mount: PoseSpec::from_transform(&d.mount),
                })
                .collect(),
        };
        toml::to_string(&file).expect("rig serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    version: u32,
    devices: Vec<DeviceSpec>,
}

fn default_range() -> f64 {
    DEFAULT_MAX_RANGE
}

#[derive(Serialize, Deserialize)]
struct DeviceSpec {
    name: String,
    fan_normal: [f64; 3],
    #[serde(default)]
    pitch_deg: f64,
    #[serde(default)]
    yaw_deg: f64,
    #[serde(default = "default_range")]
    max_range: f64,
    #[serde(default)]
    mount: PoseSpec,
}

/// A laser line as it lands on the surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedMark {
    pub point: Vec3,
    pub direction: Vec3,
    pub range: f64,
    pub triangle: usize,
}

/// Central ray of the device; `tool` must be expressed in the frame the ray
/// is wanted in.
pub fn beam_ray(tool: &ToolPose, device: &LaserDevice) -> Ray {
    let frame = device.emitter_frame(tool);
    Ray {
        origin: frame.translation,
        direction: frame.apply_vector(&Vec3::z()),
    }
}

/// Intersects the beam with the mesh (tool pose in the mesh frame) and
/// extracts the projected line direction from the hit triangle's plane.
pub fn project_mark(tool: &ToolPose, device: &LaserDevice, mesh: &TriMesh) -> Result<ProjectedMark, OpticsError> {
    let ray = beam_ray(tool, device);
    let hit = mesh.ray_hit(&ray).ok_or(OpticsError::NoHit)?;
    if hit.distance > device.max_range {
        return Err(OpticsError::OutOfRange {
            range: hit.distance,
            max_range: device.max_range,
        });
    }
    let frame = device.emitter_frame(tool);
    let plane_normal = frame.apply_vector(&device.fan_normal);
    let surface_normal = mesh.normal(hit.triangle).expect("hit triangle exists");
    let mut dir = plane_normal
        .cross(&surface_normal)
        .try_normalize(1e-12)
        .ok_or(OpticsError::Grazing)?;
    if dir.dot(&frame.apply_vector(&device.fan_spread())) < 0.0 {
        dir = -dir;
    }
    Ok(ProjectedMark {
        point: hit.point,
        direction: dir,
        range: hit.distance,
        triangle: hit.triangle,
    })
}

/// One calibration shot: where the uncompensated beam should land and where
/// it was seen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub tool: ToolPose,
    pub nominal_point: Vec3,
    pub observed_point: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub offset: BeamOffset,
    /// RMS distance between predicted and observed spots, meters.
    pub rms: f64,
    pub iterations: usize,
}

pub const CALIBRATION_MAX_ITERATIONS: usize = 50;
pub const CALIBRATION_STEP_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-7;

fn predicted_spot(
    obs: &Observation,
    device: &LaserDevice,
    mesh: &TriMesh,
    p: f64,
    y: f64,
) -> Result<Vec3, OpticsError> {
    let dev = device.with_offset(BeamOffset { pitch: p, yaw: y });
    let ray = beam_ray(&obs.tool, &dev);
    mesh.ray_hit(&ray).map(|h| h.point).ok_or(OpticsError::NoHit)
}

fn residuals(
    obs: &[Observation],
    device: &LaserDevice,
    mesh: &TriMesh,
    p: f64,
    y: f64,
) -> Result<DVector<f64>, OpticsError> {
    let mut r = DVector::zeros(3 * obs.len());
    for (i, o) in obs.iter().enumerate() {
        let d = predicted_spot(o, device, mesh, p, y)? - o.observed_point;
        r.fixed_rows_mut::<3>(3 * i).copy_from(&d);
    }
    Ok(r)
}

/// Fits the device's pitch/yaw offset by Gauss–Newton on the spot
/// reprojection residuals, starting from zero. The device's current offset
/// is ignored.
pub fn calibrate_offset(obs: &[Observation], device: &LaserDevice, mesh: &TriMesh) -> Result<Calibration, OpticsError> {
    if obs.len() < 2 {
        return Err(OpticsError::Degenerate);
    }
    let first = obs[0].tool.0;
    if obs.iter().all(|o| {
        let (dt, dr) = o.tool.0.distance_to(&first);
        dt < 1e-9 && dr < 1e-9
    }) {
        return Err(OpticsError::Degenerate);
    }
    let mut theta = Vector2::zeros();
    let mut iterations = 0;
    for it in 0..CALIBRATION_MAX_ITERATIONS {
        iterations = it + 1;
        let r = residuals(obs, device, mesh, theta.x, theta.y)?;
        let mut jac = DMatrix::zeros(r.len(), 2);
        for k in 0..2 {
            let mut hi = theta;
            let mut lo = theta;
            hi[k] += FD_STEP;
            lo[k] -= FD_STEP;
            let col = (residuals(obs, device, mesh, hi.x, hi.y)? - residuals(obs, device, mesh, lo.x, lo.y)?)
                / (2.0 * FD_STEP);
            jac.set_column(k, &col);
        }
        let jtj: Matrix2<f64> = (jac.transpose() * &jac).fixed_view::<2, 2>(0, 0).into();
        let eig = jtj.symmetric_eigenvalues();
        let (lo, hi) = (eig.min(), eig.max());
        if !(lo > 1e-12 * hi.max(1e-300)) {
            return Err(OpticsError::Degenerate);
        }
        let jtr: Vector2<f64> = (jac.transpose() * &r).fixed_rows::<2>(0).into();
        let step = -(jtj.try_inverse().ok_or(OpticsError::Degenerate)? * jtr);
        theta += step;
        if step.norm() < CALIBRATION_STEP_TOL {
            break;
        }
    }
    let offset = BeamOffset::new(theta.x, theta.y)?;
    let r = residuals(obs, device, mesh, theta.x, theta.y)?;
    Ok(Calibration {
        offset,
        rms: (r.norm_squared() / obs.len() as f64).sqrt(),
        iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkCheck {
    pub pos_err: f64,
    /// Angle between the lines (direction sign ignored), in [0, pi/2].
    pub ang_err: f64,
    pub pass: bool,
}

/// Unsigned angle between two lines.
pub fn line_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b).abs())
}

pub fn verify_mark(achieved: &ProjectedMark, nominal: &TargetMark) -> MarkCheck {
    let pos_err = (achieved.point - nominal.point).norm();
    let ang_err = line_angle(&achieved.direction, &nominal.direction);
    MarkCheck {
        pos_err,
        ang_err,
        pass: pos_err <= nominal.tolerance_pos && ang_err <= nominal.tolerance_ang(),
    }
}

#[derive(Serialize, Deserialize)]
struct ObservationFile {
    version: u32,
    #[serde(default)]
    device: usize,
    mesh: String,
    observations: Vec<ObservationSpec>,
}

#[derive(Serialize, Deserialize)]
struct ObservationSpec {
    tool: PoseSpec,
    nominal: [f64; 3],
    observed: [f64; 3],
}

/// Calibration observations as stored on disk: the device index they
/// belong to, the mesh the spots were observed on, and the shots.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub device: usize,
    pub mesh_ref: String,
    pub observations: Vec<Observation>,
}

impl ObservationSet {
    pub fn from_toml_str(text: &str) -> Result<Self, OpticsError> {
        let f: ObservationFile = toml::from_str(text).map_err(|e| OpticsError::Parse(e.to_string()))?;
        check_version(f.version, "observation file").map_err(OpticsError::Parse)?;
        Ok(Self {
            device: f.device,
            mesh_ref: f.mesh,
            observations: f
                .observations
                .iter()
                .map(|o| Observation {
                    tool: ToolPose(o.tool.to_transform()),
                    nominal_point: vec3(o.nominal),
                    observed_point: vec3(o.observed),
                })
                .collect(),
        })
    }

    /// Tool poses are written as xyz/rpy, so callers that need the exact
    /// poses back should build them from `PoseSpec`s.
    pub fn to_toml_string(&self) -> String {
        let f = ObservationFile {
            version: 1,
            device: self.device,
            mesh: self.mesh_ref.clone(),
            observations: self
                .observations
                .iter()
                .map(|o| ObservationSpec {
                    tool: PoseSpec::from_transform(&o.tool.0),
                    nominal: o.nominal_point.into(),
                    observed: o.observed_point.into(),
                })
                .collect(),
        };
        toml::to_string(&f).expect("observations serialize")
    }
}

/// Simulates calibration shots: the nominal spot comes from the zero-offset
/// device, the observed spot from `truth`.
pub fn simulate_observations(
    tools: &[ToolPose],
    truth: &LaserDevice,
    mesh: &TriMesh,
) -> Result<Vec<Observation>, OpticsError> {
    let nominal = truth.with_offset(BeamOffset::default());
    tools
        .iter()
        .map(|t| {
            let n = mesh.ray_hit(&beam_ray(t, &nominal)).ok_or(OpticsError::NoHit)?;
            let o = mesh.ray_hit(&beam_ray(t, truth)).ok_or(OpticsError::NoHit)?;
            Ok(Observation {
                tool: *t,
                nominal_point: n.point,
                observed_point: o.point,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workcell::TargetGroup;
    use proptest::prelude::*;

    fn floor() -> TriMesh {
        let s = 30.0;
        TriMesh::new(
            vec![
                Vec3::new(-s, -s, 0.0),
                Vec3::new(s, -s, 0.0),
                Vec3::new(s, s, 0.0),
                Vec3::new(-s, s, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap()
    }

    /// Vertical wall at x = `x`, facing -x.
    fn wall(x: f64) -> TriMesh {
        TriMesh::new(
            vec![
                Vec3::new(x, -10.0, -10.0),
                Vec3::new(x, 10.0, -10.0),
                Vec3::new(x, 10.0, 10.0),
                Vec3::new(x, -10.0, 10.0),
            ],
            vec![[0, 2, 1], [0, 3, 2]],
        )
        .unwrap()
    }

    fn looking_along_x(origin: Vec3) -> ToolPose {
        ToolPose(RigidTransform::new(
            Rotation::rot_y(std::f64::consts::FRAC_PI_2),
            origin,
        ))
    }

    fn target(point: Vec3, direction: Vec3) -> TargetMark {
        TargetMark {
            id: "T".into(),
            group: TargetGroup::Outer,
            point,
            direction,
            tolerance_pos: 0.005,
            tolerance_ang_deg: 1.0,
        }
    }

    #[test]
    fn beam_ray_identity() {
        let d = LaserDevice::ideal("a", Vec3::x());
        let ray = beam_ray(&ToolPose::default(), &d);
        assert_eq!(ray.origin, Vec3::zeros());
        assert!((ray.direction - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn one_degree_pitch_displaces_spot_by_tangent() {
        let mesh = wall(2.0);
        let tool = looking_along_x(Vec3::zeros());
        let ideal = LaserDevice::ideal("a", Vec3::x());
        let off = ideal.with_offset(BeamOffset::from_degrees(1.0, 0.0).unwrap());
        let a = mesh.ray_hit(&beam_ray(&tool, &ideal)).unwrap().point;
        let b = mesh.ray_hit(&beam_ray(&tool, &off)).unwrap().point;
        let oracle = 2.0 * 1f64.to_radians().tan();
        assert!(((a - b).norm() - oracle).abs() < 1e-12);
        assert!((oracle - 0.0349).abs() < 1e-4);
    }

    #[test]
    fn compensation_restores_nominal_ray() {
        let offset = BeamOffset::from_degrees(0.8, -0.3).unwrap();
        let ideal = LaserDevice::ideal("a", Vec3::x());
        let mut comp = ideal.with_offset(offset);
        comp.mount = RigidTransform::from_rotation(offset.compensation());
        let tool = ToolPose(RigidTransform::new(
            Rotation::from_rpy(0.2, 0.4, -1.0),
            Vec3::new(1.0, 2.0, 3.0),
        ));
        let a = beam_ray(&tool, &ideal);
        let b = beam_ray(&tool, &comp);
        assert!((a.origin - b.origin).norm() < 1e-12);
        assert!((a.direction - b.direction).norm() < 1e-12);
    }

    #[test]
    fn project_onto_floor() {
        let d = LaserDevice::ideal("a", Vec3::y());
        // device at (0,0,2) pointing down: rotate pi about x
        let tool = ToolPose(RigidTransform::new(
            Rotation::rot_x(std::f64::consts::PI),
            Vec3::new(0.0, 0.0, 2.0),
        ));
        let m = project_mark(&tool, &d, &floor()).unwrap();
        assert!(m.point.norm() < 1e-12);
        assert!((m.direction.x.abs() - 1.0).abs() < 1e-12);
        assert!((m.range - 2.0).abs() < 1e-12);
    }

    #[test]
    fn project_out_of_range() {
        let d = LaserDevice::ideal("a", Vec3::y());
        let tool = ToolPose(RigidTransform::new(
            Rotation::rot_x(std::f64::consts::PI),
            Vec3::new(0.0, 0.0, 12.0),
        ));
        assert!(matches!(
            project_mark(&tool, &d, &floor()),
            Err(OpticsError::OutOfRange { .. })
        ));
        let up = ToolPose(RigidTransform::from_translation(Vec3::new(0.0, 0.0, 1.0)));
        assert_eq!(project_mark(&up, &d, &floor()), Err(OpticsError::NoHit));
    }

    #[test]
    fn tool_pose_for_hits_and_aligns() {
        let mesh = wall(3.0);
        let d = LaserDevice::ideal("a", Vec3::x()).with_offset(BeamOffset::from_degrees(1.2, -0.7).unwrap());
        let goal = Vec3::new(3.0, 0.4, 1.1);
        let line = Vec3::new(0.0, 0.6, 0.8);
        let origin = Vec3::new(0.5, -0.2, 1.5);
        let tool = d.tool_pose_for(&origin, &(goal - origin), &line).unwrap();
        let m = project_mark(&tool, &d, &mesh).unwrap();
        assert!((m.point - goal).norm() < 1e-9);
        assert!(line_angle(&m.direction, &line) < 1e-9);
        // positive fan half points along line_dir
        assert!(m.direction.dot(&line) > 0.0);
    }

    #[test]
    fn verify_mark_tolerance_boundaries() {
        let t = target(Vec3::zeros(), Vec3::x());
        let mk = |p: Vec3| ProjectedMark {
            point: p,
            direction: Vec3::x(),
            range: 1.0,
            triangle: 0,
        };
        let c = verify_mark(&mk(Vec3::zeros()), &t);
        assert_eq!((c.pos_err, c.ang_err, c.pass), (0.0, 0.0, true));
        assert!(verify_mark(&mk(Vec3::new(0.004, 0.0, 0.0)), &t).pass);
        assert!(!verify_mark(&mk(Vec3::new(0.006, 0.0, 0.0)), &t).pass);
    }

    fn calibration_tools() -> Vec<ToolPose> {
        // distances 1..3 m to the wall at x = 3, slightly varied headings
        [
            (2.0, 0.0, 0.0),
            (1.333, 0.1, -0.05),
            (0.667, -0.08, 0.07),
            (0.0, 0.05, 0.1),
        ]
        .iter()
        .map(|&(x, a, b)| {
            ToolPose(RigidTransform::new(
                Rotation::from_rpy(a, std::f64::consts::FRAC_PI_2 + b, a * 0.5),
                Vec3::new(x, 0.0, 1.0),
            ))
        })
        .collect()
    }

    #[test]
    fn calibration_recovers_offset() {
        let mesh = wall(3.0);
        let truth = LaserDevice::ideal("a", Vec3::x()).with_offset(BeamOffset::from_degrees(0.8, -0.3).unwrap());
        let obs = simulate_observations(&calibration_tools(), &truth, &mesh).unwrap();
        let cal = calibrate_offset(&obs, &LaserDevice::ideal("a", Vec3::x()), &mesh).unwrap();
        assert!((cal.offset.pitch.to_degrees() - 0.8).abs() < 0.01);
        assert!((cal.offset.yaw.to_degrees() + 0.3).abs() < 0.01);
        assert!(cal.rms < 1e-9);
    }

    #[test]
    fn calibration_zero_offset() {
        let mesh = wall(3.0);
        let truth = LaserDevice::ideal("a", Vec3::x());
        let obs = simulate_observations(&calibration_tools(), &truth, &mesh).unwrap();
        let cal = calibrate_offset(&obs, &truth, &mesh).unwrap();
        assert!(cal.offset.pitch.abs() < 1e-9 && cal.offset.yaw.abs() < 1e-9);
    }

    #[test]
    fn calibration_single_observation_is_degenerate() {
        let mesh = wall(3.0);
        let truth = LaserDevice::ideal("a", Vec3::x()).with_offset(BeamOffset::from_degrees(0.8, -0.3).unwrap());
        let obs = simulate_observations(&calibration_tools()[..1], &truth, &mesh).unwrap();
        assert_eq!(calibrate_offset(&obs, &truth, &mesh), Err(OpticsError::Degenerate));
        let twice = vec![obs[0], obs[0]];
        assert_eq!(calibrate_offset(&twice, &truth, &mesh), Err(OpticsError::Degenerate));
    }

    #[test]
    fn calibration_flags_implausible_fit() {
        let mesh = wall(3.0);
        // spots displaced as if the beam were 7 degrees off
        let truth = LaserDevice::ideal("a", Vec3::x());
        let mut obs = simulate_observations(&calibration_tools(), &truth, &mesh).unwrap();
        for o in &mut obs {
            let range = (o.nominal_point - o.tool.0.translation).norm();
            o.observed_point.y += range * 7f64.to_radians().tan();
        }
        assert!(matches!(
            calibrate_offset(&obs, &truth, &mesh),
            Err(OpticsError::Implausible { .. })
        ));
    }

    #[test]
    fn residual_non_increasing_with_more_observations() {
        let mesh = wall(3.0);
        let truth = LaserDevice::ideal("a", Vec3::x()).with_offset(BeamOffset::from_degrees(-1.1, 0.6).unwrap());
        let obs = simulate_observations(&calibration_tools(), &truth, &mesh).unwrap();
        let mut prev = f64::INFINITY;
        for n in 2..=obs.len() {
            let cal = calibrate_offset(&obs[..n], &truth, &mesh).unwrap();
            assert!(cal.rms <= prev + 1e-12);
            prev = cal.rms;
        }
    }

    #[test]
    fn rig_file_round_trip_and_limits() {
        let rig = LaserRig::cross(BeamOffset::from_degrees(0.8, -0.3).unwrap(), BeamOffset::default());
        let back = LaserRig::from_toml_str(&rig.to_toml_string()).unwrap();
        assert_eq!(back.devices().len(), 2);
        assert!((back.devices()[0].offset.pitch - rig.devices()[0].offset.pitch).abs() < 1e-15);
        assert!(LaserRig::new(vec![]).is_err());
        assert!(LaserRig::new(vec![LaserDevice::ideal("a", Vec3::x()); 5]).is_err());
        assert!(LaserDevice::new("a", RigidTransform::identity(), Vec3::z(), BeamOffset::default(), 10.0).is_err());
        assert!(LaserDevice::new("a", RigidTransform::identity(), Vec3::x(), BeamOffset::default(), 25.0).is_err());
        assert!(BeamOffset::from_degrees(5.5, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn verify_ignores_direction_sign(dx in -1.0f64..1.0, dy in -1.0f64..1.0, ex in -1.0f64..1.0, ey in -1.0f64..1.0) {
            prop_assume!(dx.hypot(dy) > 1e-3 && ex.hypot(ey) > 1e-3);
            let a = Vec3::new(dx, dy, 0.0).normalize();
            let n = Vec3::new(ex, ey, 0.0).normalize();
            let mark = ProjectedMark { point: Vec3::zeros(), direction: a, range: 1.0, triangle: 0 };
            let c1 = verify_mark(&mark, &target(Vec3::zeros(), n));
            let c2 = verify_mark(&mark, &target(Vec3::zeros(), -n));
            prop_assert!((c1.ang_err - c2.ang_err).abs() < 1e-12);
            prop_assert!(c1.ang_err <= std::f64::consts::FRAC_PI_2 + 1e-12);
        }

        #[test]
        fn compensated_aim_closes_within_0_1_mm_at_3_m(p in -4.9f64..4.9, y in -4.9f64..4.9) {
            let mesh = wall(3.0);
            let true_dev = LaserDevice::ideal("a", Vec3::x()).with_offset(BeamOffset::from_degrees(p, y).unwrap());
            let obs = simulate_observations(&calibration_tools(), &true_dev, &mesh).unwrap();
            let cal = calibrate_offset(&obs, &true_dev, &mesh).unwrap();
            let model = true_dev.with_offset(cal.offset);
            let goal = Vec3::new(3.0, 0.3, 1.2);
            let origin = Vec3::new(0.0, 0.0, 1.0);
            let tool = model.tool_pose_for(&origin, &(goal - origin), &Vec3::y()).unwrap();
            let hit = mesh.ray_hit(&beam_ray(&tool, &true_dev)).unwrap();
            prop_assert!((hit.point - goal).norm() <= 1e-4);
        }
    }
}
