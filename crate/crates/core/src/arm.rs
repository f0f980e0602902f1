//! Serial 6R manipulator: forward kinematics, geometric Jacobian and
//! damped-least-squares inverse kinematics with seeded random restarts.

use nalgebra::{Matrix6, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{check_version, vec3, PoseSpec};
use crate::geom::{RigidTransform, Rotation, Vec3};

pub const DOF: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum ArmError {
    #[error("joint {joint} = {value:.6} rad outside [{lo:.6}, {hi:.6}]")]
    JointLimit { joint: usize, value: f64, lo: f64, hi: f64 },
    #[error("ik did not converge (best pos err {pos_err:.3e} m, ang err {ang_err:.3e} rad)")]
    NoConvergence { pos_err: f64, ang_err: f64 },
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
    #[error("arm file parse error: {0}")]
    Parse(String),
    #[error("non-finite input")]
    NonFinite,
}

/// Six joint angles in radians.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct JointVector(pub [f64; DOF]);

impl JointVector {
    pub fn zeros() -> Self {
        Self([0.0; DOF])
    }

    pub fn from_degrees(d: [f64; DOF]) -> Self {
        Self(d.map(f64::to_radians))
    }

    pub fn to_degrees(&self) -> [f64; DOF] {
        self.0.map(f64::to_degrees)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_delta(&self, other: &JointVector) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl std::ops::IndexMut<usize> for JointVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

/// Pose of the tool frame in the robot base frame.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolPose(pub RigidTransform);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Joint {
    /// Fixed transform from the previous joint frame to this joint's frame.
    pub origin: RigidTransform,
    /// Unit rotation axis expressed in this joint's frame.
    pub axis: Vec3,
    pub lo: f64,
    pub hi: f64,
    /// rad/s
    pub max_speed: f64,
}

impl Joint {
    fn revolute(origin: Vec3, axis: Vec3) -> Self {
        let lim = 170f64.to_radians();
        Self {
            origin: RigidTransform::from_translation(origin),
            axis,
            lo: -lim,
            hi: lim,
            max_speed: 60f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmModel {
    pub name: String,
    pub joints: [Joint; DOF],
    /// Flange-to-tool transform.
    pub tool: RigidTransform,
    pub max_reach: f64,
    pub min_reach: f64,
    /// Metadata only; no dynamics are modeled.
    pub payload_kg: f64,
    pub home: JointVector,
}

impl ArmModel {
    pub fn new(
        name: impl Into<String>,
        joints: [Joint; DOF],
        tool: RigidTransform,
        max_reach: f64,
        min_reach: f64,
        payload_kg: f64,
        home: JointVector,
    ) -> Result<Self, ArmError> {
        let model = Self {
            name: name.into(),
            joints,
            tool,
            max_reach,
            min_reach,
            payload_kg,
            home,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ArmError> {
        let bad = |m: String| Err(ArmError::InvalidModel(m));
        for (i, j) in self.joints.iter().enumerate() {
            if !(j.lo < j.hi) {
                return bad(format!("joint {i}: lower limit must be below upper limit"));
            }
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return bad(format!("joint {i}: axis must be a unit vector"));
            }
            if !(j.max_speed > 0.0) {
                return bad(format!("joint {i}: max speed must be positive"));
            }
            if !j.origin.is_finite() {
                return bad(format!("joint {i}: non-finite origin"));
            }
        }
        if !(self.max_reach > 0.0) {
            return bad("max_reach must be positive".into());
        }
        if !(self.min_reach >= 0.0 && self.min_reach < self.max_reach) {
            return bad("min_reach must lie in [0, max_reach)".into());
        }
        if !self.tool.is_finite() {
            return bad("non-finite tool transform".into());
        }
        self.check_limits(&self.home)
            .map_err(|e| ArmError::InvalidModel(format!("home pose: {e}")))
    }

    /// Anthropomorphic default: 0.135 m riser, 0.400 m upper arm, 0.350 m
    /// forearm, 0.150 m wrist stack. Fully stretched horizontally the flange
    /// sits 0.900 m from the base axis. All joints ±170°, 60°/s.
    pub fn default_6r() -> Self {
        let z = Vec3::z();
        let y = Vec3::y();
        let joints = [
            Joint::revolute(Vec3::zeros(), z),
            Joint::revolute(Vec3::new(0.0, 0.0, 0.135), y),
            Joint::revolute(Vec3::new(0.0, 0.0, 0.400), y),
            Joint::revolute(Vec3::new(0.0, 0.0, 0.350), z),
            Joint::revolute(Vec3::zeros(), y),
            Joint::revolute(Vec3::new(0.0, 0.0, 0.150), z),
        ];
        Self::new(
            "default-6r",
            joints,
            RigidTransform::identity(),
            0.900,
            0.150,
            6.0,
            JointVector::zeros(),
        )
        .expect("default model is valid")
    }

    pub fn max_speeds(&self) -> [f64; DOF] {
        std::array::from_fn(|i| self.joints[i].max_speed)
    }

    /// Duration of a straight joint-space move at `speed` (fraction of each
    /// joint's maximum). Joints run at constant velocity, so the slowest one
    /// sets the time.
    pub fn move_time(&self, from: &JointVector, to: &JointVector, speed: f64) -> f64 {
        (0..DOF)
            .map(|i| (to[i] - from[i]).abs() / (speed * self.joints[i].max_speed))
            .fold(0.0, f64::max)
    }

    /// Origin of joint 2 in the base frame (joint 1 rotates about it).
    pub fn shoulder(&self) -> Vec3 {
        self.joints[0].origin.compose(&self.joints[1].origin).translation
    }

    pub fn check_limits(&self, q: &JointVector) -> Result<(), ArmError> {
        for (i, j) in self.joints.iter().enumerate() {
            let v = q[i];
            if !v.is_finite() {
                return Err(ArmError::NonFinite);
            }
            if v < j.lo || v > j.hi {
                return Err(ArmError::JointLimit {
                    joint: i,
                    value: v,
                    lo: j.lo,
                    hi: j.hi,
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, q: &JointVector) -> JointVector {
        JointVector(std::array::from_fn(|i| {
            q[i].clamp(self.joints[i].lo, self.joints[i].hi)
        }))
    }

    /// Tool pose for `q`, composing joint 1 through 6 and the tool transform.
    pub fn fk(&self, q: &JointVector) -> Result<ToolPose, ArmError> {
        self.check_limits(q)?;
        Ok(ToolPose(self.fk_unchecked(q)))
    }

    fn fk_unchecked(&self, q: &JointVector) -> RigidTransform {
        let mut frame = RigidTransform::identity();
        for (i, j) in self.joints.iter().enumerate() {
            frame = frame
                .compose(&j.origin)
                .compose(&RigidTransform::from_rotation(Rotation::from_axis_angle(&j.axis, q[i])));
        }
        frame.compose(&self.tool)
    }

    /// Geometric Jacobian at `q`: rows 0..3 map joint rates to tool linear
    /// velocity, rows 3..6 to angular velocity, both in the base frame.
    pub fn jacobian(&self, q: &JointVector) -> Matrix6<f64> {
        let mut frame = RigidTransform::identity();
        let mut axes = [Vec3::zeros(); DOF];
        let mut origins = [Vec3::zeros(); DOF];
        for (i, j) in self.joints.iter().enumerate() {
            frame = frame.compose(&j.origin);
            axes[i] = frame.apply_vector(&j.axis);
            origins[i] = frame.translation;
            frame = frame.compose(&RigidTransform::from_rotation(Rotation::from_axis_angle(&j.axis, q[i])));
        }
        let tip = frame.compose(&self.tool).translation;
        let mut jac = Matrix6::zeros();
        for i in 0..DOF {
            let lin = axes[i].cross(&(tip - origins[i]));
            jac.fixed_view_mut::<3, 1>(0, i).copy_from(&lin);
            jac.fixed_view_mut::<3, 1>(3, i).copy_from(&axes[i]);
        }
        jac
    }

    /// Cheap pre-filter: false when `p` (base frame) is outside the
    /// [min_reach, max_reach] shell around the base origin.
    pub fn reachable(&self, p: &Vec3) -> bool {
        let d = p.norm();
        d <= self.max_reach && d >= self.min_reach
    }

    /// Inverse kinematics with the default solver settings.
    pub fn ik(&self, target: &ToolPose, seed: &JointVector, rng_seed: u64) -> Result<JointVector, ArmError> {
        IkSolver::default().solve(self, target, seed, rng_seed)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ArmError> {
        let file: ArmFile = toml::from_str(text).map_err(|e| ArmError::Parse(e.to_string()))?;
        check_version(file.version, "arm file").map_err(ArmError::Parse)?;
        let joints: Vec<Joint> = file
            .joints
            .iter()
            .map(|j| Joint {
                origin: j.origin.to_transform(),
                axis: vec3(j.axis).normalize(),
                lo: j.limits_deg[0].to_radians(),
                hi: j.limits_deg[1].to_radians(),
                max_speed: j.max_speed_deg_s.to_radians(),
            })
            .collect();
        let joints: [Joint; DOF] = joints
            .try_into()
            .map_err(|v: Vec<Joint>| ArmError::InvalidModel(format!("expected 6 joints, found {}", v.len())))?;
        Self::new(
            file.name,
            joints,
            file.tool.to_transform(),
            file.max_reach,
            file.min_reach,
            file.payload_kg,
            JointVector::from_degrees(file.home_deg),
        )
    }

    pub fn to_toml_string(&self) -> String {
        let file = ArmFile {
            version: 1,
            name: self.name.clone(),
            max_reach: self.max_reach,
            min_reach: self.min_reach,
            payload_kg: self.payload_kg,
            home_deg: self.home.to_degrees(),
            tool: PoseSpec::from_transform(&self.tool),
            joints: self
                .joints
                .iter()
                .map(|j| JointSpec {
                    origin: PoseSpec::from_transform(&j.origin),
                    axis: j.axis.into(),
                    limits_deg: [j.lo.to_degrees(), j.hi.to_degrees()],
                    max_speed_deg_s: j.max_speed.to_degrees(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("arm file serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct ArmFile {
    version: u32,
    name: String,
    max_reach: f64,
    #[serde(default)]
    min_reach: f64,
    #[serde(default)]
    payload_kg: f64,
    #[serde(default)]
    home_deg: [f64; DOF],
    #[serde(default)]
    tool: PoseSpec,
    joints: Vec<JointSpec>,
}

#[derive(Serialize, Deserialize)]
struct JointSpec {
    #[serde(flatten)]
    origin: PoseSpec,
    axis: [f64; 3],
    limits_deg: [f64; 2],
    max_speed_deg_s: f64,
}

/// Position and orientation error of `pose` against `target`.
pub fn pose_error(pose: &RigidTransform, target: &RigidTransform) -> (Vec3, Vec3) {
    let dp = target.translation - pose.translation;
    let dr = target.rotation.compose(&pose.rotation.inverse()).scaled_axis();
    (dp, dr)
}

/// Damped least squares IK settings.
#[derive(Clone, Debug, PartialEq)]
pub struct IkSolver {
    pub damping: f64,
    pub max_iterations: usize,
    pub restarts: usize,
    /// Largest per-joint change per iteration (rad); steps are scaled down
    /// uniformly to respect it.
    pub max_step: f64,
    /// Residual norm below which damping shrinks proportionally.
    pub damping_taper: f64,
    /// Success thresholds.
    pub pos_tol: f64,
    pub ang_tol: f64,
    /// Iteration stops early once errors drop below these.
    pub polish_pos_tol: f64,
    pub polish_ang_tol: f64,
}

impl Default for IkSolver {
    fn default() -> Self {
        Self {
            damping: 0.05,
            max_iterations: 200,
            restarts: 10,
            max_step: 0.2,
            damping_taper: 0.01,
            pos_tol: 1e-4,
            ang_tol: 1e-3,
            polish_pos_tol: 1e-10,
            polish_ang_tol: 1e-10,
        }
    }
}

impl IkSolver {
    /// Runs from `seed`, then from up to `restarts` random in-limit seeds
    /// drawn from a ChaCha stream keyed by `rng_seed`.
    pub fn solve(
        &self,
        arm: &ArmModel,
        target: &ToolPose,
        seed: &JointVector,
        rng_seed: u64,
    ) -> Result<JointVector, ArmError> {
        if !target.0.is_finite() || !seed.is_finite() {
            return Err(ArmError::NonFinite);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut best = (f64::INFINITY, f64::INFINITY);
        let mut start = arm.clamp(seed);
        for attempt in 0..=self.restarts {
            if attempt > 0 {
                start = JointVector(std::array::from_fn(|i| {
                    rng.random_range(arm.joints[i].lo..arm.joints[i].hi)
                }));
            }
            let (q, pe, ae) = self.descend(arm, &target.0, start);
            if pe <= self.pos_tol && ae <= self.ang_tol {
                return Ok(q);
            }
            if pe + ae < best.0 + best.1 {
                best = (pe, ae);
            }
        }
        Err(ArmError::NoConvergence {
            pos_err: best.0,
            ang_err: best.1,
        })
    }

    fn descend(&self, arm: &ArmModel, target: &RigidTransform, mut q: JointVector) -> (JointVector, f64, f64) {
        let lambda2 = self.damping * self.damping;
        let mut wraps = [0usize; DOF];
        for _ in 0..self.max_iterations {
            let (dp, dr) = pose_error(&arm.fk_unchecked(&q), target);
            if dp.norm() <= self.polish_pos_tol && dr.norm() <= self.polish_ang_tol {
                return (q, dp.norm(), dr.norm());
            }
            let e = Vector6::new(dp.x, dp.y, dp.z, dr.x, dr.y, dr.z);
            // Full damping far from the goal; tapered with the residual once
            // within `damping_taper`, so near-singular targets still converge.
            let lambda2 = lambda2 * (e.norm() / self.damping_taper).min(1.0).powi(2);
            let mut jac = arm.jacobian(&q);
            let Some(mut dq) = dls_step(&jac, &e, lambda2) else {
                break;
            };
            // A joint pinned at a limit and pushed further out either wraps to
            // the opposite limit (near-full-circle joints, same direction of
            // travel modulo 2pi) or is dropped from the Jacobian so the
            // remaining joints take over.
            let mut masked = false;
            let mut wrapped = false;
            for i in 0..DOF {
                let j = &arm.joints[i];
                let low = q[i] <= j.lo && dq[i] < 0.0;
                let high = q[i] >= j.hi && dq[i] > 0.0;
                if !(low || high) {
                    continue;
                }
                if j.hi - j.lo >= WRAP_RANGE && wraps[i] < MAX_WRAPS {
                    q[i] = if low { j.hi } else { j.lo };
                    wraps[i] += 1;
                    wrapped = true;
                } else {
                    jac.column_mut(i).fill(0.0);
                    masked = true;
                }
            }
            if wrapped {
                continue;
            }
            if masked {
                let Some(step) = dls_step(&jac, &e, lambda2) else { break };
                dq = step;
            }
            let biggest = dq.amax();
            if biggest > self.max_step {
                dq *= self.max_step / biggest;
            }
            let next = JointVector(std::array::from_fn(|i| q[i] + dq[i]));
            q = arm.clamp(&next);
        }
        let (dp, dr) = pose_error(&arm.fk_unchecked(&q), target);
        (q, dp.norm(), dr.norm())
    }
}

/// Joints whose travel covers at least this much of the circle may wrap.
const WRAP_RANGE: f64 = 2.0 * std::f64::consts::PI - 0.7;
const MAX_WRAPS: usize = 2;

fn dls_step(jac: &Matrix6<f64>, e: &Vector6<f64>, lambda2: f64) -> Option<Vector6<f64>> {
    let jjt = jac * jac.transpose() + Matrix6::identity() * lambda2;
    Some(jac.transpose() * jjt.cholesky()?.solve(e))
}
