//! Station selection, aim solving, task ordering and cycle-time estimation.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arm::{ArmModel, IkSolver, JointVector, ToolPose};
use crate::exec::{self, Execution};
use crate::geom::{Ray, RigidTransform, Vec3};
use crate::optics::{project_mark, verify_mark, LaserRig, ProjectedMark};
use crate::workcell::{TargetMark, Workcell};

/// Closest allowed beam working distance, meters.
pub const MIN_WORKING_DISTANCE: f64 = 0.5;
/// Radius of the sampled emitter shell around the shoulder, meters.
pub const SHELL_RADIUS: f64 = 0.55;
pub const SHELL_SAMPLES: usize = 128;
/// Emitter positions must stay this far above the base plane.
pub const MIN_EMITTER_HEIGHT: f64 = 0.1;
/// Beams hitting the surface more obliquely than this are not usable.
pub const MIN_INCIDENCE_COS: f64 = 0.1;
/// Weight of incidence against radial alignment when ranking standoffs.
pub const INCIDENCE_WEIGHT: f64 = 2.0;
/// Sight-clear standoff points tried per target.
pub const STANDOFFS: usize = 4;
/// IK seeds per goal pose (the first is a heading-aligned home pose).
pub const IK_SEEDS: usize = 5;
pub const DEFAULT_DWELL_S: f64 = 30.0;
pub const DEFAULT_BASE_MOVE_S: f64 = 120.0;
pub const DEFAULT_SEED: u64 = 1;
/// Speed fraction used for every planned move.
pub const MOVE_SPEED: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("no aim solution for target '{target}' from station {station}")]
    NoSolution { target: String, station: usize },
    #[error("workcell has no candidate stations")]
    NoCandidates,
    #[error("unknown station {0}")]
    UnknownStation(usize),
    #[error("invalid plan: {0}")]
    Invalid(String),
    #[error("parse error: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    /// Index into the workcell's candidate stations.
    pub id: usize,
    pub base_pose: RigidTransform,
    pub assigned_targets: Vec<String>,
    pub localization_set: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AimSolution {
    pub target: String,
    pub station: usize,
    /// Rig device that draws this mark.
    pub device: usize,
    pub q: JointVector,
    pub predicted: ProjectedMark,
    pub pos_err: f64,
    pub ang_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub version: u32,
    pub workcell: String,
    pub workcell_digest: String,
    pub seed: u64,
    pub dwell_s: f64,
    pub base_move_s: f64,
    pub stations: Vec<Station>,
    /// In execution order: grouped by station, stations in `stations` order.
    pub solutions: Vec<AimSolution>,
    pub uncovered: Vec<String>,
    pub estimated_cycle_s: f64,
}

impl Plan {
    pub fn station(&self, id: usize) -> Option<&Station> {
        self.stations.iter().find(|s| s.id == id)
    }

    /// Position of a task's station within `stations`.
    pub fn station_index_of(&self, task: usize) -> Option<usize> {
        let id = self.solutions.get(task)?.station;
        self.stations.iter().position(|s| s.id == id)
    }

    /// Index of the first task at the station of `task`.
    pub fn station_start(&self, task: usize) -> usize {
        let Some(sol) = self.solutions.get(task) else {
            return task;
        };
        let mut i = task;
        while i > 0 && self.solutions[i - 1].station == sol.station {
            i -= 1;
        }
        i
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, PlanError> {
        let plan: Plan = serde_json::from_str(text).map_err(|e| PlanError::Parse(e.to_string()))?;
        crate::format::check_version(plan.version, "plan").map_err(PlanError::Parse)?;
        Ok(plan)
    }

    /// Structural checks against the workcell the plan was made for.
    pub fn check(&self, cell: &Workcell) -> Result<(), PlanError> {
        let bad = |m: String| Err(PlanError::Invalid(m));
        let mut seen = BTreeMap::new();
        for s in &self.solutions {
            if cell.target(&s.target).is_none() {
                return bad(format!("solution for unknown target '{}'", s.target));
            }
            if self.station(s.station).is_none() {
                return bad(format!("target '{}' uses unlisted station {}", s.target, s.station));
            }
            if seen.insert(s.target.as_str(), ()).is_some() {
                return bad(format!("target '{}' solved twice", s.target));
            }
        }
        for u in &self.uncovered {
            if seen.insert(u.as_str(), ()).is_some() {
                return bad(format!("target '{u}' is both covered and uncovered"));
            }
        }
        if seen.len() != cell.targets.len() || cell.targets.iter().any(|t| !seen.contains_key(t.id.as_str())) {
            return bad("covered and uncovered targets do not partition the workcell targets".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanConfig {
    pub seed: u64,
    pub dwell_s: f64,
    pub base_move_s: f64,
    pub execution: Execution,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            dwell_s: DEFAULT_DWELL_S,
            base_move_s: DEFAULT_BASE_MOVE_S,
            execution: Execution::default(),
        }
    }
}

/// Fibonacci-sphere directions, deterministic.
fn shell_directions() -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..SHELL_SAMPLES)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / SHELL_SAMPLES as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vec3::new(r * a.cos(), r * a.sin(), z)
        })
        .collect()
}

/// Whether a beam from `from` lands on `target` first, within working
/// distance and not too obliquely.
/// Cosine of the beam's incidence on the target when the line of sight
/// from `from` is clear, in range and not too grazing.
fn sight_clear(cell: &Workcell, from: &Vec3, target: &TargetMark, max_range: f64) -> Option<f64> {
    let d = (target.point - from).norm();
    if !(MIN_WORKING_DISTANCE..=max_range).contains(&d) {
        return None;
    }
    let ray = Ray::new(*from, target.point - from).ok()?;
    let hit = cell.mesh.ray_hit(&ray)?;
    if (hit.point - target.point).norm() > target.tolerance_pos {
        return None;
    }
    let n = cell.mesh.normal(hit.triangle).expect("hit triangle exists");
    let cos = -ray.direction.dot(&n);
    (cos > MIN_INCIDENCE_COS).then_some(cos)
}

/// Sight-clear emitter positions (workcell frame) on the shell around the
/// shoulder, best first: steep incidence keeps the mark insensitive to small
/// pose errors, radial alignment keeps the wrist comfortable.
fn standoff_points(
    cell: &Workcell,
    station: &RigidTransform,
    target: &TargetMark,
    arm: &ArmModel,
    rig: &LaserRig,
) -> Vec<Vec3> {
    let shoulder = arm.shoulder();
    let mut out: Vec<(f64, Vec3)> = shell_directions()
        .into_iter()
        .filter_map(|u| {
            let local = shoulder + u * SHELL_RADIUS;
            if local.z < MIN_EMITTER_HEIGHT {
                return None;
            }
            let p = station.apply(&local);
            let incidence = sight_clear(cell, &p, target, rig.max_range())?;
            let axis = (target.point - p).normalize();
            let radial = station.apply_vector(&u).dot(&axis);
            Some((-(radial + INCIDENCE_WEIGHT * incidence), p))
        })
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out.into_iter().map(|x| x.1).collect()
}

/// Reach-and-sight pre-filter for a target from a station pose.
pub fn coverage_filter(
    cell: &Workcell,
    station: &RigidTransform,
    target: &TargetMark,
    arm: &ArmModel,
    rig: &LaserRig,
) -> bool {
    let local = station.invert().apply(&target.point);
    if local.norm() > arm.max_reach + rig.max_range() {
        return false;
    }
    if (local - arm.shoulder()).norm() < MIN_WORKING_DISTANCE - SHELL_RADIUS {
        return false;
    }
    !standoff_points(cell, station, target, arm, rig).is_empty()
}

/// Per-(target, station) seed stream.
fn task_seed(seed: u64, target: usize, station: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((target as u64) << 32) | station as u64);
    rng.next_u64()
}

/// Finds joint values that put the device's mark on `target` from candidate
/// station `station`, within the target's tolerances.
///
/// Tries up to [`STANDOFFS`] emitter positions, both fan orientations at
/// each, and [`IK_SEEDS`] seeds per goal pose; each candidate is checked by
/// re-projecting the beam onto the mesh.
pub fn solve_aim(
    cell: &Workcell,
    station: usize,
    target: &TargetMark,
    arm: &ArmModel,
    rig: &LaserRig,
    device: usize,
    seed: u64,
) -> Result<AimSolution, PlanError> {
    let pose = *cell
        .candidate_stations
        .get(station)
        .ok_or(PlanError::UnknownStation(station))?;
    solve_aim_at(cell, station, &pose, target, arm, rig, device, seed)
}

/// [`solve_aim`] from an explicit base pose, e.g. a localized one that
/// differs from the planned station pose.
#[allow(clippy::too_many_arguments)]
pub fn solve_aim_at(
    cell: &Workcell,
    station: usize,
    pose: &RigidTransform,
    target: &TargetMark,
    arm: &ArmModel,
    rig: &LaserRig,
    device: usize,
    seed: u64,
) -> Result<AimSolution, PlanError> {
    let pose = *pose;
    let dev = rig
        .device(device)
        .ok_or_else(|| PlanError::Invalid(format!("rig has no device {device}")))?;
    let no_solution = || PlanError::NoSolution {
        target: target.id.clone(),
        station,
    };
    let to_base = pose.invert();
    let local = to_base.apply(&target.point);
    let mut start = arm.home;
    start[0] = local.y.atan2(local.x).clamp(arm.joints[0].lo, arm.joints[0].hi);
    let solver = IkSolver {
        restarts: IK_SEEDS - 1,
        ..IkSolver::default()
    };
    for (k, p) in standoff_points(cell, &pose, target, arm, rig)
        .iter()
        .take(STANDOFFS)
        .enumerate()
    {
        let axis = target.point - p;
        for (f, line) in [target.direction, -target.direction].iter().enumerate() {
            let Some(goal) = dev.tool_pose_for(p, &axis, line) else {
                continue;
            };
            let goal = ToolPose(to_base.compose(&goal.0));
            let Ok(q) = solver.solve(arm, &goal, &start, seed.wrapping_add((2 * k + f) as u64)) else {
                continue;
            };
            let Ok(tool) = arm.fk(&q) else { continue };
            let Ok(mark) = project_mark(&ToolPose(pose.compose(&tool.0)), dev, &cell.mesh) else {
                continue;
            };
            let check = verify_mark(&mark, target);
            if check.pass {
                return Ok(AimSolution {
                    target: target.id.clone(),
                    station,
                    device,
                    q,
                    predicted: mark,
                    pos_err: check.pos_err,
                    ang_err: check.ang_err,
                });
            }
        }
    }
    Err(no_solution())
}

/// Result of greedy station selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Cover {
    /// Candidate indices in selection order.
    pub chosen: Vec<usize>,
    /// Per target, the first chosen candidate covering it.
    pub assignment: Vec<Option<usize>>,
    pub uncovered: Vec<usize>,
}

/// Unweighted greedy set cover over `covers[candidate][target]`: repeatedly
/// takes the candidate adding the most uncovered targets, lower index on
/// ties, until no candidate adds anything.
pub fn greedy_cover(covers: &[Vec<bool>], n_targets: usize) -> Cover {
    let mut assignment = vec![None; n_targets];
    let mut chosen = Vec::new();
    loop {
        let mut best = (0, 0);
        for (s, row) in covers.iter().enumerate() {
            let gain = (0..n_targets).filter(|&t| row[t] && assignment[t].is_none()).count();
            if gain > best.1 {
                best = (s, gain);
            }
        }
        if best.1 == 0 {
            break;
        }
        for t in 0..n_targets {
            if covers[best.0][t] && assignment[t].is_none() {
                assignment[t] = Some(best.0);
            }
        }
        chosen.push(best.0);
    }
    let uncovered = (0..n_targets).filter(|&t| assignment[t].is_none()).collect();
    Cover {
        chosen,
        assignment,
        uncovered,
    }
}

/// Candidate × target coverage matrix.
pub fn coverage_matrix(cell: &Workcell, arm: &ArmModel, rig: &LaserRig, execution: Execution) -> Vec<Vec<bool>> {
    let nt = cell.targets.len();
    let flat = exec::map_range(execution, cell.candidate_stations.len() * nt, |k| {
        coverage_filter(cell, &cell.candidate_stations[k / nt], &cell.targets[k % nt], arm, rig)
    });
    flat.chunks(nt.max(1)).map(<[bool]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub chosen: Vec<usize>,
    pub assignment: BTreeMap<String, usize>,
    pub uncovered: Vec<String>,
    pub coverage: Vec<Vec<bool>>,
}

pub fn assign_stations(
    cell: &Workcell,
    arm: &ArmModel,
    rig: &LaserRig,
    execution: Execution,
) -> Result<Assignment, PlanError> {
    if cell.candidate_stations.is_empty() {
        return Err(PlanError::NoCandidates);
    }
    let coverage = coverage_matrix(cell, arm, rig, execution);
    let cover = greedy_cover(&coverage, cell.targets.len());
    Ok(Assignment {
        chosen: cover.chosen,
        assignment: cell
            .targets
            .iter()
            .zip(&cover.assignment)
            .filter_map(|(t, a)| a.map(|s| (t.id.clone(), s)))
            .collect(),
        uncovered: cover.uncovered.iter().map(|&t| cell.targets[t].id.clone()).collect(),
        coverage,
    })
}

/// Fixture set whose centroid is nearest to the station.
fn localization_set(cell: &Workcell, pose: &RigidTransform) -> String {
    cell.fixture_sets()
        .into_iter()
        .map(|set| {
            let pts: Vec<Vec3> = cell.fixtures_in(&set).map(|f| f.point).collect();
            let c = pts.iter().sum::<Vec3>() / pts.len() as f64;
            ((c - pose.translation).xy().norm(), set)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|x| x.1)
        .unwrap_or_default()
}

fn first_aim(
    cell: &Workcell,
    station: usize,
    t: usize,
    arm: &ArmModel,
    rig: &LaserRig,
    seed: u64,
) -> Option<AimSolution> {
    (0..rig.devices().len()).find_map(|d| {
        solve_aim(
            cell,
            station,
            &cell.targets[t],
            arm,
            rig,
            d,
            task_seed(seed, t, station),
        )
        .ok()
    })
}

/// Full planning pass: cover, aim, order, estimate.
pub fn plan(cell: &Workcell, arm: &ArmModel, rig: &LaserRig, cfg: &PlanConfig) -> Result<Plan, PlanError> {
    let a = assign_stations(cell, arm, rig, cfg.execution)?;
    let mut chosen = a.chosen.clone();
    let nt = cell.targets.len();
    // Chosen covering stations first, in selection order.
    let mut solved: Vec<Option<AimSolution>> = exec::map_range(cfg.execution, nt, |t| {
        chosen
            .iter()
            .filter(|&&s| a.coverage[s][t])
            .find_map(|&s| first_aim(cell, s, t, arm, rig, cfg.seed))
    });
    // Filter passes are necessary, not sufficient: fall back to any other
    // covering candidate, adding it to the chosen set.
    for (t, slot) in solved.iter_mut().enumerate() {
        if slot.is_some() {
            continue;
        }
        for s in 0..cell.candidate_stations.len() {
            if chosen.contains(&s) || !a.coverage[s][t] {
                continue;
            }
            if let Some(sol) = first_aim(cell, s, t, arm, rig, cfg.seed) {
                chosen.push(s);
                *slot = Some(sol);
                break;
            }
        }
        if slot.is_none() {
            log::warn!("target {} left uncovered", cell.targets[t].id);
        }
    }
    let uncovered = cell
        .targets
        .iter()
        .zip(&solved)
        .filter(|(_, s)| s.is_none())
        .map(|(t, _)| t.id.clone())
        .collect();
    let solutions: Vec<AimSolution> = solved.into_iter().flatten().collect();
    let stations = chosen
        .iter()
        .filter(|&&s| solutions.iter().any(|x| x.station == s))
        .map(|&s| {
            let pose = cell.candidate_stations[s];
            Station {
                id: s,
                base_pose: pose,
                assigned_targets: solutions
                    .iter()
                    .filter(|x| x.station == s)
                    .map(|x| x.target.clone())
                    .collect(),
                localization_set: localization_set(cell, &pose),
            }
        })
        .collect();
    let mut p = Plan {
        version: 1,
        workcell: cell.name.clone(),
        workcell_digest: cell.digest(),
        seed: cfg.seed,
        dwell_s: cfg.dwell_s,
        base_move_s: cfg.base_move_s,
        stations,
        solutions,
        uncovered,
        estimated_cycle_s: 0.0,
    };
    p = order_tasks(&p, cell);
    p.estimated_cycle_s = estimate_cycle(&p, arm, cfg.dwell_s, cfg.base_move_s);
    Ok(p)
}

/// Groups solutions by station (in station order) and chains each group by
/// nearest neighbour, starting from the target nearest the station.
pub fn order_tasks(plan: &Plan, cell: &Workcell) -> Plan {
    let mut out = plan.clone();
    out.solutions.clear();
    for st in &mut out.stations {
        let mut group: Vec<&AimSolution> = plan.solutions.iter().filter(|s| s.station == st.id).collect();
        let point = |s: &AimSolution| cell.target(&s.target).map(|t| t.point).unwrap_or(s.predicted.point);
        let mut at = st.base_pose.translation;
        let mut ordered = Vec::with_capacity(group.len());
        while !group.is_empty() {
            let (k, _) = group
                .iter()
                .enumerate()
                .map(|(k, s)| (k, (point(s) - at).norm()))
                .fold((0, f64::INFINITY), |best, x| if x.1 < best.1 { x } else { best });
            let next = group.remove(k);
            at = point(next);
            ordered.push(next.clone());
        }
        st.assigned_targets = ordered.iter().map(|s| s.target.clone()).collect();
        out.solutions.extend(ordered);
    }
    out
}

/// Joint-move time from home through every solution in order, plus dwell per
/// target and a base move per station change.
pub fn estimate_cycle(plan: &Plan, arm: &ArmModel, dwell_s: f64, base_move_s: f64) -> f64 {
    if plan.solutions.is_empty() {
        return 0.0;
    }
    let mut prev = arm.home;
    let mut moves = 0.0;
    for s in &plan.solutions {
        moves += arm.move_time(&prev, &s.q, MOVE_SPEED);
        prev = s.q;
    }
    moves + dwell_s * plan.solutions.len() as f64 + base_move_s * plan.stations.len().saturating_sub(1) as f64
}
