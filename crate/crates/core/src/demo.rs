//! Synthetic desk-scale scenario: a curved-top bedframe with 17 inner and
//! 36 outer tray targets, two fixture sets, the default arm, a cross-line
//! laser rig with boresight offsets, and calibration shots for each device.

use std::path::{Path, PathBuf};

use crate::arm::{ArmModel, ToolPose};
use crate::geom::{Ray, RigidTransform, Rotation, Vec3};
use crate::optics::{calibrate_offset, simulate_observations, BeamOffset, LaserRig, ObservationSet};
use crate::workcell::{Fixture, StationSource, TargetGroup, TargetMark, TriMesh, Workcell};

pub const HALF_X: f64 = 2.0;
pub const HALF_Y: f64 = 1.5;
pub const WALL_HEIGHT: f64 = 0.8;
/// Crown of the top surface above the wall height at x = 0.
pub const CROWN: f64 = 0.2;
pub const SEGMENTS_X: usize = 16;
pub const SEGMENTS_Y: usize = 6;
/// Base platform height of the mobile robot.
pub const STATION_HEIGHT: f64 = 1.4;
/// True boresight offsets of the two rig devices, degrees (pitch, yaw).
pub const TRUE_OFFSETS_DEG: [(f64, f64); 2] = [(0.8, -0.3), (-0.5, 0.4)];
pub const CALIBRATION_WALL_X: f64 = 4.0;

pub const MESH_FILE: &str = "bedframe.mesh";
pub const WORKCELL_FILE: &str = "workcell.toml";
pub const ARM_FILE: &str = "arm.toml";
pub const RIG_FILE: &str = "rig.toml";
/// Rig with the true boresight offsets, for simulation only.
pub const TRUE_RIG_FILE: &str = "rig-true.toml";
pub const CALIBRATION_MESH_FILE: &str = "calibration-wall.mesh";

pub fn calibration_file(device: usize) -> String {
    format!("calibration-{device}.toml")
}

fn top_z(x: f64) -> f64 {
    WALL_HEIGHT + CROWN * (std::f64::consts::PI * x / (2.0 * HALF_X)).cos()
}

/// Open-bottom box with a cosine-crowned top, outward normals.
pub fn bedframe_mesh() -> TriMesh {
    let mut v = Vec::new();
    let mut t = Vec::new();
    let xs: Vec<f64> = (0..=SEGMENTS_X)
        .map(|i| -HALF_X + 2.0 * HALF_X * i as f64 / SEGMENTS_X as f64)
        .collect();
    let ys: Vec<f64> = (0..=SEGMENTS_Y)
        .map(|j| -HALF_Y + 2.0 * HALF_Y * j as f64 / SEGMENTS_Y as f64)
        .collect();
    // Counter-clockwise quad (seen from outside) as two triangles.
    let mut quad = |v: &mut Vec<Vec3>, corners: [Vec3; 4]| {
        let b = v.len();
        v.extend(corners);
        t.push([b, b + 1, b + 2]);
        t.push([b, b + 2, b + 3]);
    };
    for i in 0..SEGMENTS_X {
        let (x0, x1) = (xs[i], xs[i + 1]);
        for j in 0..SEGMENTS_Y {
            let (y0, y1) = (ys[j], ys[j + 1]);
            quad(
                &mut v,
                [
                    Vec3::new(x0, y0, top_z(x0)),
                    Vec3::new(x1, y0, top_z(x1)),
                    Vec3::new(x1, y1, top_z(x1)),
                    Vec3::new(x0, y1, top_z(x0)),
                ],
            );
        }
        // y = -HALF_Y faces -y, y = +HALF_Y faces +y.
        quad(
            &mut v,
            [
                Vec3::new(x0, -HALF_Y, 0.0),
                Vec3::new(x1, -HALF_Y, 0.0),
                Vec3::new(x1, -HALF_Y, top_z(x1)),
                Vec3::new(x0, -HALF_Y, top_z(x0)),
            ],
        );
        quad(
            &mut v,
            [
                Vec3::new(x1, HALF_Y, 0.0),
                Vec3::new(x0, HALF_Y, 0.0),
                Vec3::new(x0, HALF_Y, top_z(x0)),
                Vec3::new(x1, HALF_Y, top_z(x1)),
            ],
        );
    }
    for j in 0..SEGMENTS_Y {
        let (y0, y1) = (ys[j], ys[j + 1]);
        quad(
            &mut v,
            [
                Vec3::new(HALF_X, y0, 0.0),
                Vec3::new(HALF_X, y1, 0.0),
                Vec3::new(HALF_X, y1, WALL_HEIGHT),
                Vec3::new(HALF_X, y0, WALL_HEIGHT),
            ],
        );
        quad(
            &mut v,
            [
                Vec3::new(-HALF_X, y1, 0.0),
                Vec3::new(-HALF_X, y0, 0.0),
                Vec3::new(-HALF_X, y0, WALL_HEIGHT),
                Vec3::new(-HALF_X, y1, WALL_HEIGHT),
            ],
        );
    }
    TriMesh::new(v, t).expect("bedframe mesh is valid")
}

fn mark(id: String, group: TargetGroup, point: Vec3, direction: Vec3) -> TargetMark {
    TargetMark {
        id,
        group,
        point,
        direction,
        tolerance_pos: crate::workcell::DEFAULT_TOLERANCE_POS,
        tolerance_ang_deg: crate::workcell::DEFAULT_TOLERANCE_ANG_DEG,
    }
}

/// 17 targets on the top surface (placed by a vertical cast, directions
/// projected into the hit facet) and 36 on the walls.
pub fn targets(mesh: &TriMesh) -> Vec<TargetMark> {
    let mut out = Vec::new();
    let mut top: Vec<(f64, f64)> = Vec::new();
    for y in [-0.9, 0.1, 0.9] {
        for x in [-1.6, -0.85, -0.1, 0.65, 1.4] {
            top.push((x, y));
        }
    }
    top.push((-0.4, 0.45));
    top.push((0.4, -0.45));
    for (k, (x, y)) in top.into_iter().enumerate() {
        let ray = Ray::new(Vec3::new(x, y, 5.0), -Vec3::z()).expect("unit");
        let hit = mesh.ray_hit(&ray).expect("top surface below");
        let n = mesh.normal(hit.triangle).expect("triangle");
        let d = if k % 2 == 0 {
            Vec3::x()
        } else {
            Vec3::new(1.0, 1.0, 0.0)
        };
        let d = (d - n * d.dot(&n)).normalize();
        out.push(mark(format!("I{:02}", k + 1), TargetGroup::Inner, hit.point, d));
    }
    let mut k = 0;
    let mut outer = |p: Vec3, d: Vec3| {
        k += 1;
        out.push(mark(format!("O{k:02}"), TargetGroup::Outer, p, d));
    };
    for y in [-HALF_Y, HALF_Y] {
        for z in [0.25, 0.55] {
            for x in [-1.65, -1.05, -0.45, 0.15, 0.75, 1.35] {
                outer(Vec3::new(x, y, z), if z < 0.5 { Vec3::x() } else { Vec3::z() });
            }
        }
    }
    for x in [-HALF_X, HALF_X] {
        for z in [0.25, 0.55] {
            for y in [-1.1, -0.1, 0.9] {
                outer(Vec3::new(x, y, z), if z < 0.5 { Vec3::y() } else { Vec3::z() });
            }
        }
    }
    out
}

pub fn fixtures() -> Vec<Fixture> {
    let mut out = Vec::new();
    // Six reference points per side, wrapping round the corners and onto
    // the top so that no set is coplanar.
    for (set, sy) in [("front", -1.0), ("back", 1.0)] {
        let pts = [
            (-1.8, HALF_Y, 0.1),
            (1.8, HALF_Y, 0.1),
            (-0.6, HALF_Y, 0.7),
            (-HALF_X, 1.0, 0.4),
            (HALF_X, 1.0, 0.5),
            (0.5, 1.2, top_z(0.5)),
        ];
        for (k, (x, y, z)) in pts.into_iter().enumerate() {
            out.push(Fixture {
                name: format!("{}{}", set[..1].to_uppercase(), k + 1),
                set: set.into(),
                point: Vec3::new(x, sy * y, z),
            });
        }
    }
    out
}

pub fn workcell() -> Workcell {
    let mesh = bedframe_mesh();
    let targets = targets(&mesh);
    Workcell::new(
        "demo-bedframe",
        MESH_FILE,
        mesh,
        targets,
        fixtures(),
        StationSource::default_auto(STATION_HEIGHT),
    )
    .expect("demo workcell is valid")
}

pub fn nominal_rig() -> LaserRig {
    LaserRig::cross(BeamOffset::default(), BeamOffset::default())
}

pub fn true_rig() -> LaserRig {
    let o = TRUE_OFFSETS_DEG.map(|(p, y)| BeamOffset::from_degrees(p, y).expect("bounded"));
    LaserRig::cross(o[0], o[1])
}

/// Nominal rig with offsets recovered from the bundled observation sets.
pub fn calibrated_rig() -> LaserRig {
    let wall = calibration_wall();
    let mut rig = nominal_rig();
    for s in observation_sets() {
        let dev = rig.device(s.device).expect("device").clone();
        let c = calibrate_offset(&s.observations, &dev, &wall).expect("demo calibration converges");
        rig.set_offset(s.device, c.offset).expect("device");
    }
    rig
}

/// Large vertical wall at x = CALIBRATION_WALL_X facing -x.
pub fn calibration_wall() -> TriMesh {
    let (x, s) = (CALIBRATION_WALL_X, 10.0);
    TriMesh::new(
        vec![
            Vec3::new(x, -s, -s),
            Vec3::new(x, s, -s),
            Vec3::new(x, s, s),
            Vec3::new(x, -s, s),
        ],
        vec![[0, 2, 1], [0, 3, 2]],
    )
    .expect("wall")
}

/// Four calibration tool poses 1-3 m from the wall, beam roughly along +x.
pub fn calibration_tools() -> Vec<ToolPose> {
    let aim = Rotation::rot_y(std::f64::consts::FRAC_PI_2);
    [
        (1.0, 0.0, 1.0, 0.0),
        (1.7, 0.3, 1.2, 0.1),
        (2.3, -0.4, 0.8, -0.15),
        (3.0, 0.2, 1.5, 0.2),
    ]
    .iter()
    .map(|&(d, y, z, tilt)| {
        let r = Rotation::rot_z(tilt)
            .compose(&aim)
            .compose(&Rotation::rot_z(tilt * 2.0));
        ToolPose(RigidTransform::new(r, Vec3::new(CALIBRATION_WALL_X - d, y, z)))
    })
    .collect()
}

pub fn observation_sets() -> Vec<ObservationSet> {
    let wall = calibration_wall();
    let truth = true_rig();
    truth
        .devices()
        .iter()
        .enumerate()
        .map(|(i, d)| ObservationSet {
            device: i,
            mesh_ref: CALIBRATION_MESH_FILE.into(),
            observations: simulate_observations(&calibration_tools(), d, &wall).expect("wall is hit"),
        })
        .collect()
}

/// Writes the bundled demo files into `dir`; returns the written paths.
pub fn write_demo(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let cell = workcell();
    let mut files = vec![
        (MESH_FILE.to_string(), cell.mesh.to_text()),
        (WORKCELL_FILE.to_string(), cell.to_toml_string()),
        (ARM_FILE.to_string(), ArmModel::default_6r().to_toml_string()),
        (RIG_FILE.to_string(), nominal_rig().to_toml_string()),
        (TRUE_RIG_FILE.to_string(), true_rig().to_toml_string()),
        (CALIBRATION_MESH_FILE.to_string(), calibration_wall().to_text()),
    ];
    for s in observation_sets() {
        files.push((calibration_file(s.device), s.to_toml_string()));
    }
    let mut out = Vec::new();
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text)?;
        out.push(p);
    }
    Ok(out)
}
