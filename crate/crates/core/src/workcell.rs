//! Bedframe geometry, assembly targets, fixtures and candidate base stations.
//!
//! Two text formats live here. The mesh format is a plain triangle list:
//!
//! ```text
//! # comment
//! v <x> <y> <z>
//! t <i> <j> <k> [<nx> <ny> <nz>]
//! ```
//!
//! Vertex indices are zero-based in order of appearance; triangles wind
//! counter-clockwise seen from outside unless an explicit outward normal is
//! appended. The workcell file is TOML and references a mesh file.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::format::{check_version, vec3};
use crate::geom::{Ray, RigidTransform, Rotation, Vec3};

pub const MIN_TRIANGLE_AREA: f64 = 1e-12;
/// Hits closer than this to the ray origin are ignored.
pub const HIT_EPSILON: f64 = 1e-9;
pub const TANGENCY_TOL: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum WorkcellError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {entity}: {reason}")]
    Validation { entity: String, reason: String },
    #[error("io error: {0}")]
    Io(String),
    #[error("bad triangle id {0}")]
    BadTriangle(usize),
    #[error("point is {0:.3e} m off the triangle plane")]
    OffPlane(f64),
}

fn invalid(entity: impl Into<String>, reason: impl Into<String>) -> WorkcellError {
    WorkcellError::Validation {
        entity: entity.into(),
        reason: reason.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub point: Vec3,
    pub triangle: usize,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Self {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn merge(&mut self, o: &Aabb) {
        self.min = self.min.inf(&o.min);
        self.max = self.max.sup(&o.max);
    }

    /// Slab test; returns the entry distance if the ray meets the box before `t_max`.
    fn hit(&self, origin: &Vec3, inv_dir: &Vec3, t_max: f64) -> bool {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for a in 0..3 {
            let mut tn = (self.min[a] - origin[a]) * inv_dir[a];
            let mut tf = (self.max[a] - origin[a]) * inv_dir[a];
            if tn > tf {
                std::mem::swap(&mut tn, &mut tf);
            }
            // NaN (0 * inf) means the ray lies in the slab plane; keep going.
            if tn.is_nan() || tf.is_nan() {
                if origin[a] < self.min[a] || origin[a] > self.max[a] {
                    return false;
                }
                continue;
            }
            t0 = t0.max(tn);
            t1 = t1.min(tf * (1.0 + 2.0 * f64::EPSILON));
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq)]
enum BvhNode {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

const LEAF_SIZE: usize = 4;

/// Triangle mesh with computed outward unit normals and a bounding volume
/// hierarchy over its triangles.
#[derive(Clone, Debug)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    normals: Vec<Vec3>,
    /// Normals supplied explicitly in the source, kept for serialization.
    explicit: Vec<Option<Vec3>>,
    bvh: Vec<BvhNode>,
    order: Vec<usize>,
}

impl PartialEq for TriMesh {
    fn eq(&self, other: &Self) -> bool {
        self.vertices == other.vertices && self.triangles == other.triangles && self.explicit == other.explicit
    }
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self, WorkcellError> {
        let n = triangles.len();
        Self::with_normals(vertices, triangles, vec![None; n])
    }

    /// Explicit normals only decide which side is outward; the stored normal
    /// is always the geometric one, flipped if it disagrees.
    pub fn with_normals(
        vertices: Vec<Vec3>,
        triangles: Vec<[usize; 3]>,
        explicit: Vec<Option<Vec3>>,
    ) -> Result<Self, WorkcellError> {
        if let Some(i) = vertices.iter().position(|v| !v.iter().all(|x| x.is_finite())) {
            return Err(invalid(format!("vertex {i}"), "non-finite coordinate"));
        }
        let mut normals = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= vertices.len()) {
                return Err(invalid(
                    format!("triangle {t}"),
                    format!("vertex index {bad} out of range"),
                ));
            }
            let [a, b, c] = tri.map(|i| vertices[i]);
            let cross = (b - a).cross(&(c - a));
            let area = 0.5 * cross.norm();
            if !(area > MIN_TRIANGLE_AREA) {
                return Err(invalid(
                    format!("triangle {t}"),
                    format!("degenerate (area {area:.3e} m^2)"),
                ));
            }
            let mut nrm = cross.normalize();
            if let Some(hint) = explicit.get(t).copied().flatten() {
                if hint.dot(&nrm) < 0.0 {
                    nrm = -nrm;
                }
            }
            normals.push(nrm);
        }
        let mut mesh = Self {
            vertices,
            triangles,
            normals,
            explicit,
            bvh: Vec::new(),
            order: Vec::new(),
        };
        mesh.build_bvh();
        Ok(mesh)
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn normal(&self, tri: usize) -> Option<Vec3> {
        self.normals.get(tri).copied()
    }

    pub fn corners(&self, tri: usize) -> [Vec3; 3] {
        self.triangles[tri].map(|i| self.vertices[i])
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    fn tri_bounds(&self, t: usize) -> Aabb {
        let mut b = Aabb::empty();
        for p in self.corners(t) {
            b.grow(&p);
        }
        b
    }

    fn build_bvh(&mut self) {
        self.order = (0..self.triangles.len()).collect();
        self.bvh.clear();
        if self.triangles.is_empty() {
            return;
        }
        let centroids: Vec<Vec3> = (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                (a + b + c) / 3.0
            })
            .collect();
        let bounds: Vec<Aabb> = (0..self.triangles.len()).map(|t| self.tri_bounds(t)).collect();
        let mut order = std::mem::take(&mut self.order);
        self.build_node(&mut order, 0, centroids.len(), &centroids, &bounds);
        self.order = order;
    }

    fn build_node(
        &mut self,
        order: &mut [usize],
        start: usize,
        end: usize,
        centroids: &[Vec3],
        bounds: &[Aabb],
    ) -> usize {
        let mut bb = Aabb::empty();
        let mut cb = Aabb::empty();
        for &t in &order[start..end] {
            bb.merge(&bounds[t]);
            cb.grow(&centroids[t]);
        }
        let idx = self.bvh.len();
        if end - start <= LEAF_SIZE {
            self.bvh.push(BvhNode::Leaf { bounds: bb, start, end });
            return idx;
        }
        let extent = cb.max - cb.min;
        let axis = extent.imax();
        order[start..end].sort_by(|&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]).then(a.cmp(&b)));
        let mid = (start + end) / 2;
        self.bvh.push(BvhNode::Leaf { bounds: bb, start, end });
        let left = self.build_node(order, start, mid, centroids, bounds);
        let right = self.build_node(order, mid, end, centroids, bounds);
        self.bvh[idx] = BvhNode::Inner {
            bounds: bb,
            left,
            right,
        };
        idx
    }

    /// Möller–Trumbore, two-sided. Returns the ray parameter.
    fn intersect(&self, tri: usize, ray: &Ray) -> Option<f64> {
        let [a, b, c] = self.corners(tri);
        let e1 = b - a;
        let e2 = c - a;
        let p = ray.direction.cross(&e2);
        let det = e1.dot(&p);
        if det.abs() < 1e-15 {
            return None;
        }
        let inv = 1.0 / det;
        let s = ray.origin - a;
        let u = s.dot(&p) * inv;
        if !(0.0..=1.0).contains(&u) {
            return None;
        }
        let q = s.cross(&e1);
        let v = ray.direction.dot(&q) * inv;
        if v < 0.0 || u + v > 1.0 {
            return None;
        }
        let t = e2.dot(&q) * inv;
        (t > HIT_EPSILON).then_some(t)
    }

    fn better(candidate: (f64, usize), best: Option<(f64, usize)>) -> bool {
        match best {
            None => true,
            Some(b) => candidate.0 < b.0 || (candidate.0 == b.0 && candidate.1 < b.1),
        }
    }

    /// Nearest intersection beyond `HIT_EPSILON`; ties go to the lower
    /// triangle index.
    pub fn ray_hit(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        if !self.bvh.is_empty() {
            let inv = ray.direction.map(|d| 1.0 / d);
            let mut stack = vec![0usize];
            while let Some(n) = stack.pop() {
                let t_max = best.map_or(f64::INFINITY, |b| b.0);
                match &self.bvh[n] {
                    BvhNode::Leaf { bounds, start, end } => {
                        if !bounds.hit(&ray.origin, &inv, t_max) {
                            continue;
                        }
                        for &tri in &self.order[*start..*end] {
                            if let Some(t) = self.intersect(tri, ray) {
                                if Self::better((t, tri), best) {
                                    best = Some((t, tri));
                                }
                            }
                        }
                    }
                    BvhNode::Inner { bounds, left, right } => {
                        if bounds.hit(&ray.origin, &inv, t_max) {
                            stack.push(*right);
                            stack.push(*left);
                        }
                    }
                }
            }
        }
        best.map(|(t, triangle)| Hit {
            point: ray.at(t),
            triangle,
            distance: t,
        })
    }

    /// Reference scan over every triangle.
    pub fn ray_hit_brute_force(&self, ray: &Ray) -> Option<Hit> {
        let mut best: Option<(f64, usize)> = None;
        for tri in 0..self.triangles.len() {
            if let Some(t) = self.intersect(tri, ray) {
                if Self::better((t, tri), best) {
                    best = Some((t, tri));
                }
            }
        }
        best.map(|(t, triangle)| Hit {
            point: ray.at(t),
            triangle,
            distance: t,
        })
    }

    /// Outward normal plus a right-handed tangent basis `(u, v, normal)`.
    pub fn surface_frame(&self, point: &Vec3, tri: usize) -> Result<SurfaceFrame, WorkcellError> {
        let normal = self.normal(tri).ok_or(WorkcellError::BadTriangle(tri))?;
        let [a, b, _] = self.corners(tri);
        let off = (point - a).dot(&normal).abs();
        if off > 1e-6 {
            return Err(WorkcellError::OffPlane(off));
        }
        let u = (b - a).normalize();
        let v = normal.cross(&u);
        Ok(SurfaceFrame { normal, u, v })
    }

    /// Closest surface point, its triangle and distance (brute force).
    pub fn closest_point(&self, p: &Vec3) -> Option<(Vec3, usize, f64)> {
        let mut best: Option<(Vec3, usize, f64)> = None;
        for t in 0..self.triangles.len() {
            let [a, b, c] = self.corners(t);
            let q = closest_on_triangle(p, &a, &b, &c);
            let d = (q - p).norm();
            if best.is_none_or(|(_, _, bd)| d < bd) {
                best = Some((q, t, d));
            }
        }
        best
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut b = Aabb::empty();
        for v in &self.vertices {
            b.grow(v);
        }
        (b.min, b.max)
    }

    pub fn parse(text: &str) -> Result<Self, WorkcellError> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        let mut explicit = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let tag = parts.next().unwrap_or_default();
            let fields: Vec<&str> = parts.collect();
            let err = |m: &str| WorkcellError::Parse(format!("line {}: {m}", ln + 1));
            let floats = |f: &[&str]| -> Result<Vec<f64>, WorkcellError> {
                f.iter()
                    .map(|s| s.parse::<f64>().map_err(|_| err(&format!("bad number '{s}'"))))
                    .collect()
            };
            match tag {
                "v" => {
                    if fields.len() != 3 {
                        return Err(err("vertex needs 3 coordinates"));
                    }
                    let c = floats(&fields)?;
                    vertices.push(Vec3::new(c[0], c[1], c[2]));
                }
                "t" => {
                    if fields.len() != 3 && fields.len() != 6 {
                        return Err(err("triangle needs 3 indices and optionally 3 normal components"));
                    }
                    let idx = fields[..3]
                        .iter()
                        .map(|s| s.parse::<usize>().map_err(|_| err(&format!("bad index '{s}'"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    triangles.push([idx[0], idx[1], idx[2]]);
                    explicit.push(if fields.len() == 6 {
                        let n = floats(&fields[3..])?;
                        Some(Vec3::new(n[0], n[1], n[2]))
                    } else {
                        None
                    });
                }
                other => return Err(err(&format!("unknown record '{other}'"))),
            }
        }
        Self::with_normals(vertices, triangles, explicit)
    }

    /// Shortest round-trip decimal formatting; `parse(to_text())` is exact.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# laserguide mesh v1\n");
        for v in &self.vertices {
            out.push_str(&format!("v {:?} {:?} {:?}\n", v.x, v.y, v.z));
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            match self.explicit[t] {
                Some(n) => out.push_str(&format!(
                    "t {} {} {} {:?} {:?} {:?}\n",
                    tri[0], tri[1], tri[2], n.x, n.y, n.z
                )),
                None => out.push_str(&format!("t {} {} {}\n", tri[0], tri[1], tri[2])),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfaceFrame {
    pub normal: Vec3,
    pub u: Vec3,
    pub v: Vec3,
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetGroup {
    Inner,
    Outer,
}

/// Nominal tray placement: a surface point plus an in-surface direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetMark {
    pub id: String,
    pub group: TargetGroup,
    pub point: Vec3,
    pub direction: Vec3,
    /// meters
    pub tolerance_pos: f64,
    pub tolerance_ang_deg: f64,
}

pub const DEFAULT_TOLERANCE_POS: f64 = 0.005;
pub const DEFAULT_TOLERANCE_ANG_DEG: f64 = 1.0;

impl TargetMark {
    pub fn tolerance_ang(&self) -> f64 {
        self.tolerance_ang_deg.to_radians()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub name: String,
    /// Fixture set this reference point belongs to (one localization each).
    pub set: String,
    pub point: Vec3,
}

/// A station pose given as floor position plus heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    pub xyz: [f64; 3],
    pub yaw_deg: f64,
}

impl StationSpec {
    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::new(Rotation::rot_z(self.yaw_deg.to_radians()), vec3(self.xyz))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StationSource {
    Explicit(Vec<StationSpec>),
    /// Grid ring around the mesh footprint.
    Auto {
        height: f64,
        grid: f64,
        ring_min: f64,
        ring_max: f64,
    },
}

impl StationSource {
    pub fn default_auto(height: f64) -> Self {
        StationSource::Auto {
            height,
            grid: 0.5,
            ring_min: 1.0,
            ring_max: 2.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Workcell {
    pub name: String,
    /// Mesh path as written in the workcell file (relative to it).
    pub mesh_ref: String,
    pub mesh: TriMesh,
    pub targets: Vec<TargetMark>,
    pub fixtures: Vec<Fixture>,
    pub station_source: StationSource,
    pub candidate_stations: Vec<RigidTransform>,
}

/// Stations on a `grid`-spaced lattice whose distance to the mesh's xy
/// footprint lies in `[ring_min, ring_max]`, all facing the footprint centre.
/// Ordered by y, then x.
pub fn generate_stations(mesh: &TriMesh, height: f64, grid: f64, ring_min: f64, ring_max: f64) -> Vec<StationSpec> {
    let (lo, hi) = mesh.bounds();
    let centre = (lo + hi) / 2.0;
    let first = |v: f64| ((v - ring_max) / grid).floor() as i64;
    let last = |v: f64| ((v + ring_max) / grid).ceil() as i64;
    let mut out = Vec::new();
    for iy in first(lo.y)..=last(hi.y) {
        for ix in first(lo.x)..=last(hi.x) {
            let x = ix as f64 * grid;
            let y = iy as f64 * grid;
            let dx = (lo.x - x).max(0.0).max(x - hi.x);
            let dy = (lo.y - y).max(0.0).max(y - hi.y);
            let d = dx.hypot(dy);
            if d >= ring_min && d <= ring_max {
                let yaw = (centre.y - y).atan2(centre.x - x).to_degrees();
                out.push(StationSpec {
                    xyz: [x, y, height],
                    yaw_deg: yaw,
                });
            }
        }
    }
    out
}

/// A station pose must keep its z-axis vertical.
pub fn is_upright(pose: &RigidTransform) -> bool {
    (pose.rotation.apply(&Vec3::z()) - Vec3::z()).norm() < 1e-9
}

/// Second-largest singular value of the centred point set; zero for
/// collinear points.
pub fn spread(points: &[Vec3]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let m = nalgebra::DMatrix::from_fn(points.len(), 3, |r, k| points[r][k] - c[k]);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[1]
}

impl Workcell {
    pub fn new(
        name: impl Into<String>,
        mesh_ref: impl Into<String>,
        mesh: TriMesh,
        targets: Vec<TargetMark>,
        fixtures: Vec<Fixture>,
        station_source: StationSource,
    ) -> Result<Self, WorkcellError> {
        let candidate_stations = match &station_source {
            StationSource::Explicit(specs) => specs.iter().map(StationSpec::to_transform).collect(),
            StationSource::Auto {
                height,
                grid,
                ring_min,
                ring_max,
            } => {
                if !(*grid > 0.0 && ring_min <= ring_max) {
                    return Err(invalid(
                        "stations",
                        "auto generation needs grid > 0 and ring_min <= ring_max",
                    ));
                }
                generate_stations(&mesh, *height, *grid, *ring_min, *ring_max)
                    .iter()
                    .map(StationSpec::to_transform)
                    .collect()
            }
        };
        let cell = Self {
            name: name.into(),
            mesh_ref: mesh_ref.into(),
            mesh,
            targets,
            fixtures,
            station_source,
            candidate_stations,
        };
        cell.validate()?;
        Ok(cell)
    }

    pub fn validate(&self) -> Result<(), WorkcellError> {
        let mut ids = HashSet::new();
        for t in &self.targets {
            let entity = format!("target {}", t.id);
            if !ids.insert(t.id.as_str()) {
                return Err(invalid(entity, "duplicate id"));
            }
            if !(t.tolerance_pos > 0.0 && t.tolerance_ang_deg > 0.0) {
                return Err(invalid(entity, "tolerances must be positive"));
            }
            if (t.direction.norm() - 1.0).abs() > 1e-9 {
                return Err(invalid(entity, "direction must be a unit vector"));
            }
            let Some((_, tri, dist)) = self.mesh.closest_point(&t.point) else {
                return Err(invalid(entity, "mesh has no triangles"));
            };
            if dist > t.tolerance_pos {
                return Err(invalid(
                    entity,
                    format!(
                        "point is {:.1} mm off the surface (tolerance {:.1} mm)",
                        dist * 1e3,
                        t.tolerance_pos * 1e3
                    ),
                ));
            }
            let n = self.mesh.normal(tri).expect("valid triangle");
            let tilt = t.direction.dot(&n).clamp(-1.0, 1.0).asin().abs();
            if tilt > TANGENCY_TOL {
                return Err(invalid(
                    entity,
                    format!("direction leaves the surface by {tilt:.2e} rad"),
                ));
            }
        }
        let mut names = HashSet::new();
        for f in &self.fixtures {
            if !names.insert(f.name.as_str()) {
                return Err(invalid(format!("fixture {}", f.name), "duplicate name"));
            }
        }
        let all: Vec<Vec3> = self.fixtures.iter().map(|f| f.point).collect();
        if all.len() < 3 || spread(&all) <= 1e-6 {
            return Err(invalid("fixtures", "need at least 3 non-collinear fixture points"));
        }
        for set in self.fixture_sets() {
            let pts: Vec<Vec3> = self.fixtures_in(&set).map(|f| f.point).collect();
            if pts.len() < 3 || spread(&pts) <= 1e-6 {
                return Err(invalid(
                    format!("fixture set {set}"),
                    "need at least 3 non-collinear points",
                ));
            }
        }
        for (i, s) in self.candidate_stations.iter().enumerate() {
            if !is_upright(s) {
                return Err(invalid(format!("station {i}"), "z-axis must be vertical"));
            }
        }
        Ok(())
    }

    pub fn target(&self, id: &str) -> Option<&TargetMark> {
        self.targets.iter().find(|t| t.id == id)
    }

    pub fn fixture(&self, name: &str) -> Option<&Fixture> {
        self.fixtures.iter().find(|f| f.name == name)
    }

    /// Distinct fixture set names in order of first appearance.
    pub fn fixture_sets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for f in &self.fixtures {
            if !out.contains(&f.set) {
                out.push(f.set.clone());
            }
        }
        out
    }

    pub fn fixtures_in<'a>(&'a self, set: &'a str) -> impl Iterator<Item = &'a Fixture> + 'a {
        self.fixtures.iter().filter(move |f| f.set == set)
    }

    pub fn from_toml_str(
        text: &str,
        load_mesh: impl FnOnce(&str) -> Result<TriMesh, WorkcellError>,
    ) -> Result<Self, WorkcellError> {
        let file: WorkcellFile = toml::from_str(text).map_err(|e| WorkcellError::Parse(e.to_string()))?;
        check_version(file.version, "workcell file").map_err(WorkcellError::Parse)?;
        let mesh = load_mesh(&file.mesh)?;
        let targets = file
            .targets
            .into_iter()
            .map(|t| TargetMark {
                id: t.id,
                group: t.group,
                point: vec3(t.point),
                direction: vec3(t.direction),
                tolerance_pos: t.tolerance_pos.unwrap_or(DEFAULT_TOLERANCE_POS),
                tolerance_ang_deg: t.tolerance_ang_deg.unwrap_or(DEFAULT_TOLERANCE_ANG_DEG),
            })
            .collect();
        let fixtures = file
            .fixtures
            .into_iter()
            .map(|f| Fixture {
                name: f.name,
                set: f.set.unwrap_or_else(|| "default".into()),
                point: vec3(f.point),
            })
            .collect();
        let source = if file.stations.auto {
            StationSource::Auto {
                height: file.stations.height,
                grid: file.stations.grid,
                ring_min: file.stations.ring[0],
                ring_max: file.stations.ring[1],
            }
        } else {
            StationSource::Explicit(file.stations.pose)
        };
        Self::new(file.name, file.mesh, mesh, targets, fixtures, source)
    }

    /// Reads a workcell file and the mesh it references (relative paths
    /// resolve against the workcell file's directory).
    pub fn load(path: &Path) -> Result<Self, WorkcellError> {
        let text = std::fs::read_to_string(path).map_err(|e| WorkcellError::Io(format!("{}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, |mesh_ref| {
            let mesh_path: PathBuf = dir.join(mesh_ref);
            let mesh_text = std::fs::read_to_string(&mesh_path)
                .map_err(|e| WorkcellError::Io(format!("{}: {e}", mesh_path.display())))?;
            TriMesh::parse(&mesh_text)
        })
    }

    pub fn to_toml_string(&self) -> String {
        let (auto, height, grid, ring, pose) = match &self.station_source {
            StationSource::Explicit(p) => (false, 0.0, 0.5, [1.0, 2.5], p.clone()),
            StationSource::Auto {
                height,
                grid,
                ring_min,
                ring_max,
            } => (true, *height, *grid, [*ring_min, *ring_max], Vec::new()),
        };
        let file = WorkcellFile {
            version: 1,
            name: self.name.clone(),
            mesh: self.mesh_ref.clone(),
            stations: StationsSection {
                auto,
                height,
                grid,
                ring,
                pose,
            },
            fixtures: self
                .fixtures
                .iter()
                .map(|f| FixtureSpec {
                    name: f.name.clone(),
                    set: Some(f.set.clone()),
                    point: f.point.into(),
                })
                .collect(),
            targets: self
                .targets
                .iter()
                .map(|t| TargetSpec {
                    id: t.id.clone(),
                    group: t.group,
                    point: t.point.into(),
                    direction: t.direction.into(),
                    tolerance_pos: Some(t.tolerance_pos),
                    tolerance_ang_deg: Some(t.tolerance_ang_deg),
                })
                .collect(),
        };
        toml::to_string(&file).expect("workcell serializes")
    }

    /// Content hash of the workcell and its mesh; used to detect stale
    /// localizations.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml_string().as_bytes());
        h.update(self.mesh.to_text().as_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct WorkcellFile {
    version: u32,
    name: String,
    mesh: String,
    stations: StationsSection,
    fixtures: Vec<FixtureSpec>,
    targets: Vec<TargetSpec>,
}

fn default_grid() -> f64 {
    0.5
}

fn default_ring() -> [f64; 2] {
    [1.0, 2.5]
}

#[derive(Serialize, Deserialize)]
struct StationsSection {
    #[serde(default)]
    auto: bool,
    #[serde(default)]
    height: f64,
    #[serde(default = "default_grid")]
    grid: f64,
    #[serde(default = "default_ring")]
    ring: [f64; 2],
    #[serde(default)]
    pose: Vec<StationSpec>,
}

#[derive(Serialize, Deserialize)]
struct FixtureSpec {
    name: String,
    set: Option<String>,
    point: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct TargetSpec {
    id: String,
    group: TargetGroup,
    point: [f64; 3],
    direction: [f64; 3],
    tolerance_pos: Option<f64>,
    tolerance_ang_deg: Option<f64>,
}
