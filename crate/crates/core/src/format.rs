//! Small helpers shared by the structured-text file formats.

use serde::{Deserialize, Serialize};

use crate::geom::{RigidTransform, Rotation, Vec3};

/// Human-editable pose: position in meters, fixed-axis roll/pitch/yaw in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct PoseSpec {
    #[serde(default)]
    pub xyz: [f64; 3],
    #[serde(default)]
    pub rpy_deg: [f64; 3],
}

impl PoseSpec {
    pub fn to_transform(&self) -> RigidTransform {
        let r = self.rpy_deg.map(f64::to_radians);
        RigidTransform::new(
            Rotation::from_rpy(r[0], r[1], r[2]),
            Vec3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
        )
    }

    pub fn from_transform(t: &RigidTransform) -> Self {
        let (r, p, y) = t.rotation.to_rpy();
        Self {
            xyz: t.translation.into(),
            rpy_deg: [r.to_degrees(), p.to_degrees(), y.to_degrees()],
        }
    }
}

pub fn vec3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

/// Rejects files whose `version` header is missing or unsupported.
pub fn check_version(found: u32, what: &str) -> Result<(), String> {
    if found == 1 {
        Ok(())
    } else {
        Err(format!("{what}: unsupported version {found} (expected 1)"))
    }
}
