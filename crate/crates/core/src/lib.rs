//! Laser projection guidance for robot-assisted cable-tray assembly.
//!
//! A mobile 6-axis arm carries fan-line lasers and projects each tray's
//! position and orientation onto the bedframe. The crate covers the whole
//! simulated workflow: arm kinematics, workcell geometry, laser model and
//! boresight calibration, fixture localization, station planning, the
//! digital-twin wire protocol with a controller emulator, and the
//! operator-driven task sequencer with accuracy reporting.

pub mod arm;
pub mod demo;
pub mod exec;
pub mod format;
pub mod geom;
pub mod locate;
pub mod operate;
pub mod optics;
pub mod plan;
pub mod twin;
pub mod workcell;

pub use exec::Execution;
pub use geom::{Ray, RigidTransform, Rotation, Vec3};
