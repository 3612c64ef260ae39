//! Simulation core for a human-in-the-loop rehabilitation cobot: trajectory
//! primitives, a simulated subject, the safety monitor, the interactive
//! imitation loop, EMG analytics and session persistence.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod emg;
pub mod imitation;
pub mod perception;
pub mod policy;
pub mod safety;
pub mod session;
pub mod subject;
pub mod task;
pub mod trajectory;

/// Position or force vector in the world frame.
pub type Vec3 = nalgebra::Vector3<f64>;

pub use safety::{Command, Mode, SafetyConfig, SafetyMonitor, SafetyTransition};
pub use subject::{ForceReading, Subject, SubjectProfile};
pub use task::{TaskKind, TaskScript};
pub use trajectory::{Trajectory, Waypoint, DEFAULT_DT};
