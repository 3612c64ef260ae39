//! Rehabilitation task scripts.
//!
//! The default gross-arm and fine-hand scripts are authored as data files
//! (`data/tasks/*.json`, regenerated by `scripts/gen_tasks.py`) and embedded
//! at build time.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::safety::{stage_defaults, SafetyConfig};
use crate::trajectory::{check_limits, LimitViolation, Trajectory, TrajectoryError, Waypoint};
use crate::Vec3;

const GROSS_ARM_JSON: &str = include_str!("../data/tasks/gross_arm.json");
const FINE_HAND_JSON: &str = include_str!("../data/tasks/fine_hand.json");

/// Maximum position jump allowed between chained phases, meters.
const CHAIN_TOL_M: f64 = 1e-6;

/// Grip hysteresis thresholds used to count open/close cycles.
const GRIP_LOW: f64 = 0.1;
const GRIP_HIGH: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("unknown task {0:?}, expected gross or fine")]
    UnknownTask(String),
    #[error("task file: {0}")]
    Format(String),
    #[error("phase {index} ({name}) does not start where the previous phase ends (gap {gap} m)")]
    Discontinuous {
        index: usize,
        name: String,
        gap: f64,
    },
    #[error("task needs {expected} target muscles, found {found}")]
    MuscleCount { expected: usize, found: usize },
    #[error("task has no phases")]
    NoPhases,
    #[error("task violates stage {stage} limits ({} violations)", .violations.len())]
    Limits {
        stage: u8,
        violations: Vec<LimitViolation>,
    },
    #[error("task start lies outside the stage workspace")]
    StartOutsideWorkspace,
    #[error("grip channel missing")]
    MissingGrip,
    #[error("not a fine-hand task")]
    NotFineTask,
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    GrossArm,
    FineHand,
}

impl TaskKind {
    pub fn expected_muscles(self) -> usize {
        match self {
            TaskKind::GrossArm => 6,
            TaskKind::FineHand => 5,
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            TaskKind::GrossArm => "gross",
            TaskKind::FineHand => "fine",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gross" | "grossarm" | "grossarm-adl" => Ok(TaskKind::GrossArm),
            "fine" | "finehand" | "finehand-finger" => Ok(TaskKind::FineHand),
            _ => Err(TaskError::UnknownTask(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub id: String,
    pub kind: TaskKind,
    pub target_muscles: Vec<String>,
    pub phases: Vec<Phase>,
}

impl TaskScript {
    /// The embedded default script for `kind`.
    pub fn builtin(kind: TaskKind) -> Self {
        let src = match kind {
            TaskKind::GrossArm => GROSS_ARM_JSON,
            TaskKind::FineHand => FINE_HAND_JSON,
        };
        Self::from_json_str(src).expect("embedded task scripts are valid")
    }

    pub fn from_json_str(s: &str) -> Result<Self, TaskError> {
        let task: Self = serde_json::from_str(s).map_err(|e| TaskError::Format(e.to_string()))?;
        task.validate_structure()?;
        Ok(task)
    }

    fn validate_structure(&self) -> Result<(), TaskError> {
        if self.phases.is_empty() {
            return Err(TaskError::NoPhases);
        }
        let expected = self.kind.expected_muscles();
        if self.target_muscles.len() != expected {
            return Err(TaskError::MuscleCount {
                expected,
                found: self.target_muscles.len(),
            });
        }
        for (i, w) in self.phases.windows(2).enumerate() {
            let gap = (w[0].trajectory.last().pos - w[1].trajectory.first().pos).norm();
            if gap > CHAIN_TOL_M {
                return Err(TaskError::Discontinuous {
                    index: i + 1,
                    name: w[1].name.clone(),
                    gap,
                });
            }
        }
        Ok(())
    }

    /// Full validation: structure plus stage-3 kinematic limits.
    pub fn validate(&self) -> Result<(), TaskError> {
        self.validate_structure()?;
        let cfg = stage_defaults(3).expect("stage 3 exists");
        let violations = check_limits(&self.trajectory().resample(crate::DEFAULT_DT)?, &cfg);
        if !violations.is_empty() {
            return Err(TaskError::Limits {
                stage: 3,
                violations,
            });
        }
        Ok(())
    }

    /// All phases concatenated into one trajectory.
    pub fn trajectory(&self) -> Trajectory {
        concat_phases(self.phases.iter())
    }

    pub fn start(&self) -> Vec3 {
        self.phases[0].trajectory.first().pos
    }
}

fn concat_phases<'a>(phases: impl Iterator<Item = &'a Phase>) -> Trajectory {
    let mut wps: Vec<Waypoint> = Vec::new();
    for p in phases {
        for w in p.trajectory.waypoints() {
            if wps.last().is_some_and(|l| w.t <= l.t) {
                continue;
            }
            wps.push(*w);
        }
    }
    Trajectory::new(wps).expect("phases chain in time")
}

/// Fits a trajectory into a safety stage: shrinks its excursion about the
/// start point until it fits the workspace (with `margin` meters of
/// clearance), then slows it uniformly until velocity and acceleration limits
/// hold at tick `dt`.
pub fn fit_to_stage(
    traj: &Trajectory,
    cfg: &SafetyConfig,
    margin: f64,
    dt: f64,
) -> Result<Trajectory, TaskError> {
    let start = traj.first().pos;
    let lo = cfg.workspace.min + Vec3::repeat(margin);
    let hi = cfg.workspace.max - Vec3::repeat(margin);
    if (0..3).any(|k| start[k] < lo[k] || start[k] > hi[k]) {
        return Err(TaskError::StartOutsideWorkspace);
    }
    let mut scale: f64 = 1.0;
    for p in traj.positions() {
        for k in 0..3 {
            let d = p[k] - start[k];
            if p[k] > hi[k] {
                scale = scale.min((hi[k] - start[k]) / d);
            } else if p[k] < lo[k] {
                scale = scale.min((lo[k] - start[k]) / d);
            }
        }
    }
    let mut out = if scale < 1.0 {
        scale_amplitude_about(traj, &start, scale)
    } else {
        traj.clone()
    };
    for _ in 0..8 {
        let sampled = out.resample(dt)?;
        let (mut v_peak, mut a_peak) = (0.0f64, 0.0f64);
        let viol = check_limits(&sampled, cfg);
        if viol.is_empty() {
            return Ok(out);
        }
        for v in &viol {
            match v.kind {
                crate::trajectory::LimitKind::Velocity => {
                    v_peak = v_peak.max(v.magnitude + cfg.v_max)
                }
                crate::trajectory::LimitKind::Acceleration => {
                    a_peak = a_peak.max(v.magnitude + cfg.a_max)
                }
                crate::trajectory::LimitKind::Workspace => {
                    return Err(TaskError::Limits {
                        stage: cfg.stage,
                        violations: viol,
                    })
                }
            }
        }
        let stretch = (v_peak / cfg.v_max)
            .max((a_peak / cfg.a_max).sqrt())
            .max(1.0)
            * 1.02;
        out = out.time_scaled(stretch)?;
    }
    let violations = check_limits(&out.resample(dt)?, cfg);
    if violations.is_empty() {
        Ok(out)
    } else {
        Err(TaskError::Limits {
            stage: cfg.stage,
            violations,
        })
    }
}

fn scale_amplitude_about(traj: &Trajectory, anchor: &Vec3, factor: f64) -> Trajectory {
    traj.map_positions(|w| anchor + (w.pos - anchor) * factor)
}

/// Shrinks a movement to `factor` of its amplitude: positions contract toward
/// the start point and grip closure scales toward fully open.
pub fn scale_amplitude(traj: &Trajectory, factor: f64) -> Trajectory {
    let start = traj.first().pos;
    let scaled = scale_amplitude_about(traj, &start, factor);
    if !traj.has_grip() {
        return scaled;
    }
    let wps = scaled
        .waypoints()
        .iter()
        .map(|w| Waypoint {
            grip: w.grip.map(|g| g * factor),
            ..*w
        })
        .collect();
    Trajectory::with_frame(traj.frame(), wps).expect("times unchanged")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripCycleReport {
    pub cycles: usize,
    /// Mean time between successive cycle starts (or the single cycle's
    /// length); zero when no cycle was found.
    pub period_s: f64,
    pub cycles_per_interval: f64,
}

/// Counts full open→closed→open grip cycles in the palm-open and fist-hold
/// phases of a fine-hand script.
pub fn fine_task_grip_channel(
    task: &TaskScript,
    interval_s: f64,
) -> Result<GripCycleReport, TaskError> {
    if task.kind != TaskKind::FineHand {
        return Err(TaskError::NotFineTask);
    }
    let phases: Vec<&Phase> = task
        .phases
        .iter()
        .filter(|p| p.name.starts_with("palm-open") || p.name.starts_with("fist-hold"))
        .collect();
    if phases.is_empty() {
        return Ok(GripCycleReport {
            cycles: 0,
            period_s: 0.0,
            cycles_per_interval: 0.0,
        });
    }
    let traj = concat_phases(phases.into_iter());
    if !traj.has_grip() {
        return Err(TaskError::MissingGrip);
    }
    Ok(count_grip_cycles(&traj, interval_s))
}

pub fn count_grip_cycles(traj: &Trajectory, interval_s: f64) -> GripCycleReport {
    #[derive(PartialEq)]
    enum State {
        Unknown,
        Open,
        Closed,
    }
    let mut state = State::Unknown;
    let mut last_open_t = 0.0;
    let mut cycle_start = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for w in traj.waypoints() {
        let g = w.grip.unwrap_or(0.0);
        match state {
            State::Unknown | State::Open if g <= GRIP_LOW => {
                state = State::Open;
                last_open_t = w.t;
            }
            State::Open if g >= GRIP_HIGH => {
                state = State::Closed;
                cycle_start = last_open_t;
            }
            State::Closed if g <= GRIP_LOW => {
                spans.push((cycle_start, w.t));
                state = State::Open;
                last_open_t = w.t;
            }
            _ => {}
        }
    }
    let cycles = spans.len();
    let period_s = match cycles {
        0 => 0.0,
        1 => spans[0].1 - spans[0].0,
        n => (spans[n - 1].0 - spans[0].0) / (n - 1) as f64,
    };
    GripCycleReport {
        cycles,
        period_s,
        cycles_per_interval: if period_s > 0.0 {
            interval_s / period_s
        } else {
            0.0
        },
    }
}
