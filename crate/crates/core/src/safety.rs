//! Staged safety monitor.
//!
//! The monitor is a small state machine advanced once per control tick. Force
//! and workspace breaches are evaluated before any queued command, so an
//! emergency stop can never be masked by a command arriving on the same tick.
//! It also owns the admittance speed scaling and the training interval timer.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subject::ForceReading;
use crate::Vec3;

/// Resistance force at or above which the arm stops immediately, newtons.
pub const F_SAFE_N: f64 = 45.0;
/// Default admittance knee, newtons.
pub const F_SOFT_N: f64 = 30.0;
/// Training interval length, seconds.
pub const INTERVAL_S: f64 = 300.0;
/// Rest between training intervals, seconds.
pub const REST_S: f64 = 20.0;

/// Common center of the nested stage workspaces (robot base frame, meters).
pub const WORKSPACE_CENTER: [f64; 3] = [0.45, 0.0, 0.35];

const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("invalid safety stage {0}, expected 1, 2 or 3")]
    InvalidStage(u8),
    #[error("invalid safety config: {0}")]
    InvalidConfig(&'static str),
    #[error("command {0} rejected: only Reset is accepted during an emergency stop")]
    RejectedInEmergency(Command),
    #[error("tick time {t} precedes previous tick {last}")]
    TimeWentBackwards { t: f64, last: f64 },
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: Vec3,
    pub max: Vec3,
}

impl Workspace {
    pub fn cube(center: Vec3, side: f64) -> Self {
        let h = Vec3::repeat(side / 2.0);
        Self {
            min: center - h,
            max: center + h,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// Euclidean distance from `p` to the box; zero inside.
    pub fn distance_outside(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let e = (self.min[k] - p[k]).max(p[k] - self.max[k]).max(0.0);
            d2 += e * e;
        }
        d2.sqrt()
    }

    /// True when `other` lies strictly inside `self` on every face.
    pub fn strictly_contains(&self, other: &Workspace) -> bool {
        (0..3).all(|k| self.min[k] < other.min[k] && other.max[k] < self.max[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyConfig {
    pub stage: u8,
    pub workspace: Workspace,
    pub v_max: f64,
    pub a_max: f64,
    pub f_safe: f64,
    pub f_soft: f64,
    pub interval_s: f64,
    pub rest_s: f64,
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<(), SafetyError> {
        if !(1..=3).contains(&self.stage) {
            return Err(SafetyError::InvalidStage(self.stage));
        }
        if !(0..3).all(|k| self.workspace.min[k] < self.workspace.max[k]) {
            return Err(SafetyError::InvalidConfig(
                "workspace min must be below max",
            ));
        }
        if !(self.v_max > 0.0 && self.a_max > 0.0) {
            return Err(SafetyError::InvalidConfig(
                "v_max and a_max must be positive",
            ));
        }
        if !(self.f_soft > 0.0 && self.f_soft < self.f_safe) {
            return Err(SafetyError::InvalidConfig("need 0 < f_soft < f_safe"));
        }
        if !(self.interval_s > 0.0 && self.rest_s >= 0.0) {
            return Err(SafetyError::InvalidConfig(
                "need interval_s > 0 and rest_s >= 0",
            ));
        }
        Ok(())
    }

    /// Admittance law: full speed at zero force, falling linearly to zero at `f_soft`.
    pub fn speed_scale(&self, force_norm: f64) -> f64 {
        (1.0 - force_norm.max(0.0) / self.f_soft).clamp(0.0, 1.0)
    }
}

/// Defaults for the three safety stages.
///
/// Workspaces are concentric cubes around [`WORKSPACE_CENTER`]; each stage
/// strictly contains the previous one and allows higher velocity and
/// acceleration. The emergency threshold is the same in every stage.
pub fn stage_defaults(stage: u8) -> Result<SafetyConfig, SafetyError> {
    let (side, v_max, a_max) = match stage {
        1 => (0.3, 0.05, 0.1),
        2 => (0.5, 0.10, 0.2),
        3 => (0.7, 0.20, 0.4),
        s => return Err(SafetyError::InvalidStage(s)),
    };
    let c = WORKSPACE_CENTER;
    Ok(SafetyConfig {
        stage,
        workspace: Workspace::cube(Vec3::new(c[0], c[1], c[2]), side),
        v_max,
        a_max,
        f_safe: F_SAFE_N,
        f_soft: F_SOFT_N,
        interval_s: INTERVAL_S,
        rest_s: REST_S,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Running,
    SoftHold,
    Resting,
    EmergencyStop,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Command {
    Start,
    Stop,
    Resume,
    Reset,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Force,
    Workspace,
    Command,
    Timer,
}

/// One mode change, as written to the JSON-lines transition log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyTransition {
    pub t: f64,
    pub from: Mode,
    pub to: Mode,
    pub cause: Cause,
    pub force_n: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SafetyState {
    pub mode: Mode,
    /// Time the current mode was entered.
    pub since: f64,
    pub speed_scale: f64,
    /// Running time accumulated in the current training interval.
    pub interval_elapsed: f64,
    /// Completed training intervals.
    pub intervals_completed: u32,
    last_t: Option<f64>,
}

impl Default for SafetyState {
    fn default() -> Self {
        Self::idle(0.0)
    }
}

impl SafetyState {
    pub fn idle(t: f64) -> Self {
        Self {
            mode: Mode::Idle,
            since: t,
            speed_scale: 0.0,
            interval_elapsed: 0.0,
            intervals_completed: 0,
            last_t: None,
        }
    }

    fn enter(&self, mode: Mode, t: f64) -> Self {
        Self {
            mode,
            since: t,
            speed_scale: 0.0,
            ..*self
        }
    }

    /// True when the running interval would expire on a tick at `t`.
    pub fn interval_due(&self, t: f64, cfg: &SafetyConfig) -> bool {
        if self.mode != Mode::Running {
            return false;
        }
        let dt = self.last_t.map_or(0.0, |l| (t - l).max(0.0));
        self.interval_elapsed + dt >= cfg.interval_s - TIME_EPS
    }
}

/// Advances the monitor by one tick.
///
/// Returns the new state and, when the mode changed, the transition record.
pub fn step(
    state: &SafetyState,
    force: &ForceReading,
    cmd: Option<Command>,
    pos: &Vec3,
    t: f64,
    cfg: &SafetyConfig,
) -> Result<(SafetyState, Option<SafetyTransition>), SafetyError> {
    if let Some(last) = state.last_t {
        if t < last {
            return Err(SafetyError::TimeWentBackwards { t, last });
        }
    }
    let f = force.magnitude();
    let breach = if f >= cfg.f_safe {
        Some(Cause::Force)
    } else if !cfg.workspace.contains(pos) {
        Some(Cause::Workspace)
    } else {
        None
    };
    let tick = t - state.last_t.unwrap_or(t);
    let mut next = SafetyState {
        last_t: Some(t),
        ..*state
    };

    let (to, cause) = if state.mode == Mode::EmergencyStop {
        match cmd {
            Some(Command::Reset) | None => {}
            Some(other) => return Err(SafetyError::RejectedInEmergency(other)),
        }
        match (breach, cmd) {
            (None, Some(Command::Reset)) => (Mode::Idle, Cause::Command),
            _ => (Mode::EmergencyStop, Cause::Command),
        }
    } else if let Some(cause) = breach {
        (Mode::EmergencyStop, cause)
    } else {
        match (state.mode, cmd) {
            (_, Some(Command::Reset)) => (Mode::Idle, Cause::Command),
            (Mode::Running, Some(Command::Stop)) => (Mode::SoftHold, Cause::Command),
            (Mode::Idle, Some(Command::Start)) => (Mode::Running, Cause::Command),
            (Mode::Running, _) => {
                next.interval_elapsed += tick;
                if next.interval_elapsed >= cfg.interval_s - TIME_EPS {
                    (Mode::Resting, Cause::Timer)
                } else {
                    (Mode::Running, Cause::Timer)
                }
            }
            (Mode::Resting, _) if t - state.since >= cfg.rest_s - TIME_EPS => {
                (Mode::Running, Cause::Timer)
            }
            (Mode::SoftHold, Some(Command::Resume)) => (Mode::Running, Cause::Command),
            (mode, _) => (mode, Cause::Command),
        }
    };

    let transition = if to != state.mode {
        next = next.enter(to, t);
        match (state.mode, to) {
            (Mode::Running, Mode::Resting) => {
                next.intervals_completed += 1;
                next.interval_elapsed = 0.0;
            }
            (Mode::Idle, Mode::Running) | (_, Mode::Idle) => {
                next.interval_elapsed = 0.0;
                if to == Mode::Idle {
                    next.intervals_completed = 0;
                }
            }
            _ => {}
        }
        Some(SafetyTransition {
            t,
            from: state.mode,
            to,
            cause,
            force_n: f,
        })
    } else {
        None
    };
    next.speed_scale = if next.mode == Mode::Running {
        cfg.speed_scale(f)
    } else {
        0.0
    };
    Ok((next, transition))
}

/// Stateful wrapper around [`step`] that keeps the transition log.
#[derive(Debug, Clone)]
pub struct SafetyMonitor {
    cfg: SafetyConfig,
    state: SafetyState,
    log: Vec<SafetyTransition>,
}

impl SafetyMonitor {
    pub fn new(cfg: SafetyConfig) -> Result<Self, SafetyError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: SafetyState::default(),
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &SafetyConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SafetyState {
        &self.state
    }

    pub fn mode(&self) -> Mode {
        self.state.mode
    }

    pub fn log(&self) -> &[SafetyTransition] {
        &self.log
    }

    pub fn tick(
        &mut self,
        force: &ForceReading,
        cmd: Option<Command>,
        pos: &Vec3,
        t: f64,
    ) -> Result<Option<SafetyTransition>, SafetyError> {
        let (next, tr) = step(&self.state, force, cmd, pos, t, &self.cfg)?;
        self.state = next;
        if let Some(tr) = tr {
            self.log.push(tr);
        }
        Ok(tr)
    }
}

/// Serializes transitions as JSON lines.
pub fn transitions_to_jsonl(log: &[SafetyTransition]) -> String {
    let mut s = String::new();
    for tr in log {
        s.push_str(&serde_json::to_string(tr).expect("transition serializes"));
        s.push('\n');
    }
    s
}
