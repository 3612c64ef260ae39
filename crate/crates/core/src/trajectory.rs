//! Timed end-effector waypoint trajectories.
//!
//! A [`Trajectory`] is the common currency between the subject model, the
//! safety monitor, the imitation loop and the activation surrogate. All
//! geometry is positional: orientation is not tracked. Interpolation between
//! waypoints is piecewise linear, which keeps velocity bounds exact and makes
//! every derived quantity easy to check by hand.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::safety::SafetyConfig;
use crate::Vec3;

/// Default execution tick, seconds.
pub const DEFAULT_DT: f64 = 0.05;

/// Name of the single fixed world frame used throughout.
pub const WORLD_FRAME: &str = "world";

/// Slack applied before reporting a kinematic limit violation.
const LIMIT_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least 2 waypoints, got {0}")]
    TooFewWaypoints(usize),
    #[error("waypoint {index}: time {t} is not strictly after the previous waypoint")]
    NonMonotoneTime { index: usize, t: f64 },
    #[error("waypoint {index}: non-finite or negative value")]
    NonFinite { index: usize },
    #[error("waypoint {index}: grip {grip} outside [0, 1]")]
    GripOutOfRange { index: usize, grip: f64 },
    #[error("waypoints mix present and absent grip values (first mismatch at {0})")]
    MixedGrip(usize),
    #[error("resampling step must be positive, got {0}")]
    NonPositiveDt(f64),
    #[error("sample count mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("band radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("trajectory file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "WaypointRecord", into = "WaypointRecord")]
pub struct Waypoint {
    pub t: f64,
    pub pos: Vec3,
    /// 0 = fully open, 1 = fully closed.
    pub grip: Option<f64>,
}

impl Waypoint {
    pub fn new(t: f64, pos: Vec3) -> Self {
        Self { t, pos, grip: None }
    }

    pub fn with_grip(t: f64, pos: Vec3, grip: f64) -> Self {
        Self {
            t,
            pos,
            grip: Some(grip),
        }
    }
}

/// An ordered, strictly time-increasing list of waypoints in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryFile", into = "TrajectoryFile")]
pub struct Trajectory {
    frame: String,
    waypoints: Vec<Waypoint>,
}

impl Trajectory {
    /// Builds a trajectory in the world frame, validating every invariant.
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self, TrajectoryError> {
        Self::with_frame(WORLD_FRAME, waypoints)
    }

    pub fn with_frame(
        frame: impl Into<String>,
        waypoints: Vec<Waypoint>,
    ) -> Result<Self, TrajectoryError> {
        if waypoints.len() < 2 {
            return Err(TrajectoryError::TooFewWaypoints(waypoints.len()));
        }
        let has_grip = waypoints[0].grip.is_some();
        for (i, w) in waypoints.iter().enumerate() {
            if !w.t.is_finite() || w.t < 0.0 || w.pos.iter().any(|c| !c.is_finite()) {
                return Err(TrajectoryError::NonFinite { index: i });
            }
            if w.grip.is_some() != has_grip {
                return Err(TrajectoryError::MixedGrip(i));
            }
            if let Some(g) = w.grip {
                if !(0.0..=1.0).contains(&g) {
                    return Err(TrajectoryError::GripOutOfRange { index: i, grip: g });
                }
            }
            if i > 0 && w.t <= waypoints[i - 1].t {
                return Err(TrajectoryError::NonMonotoneTime { index: i, t: w.t });
            }
        }
        Ok(Self {
            frame: frame.into(),
            waypoints,
        })
    }

    /// Builds a trajectory from positions sampled every `dt` seconds from `t0`.
    pub fn from_positions(t0: f64, dt: f64, positions: &[Vec3]) -> Result<Self, TrajectoryError> {
        Self::new(
            positions
                .iter()
                .enumerate()
                .map(|(i, p)| Waypoint::new(t0 + i as f64 * dt, *p))
                .collect(),
        )
    }

    pub fn frame(&self) -> &str {
        &self.frame
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn into_waypoints(self) -> Vec<Waypoint> {
        self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn has_grip(&self) -> bool {
        self.waypoints[0].grip.is_some()
    }

    pub fn start_time(&self) -> f64 {
        self.waypoints[0].t
    }

    pub fn end_time(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].t
    }

    pub fn duration(&self) -> f64 {
        self.end_time() - self.start_time()
    }

    pub fn first(&self) -> &Waypoint {
        &self.waypoints[0]
    }

    pub fn last(&self) -> &Waypoint {
        &self.waypoints[self.waypoints.len() - 1]
    }

    pub fn positions(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.waypoints.iter().map(|w| w.pos)
    }

    /// Evaluates the piecewise-linear curve at `t`, clamping outside the
    /// time range. A `t` that lands exactly on an interior waypoint resolves
    /// to the left segment, which yields that waypoint exactly.
    pub fn sample(&self, t: f64) -> Waypoint {
        let wps = &self.waypoints;
        if t <= wps[0].t {
            return Waypoint { t, ..wps[0] };
        }
        let last = wps[wps.len() - 1];
        if t >= last.t {
            return Waypoint { t, ..last };
        }
        // first index whose time is >= t; the bracketing segment is [j-1, j]
        let j = wps.partition_point(|w| w.t < t);
        let (a, b) = (&wps[j - 1], &wps[j]);
        if t == b.t {
            return Waypoint { t, ..*b };
        }
        let s = (t - a.t) / (b.t - a.t);
        Waypoint {
            t,
            pos: lerp(&a.pos, &b.pos, s),
            grip: match (a.grip, b.grip) {
                (Some(ga), Some(gb)) => Some(ga * (1.0 - s) + gb * s),
                _ => None,
            },
        }
    }

    /// Sample times `t0, t0 + dt, ...` followed by the exact end time.
    pub fn time_grid(&self, dt: f64) -> Result<Vec<f64>, TrajectoryError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(TrajectoryError::NonPositiveDt(dt));
        }
        Ok(time_grid(self.start_time(), self.end_time(), dt))
    }

    /// Uniform-rate resampling with linear interpolation. Endpoints are
    /// preserved exactly; the final step is shorter than `dt` when the
    /// duration is not a multiple of it.
    pub fn resample(&self, dt: f64) -> Result<Trajectory, TrajectoryError> {
        let grid = self.time_grid(dt)?;
        let mut out: Vec<Waypoint> = grid.iter().map(|&t| self.sample(t)).collect();
        let n = out.len();
        out[0] = self.waypoints[0];
        out[n - 1] = *self.last();
        Trajectory::with_frame(self.frame.clone(), out)
    }

    /// Copy with every time shifted by `offset`.
    pub fn shifted_in_time(&self, offset: f64) -> Result<Trajectory, TrajectoryError> {
        Trajectory::with_frame(
            self.frame.clone(),
            self.waypoints
                .iter()
                .map(|w| Waypoint {
                    t: w.t + offset,
                    ..*w
                })
                .collect(),
        )
    }

    /// Copy translated rigidly by `delta`.
    pub fn translated(&self, delta: &Vec3) -> Trajectory {
        Trajectory {
            frame: self.frame.clone(),
            waypoints: self
                .waypoints
                .iter()
                .map(|w| Waypoint {
                    pos: w.pos + delta,
                    ..*w
                })
                .collect(),
        }
    }

    /// Copy with each position mapped through `f`; times and grip untouched.
    pub fn map_positions(&self, mut f: impl FnMut(&Waypoint) -> Vec3) -> Trajectory {
        Trajectory {
            frame: self.frame.clone(),
            waypoints: self
                .waypoints
                .iter()
                .map(|w| Waypoint { pos: f(w), ..*w })
                .collect(),
        }
    }

    /// Copy with all times scaled about the start time by `factor`.
    pub fn time_scaled(&self, factor: f64) -> Result<Trajectory, TrajectoryError> {
        let t0 = self.start_time();
        Trajectory::with_frame(
            self.frame.clone(),
            self.waypoints
                .iter()
                .map(|w| Waypoint {
                    t: t0 + (w.t - t0) * factor,
                    ..*w
                })
                .collect(),
        )
    }

    /// Mean waypoint position.
    pub fn centroid(&self) -> Vec3 {
        self.positions().sum::<Vec3>() / self.len() as f64
    }
}

/// Affine blend `a·(1−s) + b·s`; returns `a` at s = 0 and `b` at s = 1 exactly.
pub(crate) fn lerp(a: &Vec3, b: &Vec3, s: f64) -> Vec3 {
    a * (1.0 - s) + b * s
}

pub(crate) fn time_grid(t0: f64, t1: f64, dt: f64) -> Vec<f64> {
    let span = t1 - t0;
    let ratio = span / dt;
    // treat durations within 1e-9 of a whole number of steps as exact
    let mut steps = ratio.round();
    if (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
        steps = ratio.ceil();
    }
    let steps = steps.max(1.0) as usize;
    let mut grid: Vec<f64> = (0..steps).map(|i| t0 + i as f64 * dt).collect();
    grid.push(t1);
    grid
}

/// Root-mean-square Euclidean distance between paired positions.
pub fn rmse(pred: &Trajectory, reference: &Trajectory) -> Result<f64, TrajectoryError> {
    let a: Vec<Vec3> = pred.positions().collect();
    let b: Vec<Vec3> = reference.positions().collect();
    rmse_positions(&a, &b)
}

pub fn rmse_positions(pred: &[Vec3], reference: &[Vec3]) -> Result<f64, TrajectoryError> {
    if pred.len() != reference.len() {
        return Err(TrajectoryError::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    let sum: f64 = pred
        .iter()
        .zip(reference)
        .map(|(p, r)| (p - r).norm_squared())
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Fraction of paired samples whose distance is within `radius`.
pub fn band_fraction(
    pred: &Trajectory,
    reference: &Trajectory,
    radius: f64,
) -> Result<f64, TrajectoryError> {
    let a: Vec<Vec3> = pred.positions().collect();
    let b: Vec<Vec3> = reference.positions().collect();
    band_fraction_positions(&a, &b, radius)
}

pub fn band_fraction_positions(
    pred: &[Vec3],
    reference: &[Vec3],
    radius: f64,
) -> Result<f64, TrajectoryError> {
    if !(radius > 0.0) {
        return Err(TrajectoryError::NonPositiveRadius(radius));
    }
    if pred.len() != reference.len() {
        return Err(TrajectoryError::LengthMismatch(pred.len(), reference.len()));
    }
    if pred.is_empty() {
        return Err(TrajectoryError::Empty);
    }
    let inside = pred
        .iter()
        .zip(reference)
        .filter(|(p, r)| (*p - *r).norm() <= radius)
        .count();
    Ok(inside as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LimitKind {
    Workspace,
    Velocity,
    Acceleration,
}

impl fmt::Display for LimitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LimitKind::Workspace => "workspace",
            LimitKind::Velocity => "velocity",
            LimitKind::Acceleration => "acceleration",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitViolation {
    pub kind: LimitKind,
    pub index: usize,
    /// Excess over the limit in m, m/s or m/s².
    pub magnitude: f64,
}

/// Checks a (resampled) trajectory against the workspace box and the
/// velocity and acceleration limits of `cfg`.
///
/// Velocity violations are reported at the later sample of each pair,
/// acceleration violations at the middle sample of each triple.
pub fn check_limits(traj: &Trajectory, cfg: &SafetyConfig) -> Vec<LimitViolation> {
    let wps = traj.waypoints();
    let mut out = Vec::new();
    for (i, w) in wps.iter().enumerate() {
        let d = cfg.workspace.distance_outside(&w.pos);
        if d > LIMIT_EPS {
            out.push(LimitViolation {
                kind: LimitKind::Workspace,
                index: i,
                magnitude: d,
            });
        }
    }
    let velocities: Vec<Vec3> = wps
        .windows(2)
        .map(|p| (p[1].pos - p[0].pos) / (p[1].t - p[0].t))
        .collect();
    for (i, v) in velocities.iter().enumerate() {
        let excess = v.norm() - cfg.v_max;
        if excess > LIMIT_EPS {
            out.push(LimitViolation {
                kind: LimitKind::Velocity,
                index: i + 1,
                magnitude: excess,
            });
        }
    }
    for i in 1..velocities.len() {
        let span = 0.5 * (wps[i + 1].t - wps[i - 1].t);
        let a = (velocities[i] - velocities[i - 1]) / span;
        let excess = a.norm() - cfg.a_max;
        if excess > LIMIT_EPS {
            out.push(LimitViolation {
                kind: LimitKind::Acceleration,
                index: i,
                magnitude: excess,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub(crate) struct WaypointRecord {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grip: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct TrajectoryFile {
    frame: String,
    #[serde(default)]
    dt_hint: Option<f64>,
    waypoints: Vec<WaypointRecord>,
}

impl From<&WaypointRecord> for Waypoint {
    fn from(r: &WaypointRecord) -> Self {
        Waypoint {
            t: r.t,
            pos: Vec3::new(r.x, r.y, r.z),
            grip: r.grip,
        }
    }
}

impl From<WaypointRecord> for Waypoint {
    fn from(r: WaypointRecord) -> Self {
        Waypoint::from(&r)
    }
}

impl From<Waypoint> for WaypointRecord {
    fn from(w: Waypoint) -> Self {
        WaypointRecord::from(&w)
    }
}

impl From<&Waypoint> for WaypointRecord {
    fn from(w: &Waypoint) -> Self {
        WaypointRecord {
            t: w.t,
            x: w.pos.x,
            y: w.pos.y,
            z: w.pos.z,
            grip: w.grip,
        }
    }
}

impl TryFrom<TrajectoryFile> for Trajectory {
    type Error = TrajectoryError;

    fn try_from(file: TrajectoryFile) -> Result<Self, Self::Error> {
        Self::with_frame(
            file.frame,
            file.waypoints.iter().map(Waypoint::from).collect(),
        )
    }
}

impl From<Trajectory> for TrajectoryFile {
    fn from(t: Trajectory) -> Self {
        TrajectoryFile {
            waypoints: t.waypoints.iter().map(WaypointRecord::from).collect(),
            frame: t.frame,
            dt_hint: None,
        }
    }
}

impl Trajectory {
    pub fn from_json_str(s: &str) -> Result<Self, TrajectoryError> {
        let file: TrajectoryFile =
            serde_json::from_str(s).map_err(|e| TrajectoryError::Format(e.to_string()))?;
        Self::with_frame(
            file.frame,
            file.waypoints.iter().map(Waypoint::from).collect(),
        )
    }

    pub fn to_json_value(&self, dt_hint: Option<f64>) -> serde_json::Value {
        let file = TrajectoryFile {
            frame: self.frame.clone(),
            dt_hint,
            waypoints: self.waypoints.iter().map(WaypointRecord::from).collect(),
        };
        serde_json::to_value(file).expect("trajectory serializes")
    }

    pub fn to_json_string(&self, dt_hint: Option<f64>) -> String {
        serde_json::to_string_pretty(&self.to_json_value(dt_hint)).expect("trajectory serializes")
    }

    /// Parses CSV with header `t,x,y,z` or `t,x,y,z,grip`.
    pub fn from_csv_str(s: &str) -> Result<Self, TrajectoryError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(s.as_bytes());
        let headers = rdr
            .headers()
            .map_err(|e| TrajectoryError::Format(e.to_string()))?
            .clone();
        let names: Vec<&str> = headers.iter().collect();
        if names != ["t", "x", "y", "z"] && names != ["t", "x", "y", "z", "grip"] {
            return Err(TrajectoryError::Format(format!(
                "expected header t,x,y,z[,grip], got {}",
                names.join(",")
            )));
        }
        let mut wps = Vec::new();
        for rec in rdr.deserialize::<WaypointRecord>() {
            let rec = rec.map_err(|e| TrajectoryError::Format(e.to_string()))?;
            wps.push(Waypoint::from(&rec));
        }
        Self::new(wps)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = if self.has_grip() {
            String::from("t,x,y,z,grip\n")
        } else {
            String::from("t,x,y,z\n")
        };
        for w in &self.waypoints {
            match w.grip {
                Some(g) => out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    w.t, w.pos.x, w.pos.y, w.pos.z, g
                )),
                None => out.push_str(&format!("{},{},{},{}\n", w.t, w.pos.x, w.pos.y, w.pos.z)),
            }
        }
        out
    }

    /// Loads a `.csv` or JSON trajectory file, chosen by extension.
    pub fn load(path: &Path) -> Result<Self, TrajectoryError> {
        let text = std::fs::read_to_string(path).map_err(|e| TrajectoryError::Io(e.to_string()))?;
        let is_csv = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if is_csv {
            Self::from_csv_str(&text)
        } else {
            Self::from_json_str(&text)
        }
    }
}
