//! Interactive imitation loop.
//!
//! The robot executes the current trajectory while the subject can press
//! stop. A stop labels the state that caused it `Bad`, every earlier state of
//! that pass `Acceptable`, and hands control to the expert. The expert
//! supplies a replacement for the rest of the movement starting at the last
//! acceptable state, and execution resumes from there. A pass that reaches
//! the end without a stop converges the session.
//!
//! [`SessionRunner`] is a steppable state machine so the same loop can be
//! driven by a scripted expert in batch or by a live operator over the HTTP
//! service.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{FitConfig, FitSample, Policy, PolicyError};
use crate::safety::{
    Cause, Command, Mode, SafetyConfig, SafetyError, SafetyMonitor, SafetyTransition,
};
use crate::subject::{normalized_depth, FeedbackKind, Subject, SubjectError, SubjectProfile};
use crate::trajectory::{
    band_fraction_positions, check_limits, rmse_positions, LimitViolation, Trajectory,
    TrajectoryError, Waypoint,
};
use crate::Vec3;

pub const DEFAULT_MAX_ITERS: usize = 20;
pub const DEFAULT_STALL_TIMEOUT_S: f64 = 10.0;
pub const DEFAULT_GAMMA: f64 = 0.8;
pub const DEFAULT_BLEND_S: f64 = 0.5;
pub const DEFAULT_BAND_RADIUS_M: f64 = 0.02;

/// Times closer than this are the same instant.
const TIME_EPS: f64 = 1e-9;
/// Allowed gap between an adjustment's first point and the anchor state.
const ANCHOR_TOL_M: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Acceptable,
    Bad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledState {
    pub iter: usize,
    /// Session time, seconds.
    pub t: f64,
    /// Time along the commanded trajectory.
    pub tau: f64,
    pub pos: Vec3,
    pub grip: Option<f64>,
    pub label: Label,
    pub force_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub index: usize,
    /// Trajectory commanded during this pass.
    pub trajectory: Trajectory,
    pub trace: Vec<LabeledState>,
    /// Index into `trace` of the state the subject stopped at.
    pub stop_index: Option<usize>,
    /// Expert replacement for the remainder, starting at the anchor state.
    pub adjustment: Option<Trajectory>,
    /// Reached the end of the trajectory.
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub subject_id: String,
    pub dt: f64,
    /// Duration of the final trajectory.
    pub duration: f64,
    pub iterations: Vec<Iteration>,
    pub converged: bool,
}

#[derive(Serialize)]
struct DatasetRecord {
    iter: usize,
    t: f64,
    tau: f64,
    x: f64,
    y: f64,
    z: f64,
    grip: Option<f64>,
    label: Label,
    force_n: f64,
}

impl DemoDataset {
    pub fn states(&self) -> impl Iterator<Item = &LabeledState> {
        self.iterations.iter().flat_map(|i| i.trace.iter())
    }

    pub fn adjustments(&self) -> usize {
        self.iterations
            .iter()
            .filter(|i| i.adjustment.is_some())
            .count()
    }

    pub fn stops(&self) -> usize {
        self.iterations
            .iter()
            .filter(|i| i.stop_index.is_some())
            .count()
    }

    /// One JSON object per labeled state.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in self.states() {
            let rec = DatasetRecord {
                iter: s.iter,
                t: s.t,
                tau: s.tau,
                x: s.pos.x,
                y: s.pos.y,
                z: s.pos.z,
                grip: s.grip,
                label: s.label,
                force_n: s.force_n,
            };
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&rec).expect("record serializes")
            );
        }
        out
    }

    /// Checks the labeling rules: a stopped pass ends in exactly one `Bad`
    /// state, unstopped passes have none, and every stop but a trailing one
    /// was answered by an adjustment.
    pub fn check_labels(&self) -> Result<(), String> {
        let last = self.iterations.len().saturating_sub(1);
        for (n, it) in self.iterations.iter().enumerate() {
            let bad: Vec<usize> = it
                .trace
                .iter()
                .enumerate()
                .filter(|(_, s)| s.label == Label::Bad)
                .map(|(i, _)| i)
                .collect();
            match it.stop_index {
                Some(k) => {
                    if bad != [k] || k + 1 != it.trace.len() {
                        return Err(format!(
                            "iteration {}: bad states {bad:?}, stop {k}",
                            it.index
                        ));
                    }
                    if it.adjustment.is_none() && n != last {
                        return Err(format!("iteration {}: stop without adjustment", it.index));
                    }
                }
                None => {
                    if !bad.is_empty() || it.adjustment.is_some() {
                        return Err(format!(
                            "iteration {}: unexpected label or adjustment",
                            it.index
                        ));
                    }
                }
            }
            if it.trace.iter().any(|s| s.iter != it.index) {
                return Err(format!(
                    "iteration {}: state tagged with another pass",
                    it.index
                ));
            }
        }
        if self.converged
            && self
                .iterations
                .last()
                .is_some_and(|i| i.stop_index.is_some())
        {
            return Err("converged dataset ends with a stop".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ImitationError {
    #[error("initial trajectory violates safety limits ({} violations)", .0.len())]
    InitialLimits(Vec<LimitViolation>),
    #[error("adjustment rejected: {reason}")]
    AdjustmentRejected {
        reason: String,
        violations: Vec<LimitViolation>,
    },
    #[error("no adjustment is pending")]
    NoPendingAdjustment,
    #[error("session finished")]
    Finished,
    #[error("session aborted at t={t}: {reason}")]
    Aborted {
        t: f64,
        reason: AbortReason,
        outcome: Box<SessionOutcome>,
    },
    #[error("dataset has not converged")]
    NotConverged,
    #[error("held-out trajectory does not match the policy grid: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Subject(#[from] SubjectError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AbortReason {
    EmergencyStop { cause: Cause },
    Stalled,
    OperatorReset,
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AbortReason::EmergencyStop { cause } => write!(f, "emergency stop ({cause:?})"),
            AbortReason::Stalled => f.write_str("stalled at zero speed"),
            AbortReason::OperatorReset => f.write_str("reset by operator"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Converged,
    Unconverged,
    Aborted { reason: AbortReason },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandSource {
    Runner,
    Subject,
    Operator,
    Scheduler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Transition(SafetyTransition),
    Command {
        t: f64,
        command: Command,
        source: CommandSource,
        accepted: bool,
    },
    Feedback {
        t: f64,
        iter: usize,
        sample_index: usize,
        kind: FeedbackKind,
    },
    Adjustment {
        t: f64,
        iter: usize,
        anchor_tau: f64,
        accepted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    IterationEnd {
        t: f64,
        iter: usize,
        stopped: bool,
        completed: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub dt: f64,
    pub max_iters: usize,
    /// `None` ends the session at convergence; `Some(n)` keeps repeating the
    /// converged movement until `n` training intervals have run.
    pub intervals: Option<u32>,
    pub stall_timeout_s: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            dt: crate::DEFAULT_DT,
            max_iters: DEFAULT_MAX_ITERS,
            intervals: None,
            stall_timeout_s: DEFAULT_STALL_TIMEOUT_S,
        }
    }
}

/// What the expert is asked to replace after a stop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRequest {
    pub iter: usize,
    pub t: f64,
    pub bad: LabeledState,
    /// Last acceptable state (or the trajectory start); `anchor.t` is its
    /// trajectory time.
    pub anchor: Waypoint,
    /// The full trajectory currently commanded.
    pub trajectory: Trajectory,
}

impl AdjustmentRequest {
    /// The commanded trajectory from the anchor on.
    pub fn remaining(&self) -> Trajectory {
        tail_from(&self.trajectory, self.anchor.t)
    }
}

/// `traj` from time `t` onward, starting with the interpolated state at `t`.
pub fn tail_from(traj: &Trajectory, t: f64) -> Trajectory {
    let first = traj.sample(t);
    let mut wps = vec![first];
    wps.extend(
        traj.waypoints()
            .iter()
            .filter(|w| w.t > t + TIME_EPS)
            .copied(),
    );
    if wps.len() < 2 {
        let mut end = *traj.last();
        end.t = t + TIME_EPS.max(end.t - t) * 2.0;
        wps.push(end);
    }
    Trajectory::with_frame(traj.frame(), wps).expect("tail is increasing")
}

/// Replaces `traj` from `adjusted.start_time()` on with `adjusted`.
pub fn splice(traj: &Trajectory, adjusted: &Trajectory) -> Trajectory {
    let cut = adjusted.start_time();
    let mut wps: Vec<Waypoint> = traj
        .waypoints()
        .iter()
        .filter(|w| w.t < cut - TIME_EPS)
        .copied()
        .collect();
    wps.extend_from_slice(adjusted.waypoints());
    Trajectory::with_frame(traj.frame(), wps).expect("splice is increasing")
}

fn quintic_smoothstep(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Contracts `remaining` toward `center`: the contraction factor eases from 1
/// at the first waypoint to `gamma` after `blend_s` seconds.
pub fn expert_adjust(
    remaining: &Trajectory,
    center: &Vec3,
    gamma: f64,
    blend_s: f64,
) -> Trajectory {
    let t0 = remaining.start_time();
    remaining.map_positions(|w| {
        let lambda = 1.0 - (1.0 - gamma) * quintic_smoothstep((w.t - t0) / blend_s);
        w.pos + (w.pos - center) * (lambda - 1.0)
    })
}

pub trait ExpertModel {
    fn adjust(
        &mut self,
        req: &AdjustmentRequest,
        cfg: &SafetyConfig,
        dt: f64,
    ) -> Result<Trajectory, ImitationError>;
}

/// Expert that pulls the rest of the movement toward its estimate of the
/// subject's range-of-motion center. Longer blends are tried until the
/// spliced trajectory respects the safety limits.
#[derive(Debug, Clone)]
pub struct ScriptedExpert {
    pub rom_center: Vec3,
    pub gamma: f64,
    pub blend_s: f64,
    pub max_blend_s: f64,
}

impl ScriptedExpert {
    pub fn new(rom_center: Vec3) -> Self {
        Self {
            rom_center,
            gamma: DEFAULT_GAMMA,
            blend_s: DEFAULT_BLEND_S,
            max_blend_s: 16.0,
        }
    }

    pub fn from_profile(p: &SubjectProfile) -> Self {
        Self::new(p.rom_center)
    }
}

impl ExpertModel for ScriptedExpert {
    fn adjust(
        &mut self,
        req: &AdjustmentRequest,
        cfg: &SafetyConfig,
        dt: f64,
    ) -> Result<Trajectory, ImitationError> {
        let remaining = req.remaining();
        let mut blend = self.blend_s;
        let mut last = Vec::new();
        while blend <= self.max_blend_s + TIME_EPS {
            let adj = expert_adjust(&remaining, &self.rom_center, self.gamma, blend);
            let viol = check_limits(&splice(&req.trajectory, &adj).resample(dt)?, cfg);
            if viol.is_empty() {
                return Ok(adj);
            }
            last = viol;
            blend *= 2.0;
        }
        Err(ImitationError::AdjustmentRejected {
            reason: "no blend length keeps the adjustment within limits".into(),
            violations: last,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Starting,
    Executing,
    AwaitingAdjustment,
    Finishing,
    Finished,
}

/// Per-tick telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: u64,
    pub t: f64,
    pub iter: usize,
    pub tau: f64,
    pub pos: Vec3,
    pub grip: Option<f64>,
    pub force_n: f64,
    pub depth: f64,
    pub mode: Mode,
    pub speed_scale: f64,
    pub phase: Phase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub status: SessionStatus,
    pub dataset: DemoDataset,
    pub final_trajectory: Trajectory,
    pub events: Vec<SessionEvent>,
    pub transitions: Vec<SafetyTransition>,
    pub ticks: u64,
    pub dt: f64,
}

#[derive(Debug, Clone)]
pub struct SessionRunner {
    cfg: SessionConfig,
    monitor: SafetyMonitor,
    subject: Subject,
    current: Trajectory,
    tick: u64,
    tau: f64,
    iter: usize,
    iter_traj: Trajectory,
    trace: Vec<LabeledState>,
    iterations: Vec<Iteration>,
    events: Vec<SessionEvent>,
    phase: Phase,
    status: SessionStatus,
    pending: Option<AdjustmentRequest>,
    resume_queued: bool,
    operator: VecDeque<Command>,
    converged: bool,
    zero_speed_s: f64,
    last_report: Option<TickReport>,
}

impl SessionRunner {
    pub fn new(
        initial: Trajectory,
        subject: Subject,
        monitor: SafetyMonitor,
        cfg: SessionConfig,
    ) -> Result<Self, ImitationError> {
        let viol = check_limits(&initial.resample(cfg.dt)?, monitor.config());
        if !viol.is_empty() {
            return Err(ImitationError::InitialLimits(viol));
        }
        let initial = initial.shifted_in_time(-initial.start_time())?;
        Ok(Self {
            cfg,
            monitor,
            subject,
            iter_traj: initial.clone(),
            current: initial,
            tick: 0,
            tau: 0.0,
            iter: 0,
            trace: Vec::new(),
            iterations: Vec::new(),
            events: Vec::new(),
            phase: Phase::Starting,
            status: SessionStatus::Running,
            pending: None,
            resume_queued: false,
            operator: VecDeque::new(),
            converged: false,
            zero_speed_s: 0.0,
            last_report: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn safety(&self) -> &SafetyMonitor {
        &self.monitor
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    pub fn current_trajectory(&self) -> &Trajectory {
        &self.current
    }

    pub fn iterations(&self) -> &[Iteration] {
        &self.iterations
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn pending_adjustment(&self) -> Option<&AdjustmentRequest> {
        self.pending.as_ref()
    }

    pub fn last_report(&self) -> Option<&TickReport> {
        self.last_report.as_ref()
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.dt
    }

    /// Queues an operator command for the next tick. `Resume` while an
    /// adjustment is pending resumes the unchanged trajectory.
    pub fn push_command(&mut self, cmd: Command) -> Result<(), ImitationError> {
        if self.is_finished() {
            return Err(ImitationError::Finished);
        }
        if cmd == Command::Resume && self.pending.is_some() {
            let remaining = self.pending.as_ref().expect("checked").remaining();
            return self.submit_adjustment(remaining);
        }
        self.operator.push_back(cmd);
        Ok(())
    }

    /// Logs an adjustment refused before it reached [`Self::submit_adjustment`].
    pub fn log_rejected_adjustment(&mut self, reason: &str) -> Result<(), ImitationError> {
        let req = self
            .pending
            .as_ref()
            .ok_or(ImitationError::NoPendingAdjustment)?;
        let (iter, anchor_tau) = (req.iter, req.anchor.t);
        self.events.push(SessionEvent::Adjustment {
            t: self.time(),
            iter,
            anchor_tau,
            accepted: false,
            reason: Some(reason.to_string()),
        });
        Ok(())
    }

    /// Validates an adjustment against the pending stop and the safety
    /// limits, splices it in and queues the resume.
    pub fn submit_adjustment(&mut self, adjusted: Trajectory) -> Result<(), ImitationError> {
        let req = self
            .pending
            .clone()
            .ok_or(ImitationError::NoPendingAdjustment)?;
        let t = self.time();
        match self.validate_adjustment(&req, adjusted) {
            Ok((adj, spliced)) => {
                self.events.push(SessionEvent::Adjustment {
                    t,
                    iter: req.iter,
                    anchor_tau: req.anchor.t,
                    accepted: true,
                    reason: None,
                });
                let stopped = self.iterations.last_mut().expect("stopped pass recorded");
                stopped.adjustment = Some(adj);
                self.current = spliced;
                self.pending = None;
                self.begin_iteration(req.anchor.t);
                self.subject.rearm();
                self.resume_queued = true;
                self.phase = Phase::Executing;
                Ok(())
            }
            Err(e) => {
                let reason = e.to_string();
                self.events.push(SessionEvent::Adjustment {
                    t,
                    iter: req.iter,
                    anchor_tau: req.anchor.t,
                    accepted: false,
                    reason: Some(reason),
                });
                Err(e)
            }
        }
    }

    fn validate_adjustment(
        &self,
        req: &AdjustmentRequest,
        adjusted: Trajectory,
    ) -> Result<(Trajectory, Trajectory), ImitationError> {
        let reject = |reason: &str| ImitationError::AdjustmentRejected {
            reason: reason.to_string(),
            violations: Vec::new(),
        };
        if adjusted.frame() != self.current.frame() {
            return Err(reject("frame differs from the session frame"));
        }
        if adjusted.has_grip() != self.current.has_grip() {
            return Err(reject(
                "grip channel presence differs from the session trajectory",
            ));
        }
        let adj = adjusted.shifted_in_time(req.anchor.t - adjusted.start_time())?;
        if (adj.first().pos - req.anchor.pos).norm() > ANCHOR_TOL_M {
            return Err(reject(
                "adjustment does not start at the last acceptable state",
            ));
        }
        let spliced = splice(&self.current, &adj);
        let violations = check_limits(&spliced.resample(self.cfg.dt)?, self.monitor.config());
        if !violations.is_empty() {
            return Err(ImitationError::AdjustmentRejected {
                reason: format!("{} safety limit violations", violations.len()),
                violations,
            });
        }
        Ok((adj, spliced))
    }

    fn begin_iteration(&mut self, tau: f64) {
        self.iter = self.iterations.len();
        self.iter_traj = self.current.clone();
        self.trace.clear();
        self.tau = tau;
        self.zero_speed_s = 0.0;
    }

    fn close_iteration(&mut self, t: f64, stop_index: Option<usize>, completed: bool) {
        self.events.push(SessionEvent::IterationEnd {
            t,
            iter: self.iter,
            stopped: stop_index.is_some(),
            completed,
        });
        self.iterations.push(Iteration {
            index: self.iter,
            trajectory: self.iter_traj.clone(),
            trace: std::mem::take(&mut self.trace),
            stop_index,
            adjustment: None,
            completed,
        });
    }

    fn record(&mut self, t: f64, wp: &Waypoint, force_n: f64, label: Label) {
        self.trace.push(LabeledState {
            iter: self.iter,
            t,
            tau: self.tau,
            pos: wp.pos,
            grip: wp.grip,
            label,
            force_n,
        });
    }

    fn finish(&mut self, status: SessionStatus) {
        self.status = status;
        self.phase = Phase::Finished;
    }

    fn converged_status(&self) -> SessionStatus {
        if self.converged {
            SessionStatus::Converged
        } else {
            SessionStatus::Unconverged
        }
    }

    /// Advances the session by one tick.
    pub fn step(&mut self) -> Result<TickReport, ImitationError> {
        if self.is_finished() {
            return Err(ImitationError::Finished);
        }
        let dt = self.cfg.dt;
        let t = self.time();
        let wp = self.current.sample(self.tau);
        let pos = wp.pos;
        let force = self.subject.sense(&pos, t);
        let force_n = force.magnitude();
        let pre_mode = self.monitor.mode();

        let mut cmd: Option<(Command, CommandSource)> = None;
        let plan_end = self.cfg.intervals.is_some_and(|n| {
            self.monitor.state().intervals_completed + 1 >= n
                && self.monitor.state().interval_due(t, self.monitor.config())
        });
        let mut feedback = None;
        if plan_end {
            cmd = Some((Command::Reset, CommandSource::Scheduler));
        } else if self.phase == Phase::Executing && pre_mode == Mode::Running {
            feedback = self
                .subject
                .feedback_step(&pos, &force, t, self.trace.len())?;
            if let Some(ev) = feedback {
                self.events.push(SessionEvent::Feedback {
                    t,
                    iter: self.iter,
                    sample_index: ev.sample_index,
                    kind: ev.kind,
                });
                if ev.kind == FeedbackKind::Stop {
                    cmd = Some((Command::Stop, CommandSource::Subject));
                }
            }
        }
        if cmd.is_none() {
            cmd = match self.phase {
                Phase::Starting => Some((Command::Start, CommandSource::Runner)),
                Phase::Finishing => Some((Command::Reset, CommandSource::Runner)),
                _ if self.resume_queued => {
                    self.resume_queued = false;
                    Some((Command::Resume, CommandSource::Runner))
                }
                _ => self
                    .operator
                    .pop_front()
                    .map(|c| (c, CommandSource::Operator)),
            };
        }

        let result = self.monitor.tick(&force, cmd.map(|c| c.0), &pos, t);
        let accepted = match result {
            Ok(tr) => {
                if let Some(tr) = tr {
                    self.events.push(SessionEvent::Transition(tr));
                }
                true
            }
            Err(SafetyError::RejectedInEmergency(_)) => false,
            Err(e) => return Err(e.into()),
        };
        if let Some((command, source)) = cmd {
            self.events.push(SessionEvent::Command {
                t,
                command,
                source,
                accepted,
            });
        }

        let mode = self.monitor.mode();
        let speed_scale = self.monitor.state().speed_scale;
        match mode {
            Mode::EmergencyStop => {
                let cause = self
                    .monitor
                    .log()
                    .last()
                    .map_or(Cause::Force, |tr| tr.cause);
                if !self.trace.is_empty() {
                    self.close_iteration(t, None, false);
                }
                self.finish(SessionStatus::Aborted {
                    reason: AbortReason::EmergencyStop { cause },
                });
            }
            Mode::Idle if self.phase == Phase::Finishing => {
                let s = self.status;
                self.finish(s);
            }
            Mode::Idle if pre_mode != Mode::Idle => {
                if !self.trace.is_empty() {
                    self.close_iteration(t, None, false);
                }
                if plan_end {
                    let s = self.converged_status();
                    self.finish(s);
                } else {
                    self.finish(SessionStatus::Aborted {
                        reason: AbortReason::OperatorReset,
                    });
                }
            }
            Mode::Running if matches!(self.phase, Phase::Starting | Phase::Executing) => {
                self.phase = Phase::Executing;
                self.record(t, &wp, force_n, Label::Acceptable);
                if self.tau >= self.current.end_time() - TIME_EPS {
                    self.close_iteration(t, None, true);
                    self.converged = true;
                    if self.cfg.intervals.is_some() {
                        self.begin_iteration(0.0);
                    } else {
                        self.status = SessionStatus::Converged;
                        self.phase = Phase::Finishing;
                    }
                } else {
                    self.tau = (self.tau + dt * speed_scale).min(self.current.end_time());
                    if speed_scale <= 0.0 {
                        self.zero_speed_s += dt;
                        if self.zero_speed_s >= self.cfg.stall_timeout_s - TIME_EPS {
                            self.close_iteration(t, None, false);
                            self.finish(SessionStatus::Aborted {
                                reason: AbortReason::Stalled,
                            });
                        }
                    } else {
                        self.zero_speed_s = 0.0;
                    }
                }
            }
            Mode::SoftHold if pre_mode == Mode::Running && self.phase == Phase::Executing => {
                self.record(t, &wp, force_n, Label::Bad);
                let k = self.trace.len() - 1;
                let bad = self.trace[k];
                let anchor = if k > 0 {
                    let a = self.trace[k - 1];
                    Waypoint {
                        t: a.tau,
                        pos: a.pos,
                        grip: a.grip,
                    }
                } else {
                    let mut w = self.current.sample(self.tau);
                    w.t = self.tau;
                    w
                };
                self.close_iteration(t, Some(k), false);
                if !self.converged && self.iterations.len() >= self.cfg.max_iters {
                    self.status = SessionStatus::Unconverged;
                    self.phase = Phase::Finishing;
                } else {
                    self.pending = Some(AdjustmentRequest {
                        iter: self.iter,
                        t,
                        bad,
                        anchor,
                        trajectory: self.current.clone(),
                    });
                    self.phase = Phase::AwaitingAdjustment;
                }
            }
            _ => {}
        }

        let report = TickReport {
            tick: self.tick,
            t,
            iter: self.iter,
            tau: self.tau,
            pos,
            grip: wp.grip,
            force_n,
            depth: normalized_depth(&pos, self.subject.profile()),
            mode,
            speed_scale,
            phase: self.phase,
            feedback: feedback.map(|f| f.kind),
        };
        self.tick += 1;
        self.last_report = Some(report.clone());
        Ok(report)
    }

    pub fn outcome(&self) -> SessionOutcome {
        let mut iterations = self.iterations.clone();
        if !self.is_finished() && !self.trace.is_empty() {
            iterations.push(Iteration {
                index: self.iter,
                trajectory: self.iter_traj.clone(),
                trace: self.trace.clone(),
                stop_index: None,
                adjustment: None,
                completed: false,
            });
        }
        SessionOutcome {
            status: self.status,
            dataset: DemoDataset {
                subject_id: self.subject.profile().subject_id.clone(),
                dt: self.cfg.dt,
                duration: self.current.end_time(),
                iterations,
                converged: self.converged,
            },
            final_trajectory: self.current.clone(),
            events: self.events.clone(),
            transitions: self.monitor.log().to_vec(),
            ticks: self.tick,
            dt: self.cfg.dt,
        }
    }

    /// Runs to completion, answering every stop with `expert`.
    pub fn run(&mut self, expert: &mut dyn ExpertModel) -> Result<SessionOutcome, ImitationError> {
        while !self.is_finished() {
            self.step()?;
            if let Some(req) = self.pending.clone() {
                let adj = expert.adjust(&req, self.monitor.config(), self.cfg.dt)?;
                self.submit_adjustment(adj)?;
            }
        }
        let outcome = self.outcome();
        if let SessionStatus::Aborted { reason } = outcome.status {
            return Err(ImitationError::Aborted {
                t: self.time() - self.cfg.dt,
                reason,
                outcome: Box::new(outcome),
            });
        }
        Ok(outcome)
    }
}

/// Batch session: scripted subject, scripted expert.
pub fn run_session(
    expert: &mut dyn ExpertModel,
    subject: Subject,
    monitor: SafetyMonitor,
    initial: Trajectory,
    cfg: SessionConfig,
) -> Result<SessionOutcome, ImitationError> {
    SessionRunner::new(initial, subject, monitor, cfg)?.run(expert)
}

/// Fits a policy to a converged dataset. Samples from passes without a stop
/// carry `cfg.final_pass_weight`, acceptable samples from stopped passes
/// weight one, bad samples are excluded.
pub fn train_policy(dataset: &DemoDataset, cfg: &FitConfig) -> Result<Policy, ImitationError> {
    if !dataset.converged
        || dataset
            .iterations
            .last()
            .is_none_or(|i| i.stop_index.is_some())
    {
        return Err(ImitationError::NotConverged);
    }
    let samples: Vec<FitSample> = dataset
        .iterations
        .iter()
        .flat_map(|it| {
            let w = if it.stop_index.is_none() {
                cfg.final_pass_weight
            } else {
                1.0
            };
            it.trace
                .iter()
                .filter(|s| s.label == Label::Acceptable)
                .map(move |s| FitSample {
                    tau: s.tau,
                    pos: s.pos,
                    grip: s.grip,
                    weight: w,
                })
        })
        .collect();
    Ok(Policy::fit(
        &samples,
        dataset.duration,
        dataset.dt,
        cfg,
        &dataset.subject_id,
        dataset.iterations.len(),
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rmse: f64,
    pub band_radius: f64,
    pub band_fraction: f64,
    pub samples: usize,
}

/// Compares a policy rollout with a held-out expert trajectory on the
/// policy's tick grid.
pub fn evaluate(
    policy: &Policy,
    held_out: &Trajectory,
    band_radius: f64,
) -> Result<Evaluation, ImitationError> {
    if (held_out.duration() - policy.duration).abs() > 1e-6 {
        return Err(ImitationError::GridMismatch(format!(
            "held-out lasts {} s, policy {} s",
            held_out.duration(),
            policy.duration
        )));
    }
    let reference = held_out.resample(policy.dt)?;
    let t0 = held_out.start_time();
    let pred: Vec<Vec3> = reference
        .waypoints()
        .iter()
        .map(|w| policy.position(w.t - t0))
        .collect();
    let truth: Vec<Vec3> = reference.positions().collect();
    if pred.len() != policy.rollout().len() {
        return Err(ImitationError::GridMismatch(format!(
            "{} held-out samples vs {} policy ticks",
            pred.len(),
            policy.rollout().len()
        )));
    }
    Ok(Evaluation {
        rmse: rmse_positions(&pred, &truth)?,
        band_radius,
        band_fraction: band_fraction_positions(&pred, &truth, band_radius)?,
        samples: pred.len(),
    })
}

/// A fresh demonstration of `base`: the same movement plus a smooth seeded
/// deviation that vanishes at both ends.
pub fn expert_demonstration(base: &Trajectory, sigma: f64, seed: u64) -> Trajectory {
    const HARMONICS: usize = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coef = [[0.0; 3]; HARMONICS];
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        for c in coef.iter_mut() {
            for v in c.iter_mut() {
                *v = n.sample(&mut rng);
            }
        }
    }
    let t0 = base.start_time();
    let d = base.duration();
    base.map_positions(|w| {
        let mut off = Vec3::zeros();
        for (j, c) in coef.iter().enumerate() {
            let s = (std::f64::consts::PI * (j + 1) as f64 * (w.t - t0) / d).sin();
            off += Vec3::new(c[0], c[1], c[2]) * s;
        }
        w.pos + off
    })
}
