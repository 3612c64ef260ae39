//! Session orchestration and persistence.
//!
//! A session directory holds:
//!
//! | file                     | content                                   |
//! |--------------------------|-------------------------------------------|
//! | `session.json`           | [`SessionRecord`]: metadata, events, survey |
//! | `dataset.jsonl`          | one labeled state per line                |
//! | `transitions.jsonl`      | safety mode transitions                   |
//! | `final_trajectory.json`  | trajectory after the last adjustment      |
//! | `perception.jsonl`       | grip-site observations used for the start |
//! | `policy.json`            | trained policy (converged sessions only)  |
//! | `held_out_expert.json`   | held-out demonstration used for scoring   |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imitation::{
    evaluate, expert_demonstration, train_policy, Evaluation, ImitationError, ScriptedExpert,
    SessionConfig, SessionEvent, SessionOutcome, SessionRunner, SessionStatus,
    DEFAULT_BAND_RADIUS_M,
};
use crate::perception::{
    write_jsonl, GripSiteLocator, GripSiteObservation, StartPointSelector,
    DEFAULT_CONFIDENCE_THRESHOLD,
};
use crate::policy::{FitConfig, Policy};
use crate::safety::{
    stage_defaults, transitions_to_jsonl, Cause, Command, SafetyConfig, SafetyError, SafetyMonitor,
    SafetyTransition,
};
use crate::subject::{ForceReading, Subject, SubjectError, SubjectProfile};
use crate::task::{fit_to_stage, scale_amplitude, TaskError, TaskKind, TaskScript};
use crate::trajectory::{Trajectory, TrajectoryError};
use crate::Vec3;

pub const DEFAULT_PERCEPTION_SIGMA_M: f64 = 0.002;
pub const DEFAULT_DEMO_SIGMA_M: f64 = 0.0045;
/// Workspace clearance kept when fitting a task into a stage, meters.
const STAGE_MARGIN_M: f64 = 0.02;
const PERCEPTION_FRAMES: usize = 10;
/// Seed offset separating the held-out demonstration from everything else.
const DEMO_SEED_SALT: u64 = 0x5eed_0001;

pub const SURVEY_MIN: u8 = 1;
pub const SURVEY_MAX: u8 = 10;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Safety(#[from] SafetyError),
    #[error(transparent)]
    Subject(#[from] SubjectError),
    #[error(transparent)]
    Imitation(#[from] ImitationError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("survey value {0} outside {SURVEY_MIN}..={SURVEY_MAX}")]
    SurveyRange(i64),
    #[error("io: {0}")]
    Io(String),
    #[error("session file: {0}")]
    Format(String),
}

fn io_err(e: std::io::Error) -> SessionError {
    SessionError::Io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSessionOptions {
    pub task: TaskKind,
    pub stage: u8,
    pub seed: u64,
    /// Movement amplitude relative to the scripted task.
    pub amplitude: f64,
    pub perception_sigma: f64,
    pub demo_sigma: f64,
    pub band_radius: f64,
    pub session: SessionConfig,
    pub fit: FitConfig,
}

impl ScriptedSessionOptions {
    pub fn new(task: TaskKind, stage: u8, seed: u64) -> Self {
        Self {
            task,
            stage,
            seed,
            amplitude: 1.0,
            perception_sigma: DEFAULT_PERCEPTION_SIGMA_M,
            demo_sigma: DEFAULT_DEMO_SIGMA_M,
            band_radius: DEFAULT_BAND_RADIUS_M,
            session: SessionConfig::default(),
            fit: FitConfig::default(),
        }
    }

    pub fn session_id(&self) -> String {
        format!(
            "{}-stage{}-seed{}",
            self.task.short_name(),
            self.stage,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyEntry {
    pub question: String,
    pub value: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub subject_id: String,
    pub task_id: String,
    pub task: TaskKind,
    pub safety_stage: u8,
    pub seed: u64,
    /// Wall-clock start, seconds since the Unix epoch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at_unix: Option<f64>,
    pub dt: f64,
    pub ticks: u64,
    pub status: SessionStatus,
    pub converged: bool,
    pub iterations: usize,
    pub adjustments: usize,
    pub start_point: Vec3,
    pub perception_updated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
    pub events: Vec<SessionEvent>,
    #[serde(default)]
    pub survey: Vec<SurveyEntry>,
}

impl SessionRecord {
    /// Appends a survey answer; an answer to a question already asked
    /// supersedes the earlier one without removing it.
    pub fn add_survey(&mut self, question: &str, value: i64) -> Result<usize, SessionError> {
        if !(SURVEY_MIN as i64..=SURVEY_MAX as i64).contains(&value) {
            return Err(SessionError::SurveyRange(value));
        }
        let supersedes = self.survey.iter().rposition(|e| e.question == question);
        self.survey.push(SurveyEntry {
            question: question.to_string(),
            value: value as u8,
            supersedes,
        });
        Ok(self.survey.len() - 1)
    }

    /// Latest answer per question.
    pub fn current_survey(&self) -> BTreeMap<String, u8> {
        self.survey
            .iter()
            .map(|e| (e.question.clone(), e.value))
            .collect()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn load(dir: &Path) -> Result<Self, SessionError> {
        let s = std::fs::read_to_string(dir.join("session.json")).map_err(io_err)?;
        serde_json::from_str(&s).map_err(|e| SessionError::Format(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct SessionArtifacts {
    pub record: SessionRecord,
    pub outcome: SessionOutcome,
    pub observations: Vec<GripSiteObservation>,
    pub policy: Option<Policy>,
    pub held_out: Option<Trajectory>,
}

/// The task trajectory scaled to `amplitude` and fitted into the stage.
pub fn prepare_task_trajectory(
    task: &TaskScript,
    cfg: &SafetyConfig,
    amplitude: f64,
    dt: f64,
) -> Result<Trajectory, SessionError> {
    let mut tr = task.trajectory();
    if amplitude != 1.0 {
        tr = scale_amplitude(&tr, amplitude);
    }
    Ok(fit_to_stage(&tr, cfg, STAGE_MARGIN_M, dt)?)
}

/// Start point from a short burst of synthetic grip-site observations.
pub fn locate_start(
    nominal: Vec3,
    sigma: f64,
    seed: u64,
    dt: f64,
) -> (Vec3, bool, Vec<GripSiteObservation>) {
    let mut loc = GripSiteLocator::new(seed);
    let mut sel = StartPointSelector::new(nominal, DEFAULT_CONFIDENCE_THRESHOLD);
    let obs: Vec<GripSiteObservation> = (0..PERCEPTION_FRAMES)
        .map(|i| loc.locate(&nominal, sigma, false, i as f64 * dt))
        .collect();
    for o in &obs {
        sel.observe(o);
    }
    (sel.start_point(), sel.updated(), obs)
}

/// Everything needed to drive a session tick by tick.
#[derive(Debug, Clone)]
pub struct SessionSetup {
    pub runner: SessionRunner,
    pub task_id: String,
    pub start_point: Vec3,
    pub perception_updated: bool,
    pub observations: Vec<GripSiteObservation>,
}

/// Fits the task into the stage, locates the start point and builds the runner.
pub fn prepare_session(
    profile: &SubjectProfile,
    opts: &ScriptedSessionOptions,
) -> Result<SessionSetup, SessionError> {
    let cfg = stage_defaults(opts.stage)?;
    let task = TaskScript::builtin(opts.task);
    let dt = opts.session.dt;
    let base = prepare_task_trajectory(&task, &cfg, opts.amplitude, dt)?;
    let nominal = base.first().pos;
    let (start, updated, observations) =
        locate_start(nominal, opts.perception_sigma, opts.seed, dt);
    let initial = base.translated(&(start - nominal));

    let mut subject_profile = profile.clone();
    subject_profile.seed = profile.seed.wrapping_add(opts.seed);
    let subject = Subject::new(subject_profile)?;
    let monitor = SafetyMonitor::new(cfg)?;
    let runner = SessionRunner::new(initial, subject, monitor, opts.session)?;
    Ok(SessionSetup {
        runner,
        task_id: task.id,
        start_point: start,
        perception_updated: updated,
        observations,
    })
}

/// Trains and scores the policy (converged sessions only) and assembles the record.
pub fn finalize_session(
    profile: &SubjectProfile,
    opts: &ScriptedSessionOptions,
    setup: &SessionSetup,
    outcome: SessionOutcome,
) -> Result<SessionArtifacts, SessionError> {
    let (policy, held_out, evaluation) = if outcome.status == SessionStatus::Converged {
        let policy = train_policy(&outcome.dataset, &opts.fit)?;
        let held_out = expert_demonstration(
            &outcome.final_trajectory,
            opts.demo_sigma,
            opts.seed ^ DEMO_SEED_SALT,
        );
        let ev = evaluate(&policy, &held_out, opts.band_radius)?;
        (Some(policy), Some(held_out), Some(ev))
    } else {
        (None, None, None)
    };

    let record = SessionRecord {
        session_id: opts.session_id(),
        subject_id: profile.subject_id.clone(),
        task_id: setup.task_id.clone(),
        task: opts.task,
        safety_stage: opts.stage,
        seed: opts.seed,
        started_at_unix: None,
        dt: opts.session.dt,
        ticks: outcome.ticks,
        status: outcome.status,
        converged: outcome.dataset.converged,
        iterations: outcome.dataset.iterations.len(),
        adjustments: outcome.dataset.adjustments(),
        start_point: setup.start_point,
        perception_updated: setup.perception_updated,
        evaluation,
        events: outcome.events.clone(),
        survey: Vec::new(),
    };
    Ok(SessionArtifacts {
        record,
        outcome,
        observations: setup.observations.clone(),
        policy,
        held_out,
    })
}

/// Runs a complete scripted session: the subject model plays the subject,
/// [`ScriptedExpert`] plays the expert. Aborted sessions are returned with
/// their partial outcome rather than as an error.
pub fn run_scripted_session(
    profile: &SubjectProfile,
    opts: &ScriptedSessionOptions,
) -> Result<SessionArtifacts, SessionError> {
    let mut setup = prepare_session(profile, opts)?;
    let mut expert = ScriptedExpert::from_profile(profile);
    let outcome = match setup.runner.run(&mut expert) {
        Ok(o) => o,
        Err(ImitationError::Aborted { outcome, .. }) => *outcome,
        Err(e) => return Err(e.into()),
    };
    finalize_session(profile, opts, &setup, outcome)
}

/// Writes all session files under `dir`, creating it if needed.
pub fn write_session_dir(dir: &Path, art: &SessionArtifacts) -> Result<(), SessionError> {
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let write = |name: &str, body: String| std::fs::write(dir.join(name), body).map_err(io_err);
    write("session.json", art.record.to_json_string())?;
    write("dataset.jsonl", art.outcome.dataset.to_jsonl())?;
    write(
        "transitions.jsonl",
        transitions_to_jsonl(&art.outcome.transitions),
    )?;
    write(
        "final_trajectory.json",
        art.outcome
            .final_trajectory
            .to_json_string(Some(art.outcome.dt)),
    )?;
    let mut obs = Vec::new();
    write_jsonl(&mut obs, &art.observations).map_err(io_err)?;
    std::fs::write(dir.join("perception.jsonl"), obs).map_err(io_err)?;
    if let Some(p) = &art.policy {
        write("policy.json", p.to_json_string())?;
    }
    if let Some(h) = &art.held_out {
        write(
            "held_out_expert.json",
            h.to_json_string(Some(art.outcome.dt)),
        )?;
    }
    Ok(())
}

pub fn session_dir(out: &Path, session_id: &str) -> PathBuf {
    out.join(session_id)
}

/// Re-runs the safety monitor over the logged commands and breaches on the
/// tick grid and returns the transitions it produces.
pub fn replay_transitions(
    record: &SessionRecord,
    cfg: &SafetyConfig,
) -> Result<Vec<SafetyTransition>, SessionError> {
    let tick_of = |t: f64| (t / record.dt).round() as u64;
    let mut commands: BTreeMap<u64, Command> = BTreeMap::new();
    let mut breaches: BTreeMap<u64, (Cause, f64)> = BTreeMap::new();
    for e in &record.events {
        match e {
            SessionEvent::Command { t, command, .. } => {
                commands.insert(tick_of(*t), *command);
            }
            SessionEvent::Transition(tr) if matches!(tr.cause, Cause::Force | Cause::Workspace) => {
                breaches.insert(tick_of(tr.t), (tr.cause, tr.force_n));
            }
            _ => {}
        }
    }
    let center = cfg.workspace.center();
    let outside = cfg.workspace.max + Vec3::repeat(1.0);
    let mut monitor = SafetyMonitor::new(*cfg)?;
    for k in 0..record.ticks {
        let t = k as f64 * record.dt;
        let (force, pos) = match breaches.get(&k) {
            Some((Cause::Force, f)) => (ForceReading::new(Vec3::new(*f, 0.0, 0.0), t), center),
            Some(_) => (ForceReading::zero(t), outside),
            None => (ForceReading::zero(t), center),
        };
        match monitor.tick(&force, commands.get(&k).copied(), &pos, t) {
            Ok(_) | Err(SafetyError::RejectedInEmergency(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(monitor.log().to_vec())
}

/// True when replaying the log reproduces the recorded mode sequence.
pub fn replay_matches(record: &SessionRecord, cfg: &SafetyConfig) -> Result<bool, SessionError> {
    let replayed = replay_transitions(record, cfg)?;
    let logged: Vec<&SafetyTransition> = record
        .events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Transition(tr) => Some(tr),
            _ => None,
        })
        .collect();
    Ok(replayed.len() == logged.len()
        && replayed
            .iter()
            .zip(logged)
            .all(|(a, b)| a.t == b.t && a.from == b.from && a.to == b.to && a.cause == b.cause))
}
