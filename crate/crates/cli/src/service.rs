//! HTTP control service.
//!
//! A single control task owns the active session and ticks it at the
//! session's `dt`, scaled by the service clock speed. Handlers talk to it over
//! a command channel and read the latest [`Snapshot`] from a watch channel.
//! Telemetry frames fan out over a broadcast channel; slow stream clients
//! lose the oldest frames instead of holding up the control loop.
//!
//! Routes:
//!
//! | method | path                     | body                          |
//! |--------|--------------------------|-------------------------------|
//! | GET    | `/v1/session`            |                               |
//! | POST   | `/v1/session`            | [`StartRequest`]              |
//! | POST   | `/v1/session/stop`       |                               |
//! | POST   | `/v1/session/resume`     |                               |
//! | POST   | `/v1/session/reset`      |                               |
//! | POST   | `/v1/session/adjustment` | trajectory file JSON          |
//! | POST   | `/v1/session/survey`     | [`SurveyRequest`]             |
//! | GET    | `/v1/stream`             | server-sent `telemetry` events |

use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use rehab_core::imitation::{
    ExpertModel, ImitationError, Phase, ScriptedExpert, SessionEvent, SessionStatus,
};
use rehab_core::safety::stage_defaults;
use rehab_core::session::{
    finalize_session, prepare_session, session_dir, write_session_dir, ScriptedSessionOptions,
    SessionRecord, SessionSetup,
};
use rehab_core::subject::{FeedbackKind, SubjectProfile};
use rehab_core::trajectory::{check_limits, LimitKind, LimitViolation};
use rehab_core::{Command, Mode, TaskKind, Trajectory, Vec3};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

/// Telemetry frames buffered per stream client before the oldest are dropped.
const TELEMETRY_BUFFER: usize = 256;
/// Shortest sleep between control-loop wakeups.
const MIN_WAKE: Duration = Duration::from_millis(1);
/// Ticks run in one wakeup at most, so requests are never starved.
const MAX_TICKS_PER_WAKE: u64 = 2000;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
}

impl ServeConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            speed: 1.0,
        }
    }
}

/// Machine-readable error body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<ViolationBody>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationBody {
    pub kind: LimitKind,
    /// Index into the submitted waypoints, or into the spliced trajectory
    /// resampled at `dt` when `scope` is `"spliced"`.
    pub index: usize,
    pub magnitude: f64,
    pub scope: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.to_string(),
            message: message.into(),
            violations: Vec::new(),
        }
    }

    fn bad_json(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string())
    }

    fn no_session() -> Self {
        Self::new(
            StatusCode::CONFLICT,
            "no_active_session",
            "no session is running",
        )
    }

    fn with_violations(mut self, v: &[LimitViolation], scope: &str) -> Self {
        self.violations = v
            .iter()
            .map(|v| ViolationBody {
                kind: v.kind,
                index: v.index,
                magnitude: v.magnitude,
                scope: scope.to_string(),
            })
            .collect();
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertMode {
    /// Stops wait for `/adjustment` or `/resume`.
    #[default]
    Operator,
    /// Stops are answered by the built-in scripted expert.
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    /// `gross`, `fine`, or a full task id.
    #[serde(deserialize_with = "task_from_str")]
    pub task: TaskKind,
    /// Built-in profile name or an inline profile object.
    pub profile: Value,
    pub stage: u8,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub expert: ExpertMode,
    #[serde(default)]
    pub intervals: Option<u32>,
}

fn task_from_str<'de, D: serde::Deserializer<'de>>(d: D) -> Result<TaskKind, D::Error> {
    let s = String::deserialize(d)?;
    s.parse().map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SurveyRequest {
    #[serde(rename = "question-id", alias = "question_id")]
    pub question_id: String,
    pub value: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingAdjustment {
    pub iter: usize,
    pub anchor_tau: f64,
    pub anchor: [f64; 3],
    /// Commanded trajectory from the anchor on, in the trajectory file format.
    pub remaining: Value,
}

/// Latest control-loop state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub active: bool,
    pub session_id: Option<String>,
    pub status: Option<SessionStatus>,
    pub phase: Option<Phase>,
    pub mode: Mode,
    pub tick: u64,
    pub t: f64,
    pub iter: usize,
    pub pos: Option<Vec3>,
    pub grip: Option<f64>,
    pub force_n: f64,
    pub speed_scale: f64,
    pub adjustments: usize,
    pub pending_adjustment: Option<PendingAdjustment>,
    /// Directory of the last finished session.
    pub last_session_dir: Option<PathBuf>,
}

impl Snapshot {
    fn idle() -> Self {
        Self {
            active: false,
            session_id: None,
            status: None,
            phase: None,
            mode: Mode::Idle,
            tick: 0,
            t: 0.0,
            iter: 0,
            pos: None,
            grip: None,
            force_n: 0.0,
            speed_scale: 0.0,
            adjustments: 0,
            pending_adjustment: None,
            last_session_dir: None,
        }
    }
}

/// One streamed telemetry frame per control tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub session_id: String,
    pub tick: u64,
    pub t: f64,
    pub pos: Vec3,
    pub grip: Option<f64>,
    pub force_n: f64,
    pub mode: Mode,
    pub speed_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackKind>,
    /// Session events logged during this tick.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<SessionEvent>,
}

type Reply = oneshot::Sender<Result<Value, ApiError>>;

enum Request {
    Start(Box<StartRequest>, Reply),
    Command(Command, Reply),
    Adjustment(Trajectory, Reply),
    Survey(SurveyRequest, Reply),
}

#[derive(Clone)]
struct AppState {
    requests: mpsc::Sender<Request>,
    snapshot: watch::Receiver<Snapshot>,
    telemetry: broadcast::Sender<Frame>,
}

struct Active {
    setup: SessionSetup,
    profile: SubjectProfile,
    opts: ScriptedSessionOptions,
    session_id: String,
    expert: Option<ScriptedExpert>,
    started_at: f64,
    survey: Vec<(String, i64)>,
    wall_start: Instant,
    events_seen: usize,
}

struct Finished {
    record: SessionRecord,
    dir: PathBuf,
}

struct ControlLoop {
    cfg: ServeConfig,
    active: Option<Active>,
    last: Option<Finished>,
    snapshot: watch::Sender<Snapshot>,
    telemetry: broadcast::Sender<Frame>,
}

fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn resolve_profile(v: &Value) -> Result<SubjectProfile, ApiError> {
    let invalid = |m: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_profile", m);
    match v {
        Value::String(name) => SubjectProfile::builtin(name)
            .ok_or_else(|| invalid(format!("unknown profile {name:?}"))),
        Value::Object(_) => {
            SubjectProfile::from_json_str(&v.to_string()).map_err(|e| invalid(e.to_string()))
        }
        _ => Err(invalid("profile must be a name or an object".into())),
    }
}

fn unique_dir(root: &Path, id: &str) -> (String, PathBuf) {
    let mut name = id.to_string();
    let mut n = 1;
    while session_dir(root, &name).exists() {
        n += 1;
        name = format!("{id}-{n}");
    }
    let dir = session_dir(root, &name);
    (name, dir)
}

impl ControlLoop {
    fn start(&mut self, req: StartRequest) -> Result<Value, ApiError> {
        if self.active.is_some() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "session_active",
                "a session is already running",
            ));
        }
        let profile = resolve_profile(&req.profile)?;
        if stage_defaults(req.stage).is_err() {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_stage",
                format!("stage {} is not 1, 2 or 3", req.stage),
            ));
        }
        let mut opts = ScriptedSessionOptions::new(req.task, req.stage, req.seed);
        opts.session.intervals = req.intervals;
        let setup = prepare_session(&profile, &opts).map_err(|e| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_session",
                e.to_string(),
            )
        })?;
        let (session_id, _) = unique_dir(&self.cfg.data_dir, &opts.session_id());
        let expert =
            (req.expert == ExpertMode::Scripted).then(|| ScriptedExpert::from_profile(&profile));
        tracing::info!(session_id, "session started");
        self.active = Some(Active {
            setup,
            profile,
            opts,
            session_id: session_id.clone(),
            expert,
            started_at: unix_now(),
            survey: Vec::new(),
            wall_start: Instant::now(),
            events_seen: 0,
        });
        self.publish(None);
        Ok(json!({ "session_id": session_id }))
    }

    fn command(&mut self, cmd: Command) -> Result<Value, ApiError> {
        let a = self.active.as_mut().ok_or_else(ApiError::no_session)?;
        match a.setup.runner.push_command(cmd) {
            Ok(()) => Ok(json!({ "queued": cmd })),
            Err(e) => Err(adjustment_error(e)),
        }
    }

    fn adjustment(&mut self, traj: Trajectory) -> Result<Value, ApiError> {
        let a = self.active.as_mut().ok_or_else(ApiError::no_session)?;
        if a.setup.runner.pending_adjustment().is_none() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "no_pending_adjustment",
                "the session is not waiting for an adjustment",
            ));
        }
        let own: Vec<LimitViolation> = check_limits(&traj, a.setup.runner.safety().config())
            .into_iter()
            .filter(|v| v.kind == LimitKind::Workspace)
            .collect();
        if !own.is_empty() {
            let msg = format!("{} waypoint(s) outside the stage workspace", own.len());
            a.setup
                .runner
                .log_rejected_adjustment(&msg)
                .map_err(adjustment_error)?;
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "adjustment_rejected",
                msg,
            )
            .with_violations(&own, "submitted"));
        }
        a.setup
            .runner
            .submit_adjustment(traj)
            .map_err(adjustment_error)?;
        Ok(json!({ "accepted": true }))
    }

    fn survey(&mut self, req: SurveyRequest) -> Result<Value, ApiError> {
        let range = |v: i64| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "survey_out_of_range",
                format!("survey value {v} outside 1..=10"),
            )
        };
        if let Some(a) = self.active.as_mut() {
            if !(1..=10).contains(&req.value) {
                return Err(range(req.value));
            }
            a.survey.push((req.question_id, req.value));
            return Ok(json!({ "recorded": true, "session_id": a.session_id }));
        }
        let last = self.last.as_mut().ok_or_else(ApiError::no_session)?;
        let idx = last
            .record
            .add_survey(&req.question_id, req.value)
            .map_err(|_| range(req.value))?;
        std::fs::write(last.dir.join("session.json"), last.record.to_json_string())
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "io", e.to_string()))?;
        Ok(json!({ "recorded": true, "session_id": last.record.session_id, "entry": idx }))
    }

    /// Runs the ticks owed to the wall clock. Returns when the loop should wake next.
    fn advance(&mut self) -> Duration {
        let Some(a) = self.active.as_mut() else {
            return Duration::from_secs(3600);
        };
        let dt = a.opts.session.dt;
        let period = Duration::from_secs_f64(dt / self.cfg.speed).max(MIN_WAKE);
        let owed = (a.wall_start.elapsed().as_secs_f64() * self.cfg.speed / dt) as u64 + 1;
        let mut done = a.setup.runner.last_report().map_or(0, |r| r.tick + 1);
        let mut budget = MAX_TICKS_PER_WAKE;
        while done < owed && budget > 0 {
            budget -= 1;
            done += 1;
            if let Err(e) = self.tick_once() {
                tracing::error!("control loop: {e}");
                break;
            }
            if self.active.is_none() {
                return period;
            }
        }
        period
    }

    fn tick_once(&mut self) -> Result<(), ImitationError> {
        let a = self.active.as_mut().expect("active");
        let report = a.setup.runner.step()?;
        if let Some(ex) = a.expert.as_mut() {
            if let Some(req) = a.setup.runner.pending_adjustment().cloned() {
                let adj = ex.adjust(&req, a.setup.runner.safety().config(), a.opts.session.dt)?;
                a.setup.runner.submit_adjustment(adj)?;
            }
        }
        let events = a.setup.runner.events();
        let new_events = events[a.events_seen..].to_vec();
        a.events_seen = events.len();
        let _ = self.telemetry.send(Frame {
            session_id: a.session_id.clone(),
            tick: report.tick,
            t: report.t,
            pos: report.pos,
            grip: report.grip,
            force_n: report.force_n,
            mode: report.mode,
            speed_scale: report.speed_scale,
            feedback: report.feedback,
            events: new_events,
        });
        if a.setup.runner.is_finished() {
            self.finish();
        } else {
            self.publish(None);
        }
        Ok(())
    }

    fn finish(&mut self) {
        let a = self.active.take().expect("active");
        let outcome = a.setup.runner.outcome();
        let dir = session_dir(&self.cfg.data_dir, &a.session_id);
        match finalize_session(&a.profile, &a.opts, &a.setup, outcome) {
            Ok(mut art) => {
                art.record.session_id = a.session_id.clone();
                art.record.started_at_unix = Some(a.started_at);
                for (q, v) in &a.survey {
                    art.record
                        .add_survey(q, *v)
                        .expect("range checked on entry");
                }
                if let Err(e) = write_session_dir(&dir, &art) {
                    tracing::error!("writing {}: {e}", dir.display());
                }
                tracing::info!(session_id = a.session_id, status = ?art.record.status, "session finished");
                let last = Snapshot {
                    status: Some(art.record.status),
                    ..self.snapshot_of(&a)
                };
                self.last = Some(Finished {
                    record: art.record,
                    dir: dir.clone(),
                });
                self.publish(Some(last));
            }
            Err(e) => {
                tracing::error!("finalizing {}: {e}", a.session_id);
                self.publish(None);
            }
        }
    }

    fn snapshot_of(&self, a: &Active) -> Snapshot {
        let r = &a.setup.runner;
        let rep = r.last_report();
        Snapshot {
            active: !r.is_finished(),
            session_id: Some(a.session_id.clone()),
            status: Some(r.status()),
            phase: Some(r.phase()),
            mode: r.safety().mode(),
            tick: rep.map_or(0, |x| x.tick),
            t: rep.map_or(0.0, |x| x.t),
            iter: rep.map_or(0, |x| x.iter),
            pos: rep.map(|x| x.pos),
            grip: rep.and_then(|x| x.grip),
            force_n: rep.map_or(0.0, |x| x.force_n),
            speed_scale: r.safety().state().speed_scale,
            adjustments: r
                .iterations()
                .iter()
                .filter(|i| i.adjustment.is_some())
                .count(),
            pending_adjustment: r.pending_adjustment().map(|p| PendingAdjustment {
                iter: p.iter,
                anchor_tau: p.anchor.t,
                anchor: [p.anchor.pos.x, p.anchor.pos.y, p.anchor.pos.z],
                remaining: p.remaining().to_json_value(Some(a.opts.session.dt)),
            }),
            last_session_dir: self.last.as_ref().map(|l| l.dir.clone()),
        }
    }

    fn publish(&self, finished: Option<Snapshot>) {
        let snap = match (finished, &self.active) {
            (Some(mut s), _) => {
                s.active = false;
                s.pending_adjustment = None;
                s.last_session_dir = self.last.as_ref().map(|l| l.dir.clone());
                s
            }
            (None, Some(a)) => self.snapshot_of(a),
            (None, None) => Snapshot {
                last_session_dir: self.last.as_ref().map(|l| l.dir.clone()),
                ..Snapshot::idle()
            },
        };
        self.snapshot.send_replace(snap);
    }

    fn handle(&mut self, req: Request) {
        let (res, reply) = match req {
            Request::Start(r, reply) => (self.start(*r), reply),
            Request::Command(c, reply) => (self.command(c), reply),
            Request::Adjustment(t, reply) => (self.adjustment(t), reply),
            Request::Survey(s, reply) => (self.survey(s), reply),
        };
        if self.active.is_some() {
            self.publish(None);
        }
        let _ = reply.send(res);
    }

    async fn run(mut self, mut requests: mpsc::Receiver<Request>) {
        let mut wake = Duration::from_secs(3600);
        loop {
            tokio::select! {
                req = requests.recv() => match req {
                    Some(r) => self.handle(r),
                    None => return,
                },
                _ = tokio::time::sleep(wake) => {}
            }
            wake = self.advance();
        }
    }
}

fn adjustment_error(e: ImitationError) -> ApiError {
    match e {
        ImitationError::AdjustmentRejected { reason, violations } => ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "adjustment_rejected",
            reason,
        )
        .with_violations(&violations, "spliced"),
        ImitationError::NoPendingAdjustment => ApiError::new(
            StatusCode::CONFLICT,
            "no_pending_adjustment",
            "the session is not waiting for an adjustment",
        ),
        ImitationError::Finished => ApiError::no_session(),
        other => ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "rejected",
            other.to_string(),
        ),
    }
}

async fn ask(
    state: &AppState,
    make: impl FnOnce(Reply) -> Request,
) -> Result<Json<Value>, ApiError> {
    let (tx, rx) = oneshot::channel();
    let gone = || {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "unavailable",
            "control loop stopped",
        )
    };
    state.requests.send(make(tx)).await.map_err(|_| gone())?;
    rx.await.map_err(|_| gone())?.map(Json)
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(ApiError::bad_json)
}

async fn get_session(State(s): State<AppState>) -> Json<Snapshot> {
    Json(s.snapshot.borrow().clone())
}

async fn start_session(State(s): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: StartRequest = parse(&body)?;
    let v = ask(&s, |r| Request::Start(Box::new(req), r)).await?;
    Ok((StatusCode::CREATED, v).into_response())
}

async fn stop(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    ask(&s, |r| Request::Command(Command::Stop, r)).await
}

async fn resume(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    ask(&s, |r| Request::Command(Command::Resume, r)).await
}

async fn reset(State(s): State<AppState>) -> Result<Json<Value>, ApiError> {
    ask(&s, |r| Request::Command(Command::Reset, r)).await
}

async fn adjustment(State(s): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let text = std::str::from_utf8(&body).map_err(ApiError::bad_json)?;
    let traj = Trajectory::from_json_str(text).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_trajectory",
            e.to_string(),
        )
    })?;
    ask(&s, |r| Request::Adjustment(traj, r)).await
}

async fn survey(State(s): State<AppState>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: SurveyRequest = parse(&body)?;
    ask(&s, |r| Request::Survey(req, r)).await
}

async fn stream(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = s.telemetry.subscribe();
    let frames = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(f) => {
                    let ev = Event::default()
                        .event("telemetry")
                        .json_data(&f)
                        .expect("frame serializes");
                    return Some((Ok(ev), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!("stream client dropped {n} frames");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(frames).keep_alive(KeepAlive::default())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

/// Builds the router and spawns the control loop on the current runtime.
pub fn router(cfg: ServeConfig) -> Router {
    let (req_tx, req_rx) = mpsc::channel(64);
    let (snap_tx, snap_rx) = watch::channel(Snapshot::idle());
    let (tel_tx, _) = broadcast::channel(TELEMETRY_BUFFER);
    let control = ControlLoop {
        cfg,
        active: None,
        last: None,
        snapshot: snap_tx,
        telemetry: tel_tx.clone(),
    };
    tokio::spawn(control.run(req_rx));
    let state = AppState {
        requests: req_tx,
        snapshot: snap_rx,
        telemetry: tel_tx,
    };
    Router::new()
        .route("/v1/session", get(get_session).post(start_session))
        .route("/v1/session/stop", post(stop))
        .route("/v1/session/resume", post(resume))
        .route("/v1/session/reset", post(reset))
        .route("/v1/session/adjustment", post(adjustment))
        .route("/v1/session/survey", post(survey))
        .route("/v1/stream", get(stream))
        .fallback(not_found)
        .with_state(state)
}

/// Binds `addr` and serves until the task is dropped.
pub async fn serve(addr: SocketAddr, cfg: ServeConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.data_dir)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("binding {addr}: {e}"))?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(cfg)).await?;
    Ok(())
}
