//! Batch subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rehab_core::emg::{
    channel_csv_string, default_surrogates, report_from_manifest, surrogate_activation,
    synthesize_channel, ChannelEntry, Condition, EmgReportSet,
};
use rehab_core::imitation::{evaluate, Evaluation, SessionStatus, DEFAULT_BAND_RADIUS_M};
use rehab_core::policy::Policy;
use rehab_core::session::{
    run_scripted_session, session_dir, write_session_dir, ScriptedSessionOptions, SessionRecord,
};
use rehab_core::subject::{ForceReading, Subject, SubjectProfile};
use rehab_core::task::scale_amplitude;
use rehab_core::{TaskKind, TaskScript, Trajectory, DEFAULT_DT};
use serde::Serialize;

pub const EXIT_UNCONVERGED: i32 = 3;
pub const EXIT_ABORTED: i32 = 4;

/// Loads a profile file, or a built-in profile when `spec` names one and no
/// such file exists.
pub fn load_profile(spec: &str) -> Result<SubjectProfile> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(p) = SubjectProfile::builtin(spec) {
            return Ok(p);
        }
    }
    SubjectProfile::load(path).with_context(|| format!("loading profile {spec}"))
}

#[derive(Debug, Clone)]
pub struct RunArgs {
    pub task: TaskKind,
    pub profile: String,
    pub stage: u8,
    pub seed: u64,
    pub out: PathBuf,
    pub intervals: Option<u32>,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub session_id: String,
    pub dir: PathBuf,
    pub status: SessionStatus,
    pub iterations: usize,
    pub adjustments: usize,
    pub ticks: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<Evaluation>,
}

impl RunSummary {
    pub fn exit_code(&self) -> i32 {
        match self.status {
            SessionStatus::Converged | SessionStatus::Running => 0,
            SessionStatus::Unconverged => EXIT_UNCONVERGED,
            SessionStatus::Aborted { .. } => EXIT_ABORTED,
        }
    }
}

pub fn run(args: &RunArgs) -> Result<RunSummary> {
    let profile = load_profile(&args.profile)?;
    let mut opts = ScriptedSessionOptions::new(args.task, args.stage, args.seed);
    opts.session.intervals = args.intervals;
    opts.amplitude = args.amplitude;
    let art = run_scripted_session(&profile, &opts)?;
    let dir = session_dir(&args.out, &art.record.session_id);
    write_session_dir(&dir, &art).with_context(|| format!("writing {}", dir.display()))?;
    let r: &SessionRecord = &art.record;
    Ok(RunSummary {
        session_id: r.session_id.clone(),
        dir,
        status: r.status,
        iterations: r.iterations,
        adjustments: r.adjustments,
        ticks: r.ticks,
        evaluation: r.evaluation,
    })
}

pub fn evaluate_files(
    policy: &Path,
    expert: &Path,
    band_radius: Option<f64>,
) -> Result<Evaluation> {
    let p = Policy::load(policy).with_context(|| format!("loading policy {}", policy.display()))?;
    let e = Trajectory::load(expert)
        .with_context(|| format!("loading trajectory {}", expert.display()))?;
    Ok(evaluate(
        &p,
        &e,
        band_radius.unwrap_or(DEFAULT_BAND_RADIUS_M),
    )?)
}

pub fn emg_report(manifest: &Path) -> Result<EmgReportSet> {
    report_from_manifest(manifest).with_context(|| format!("processing {}", manifest.display()))
}

const SIM_FS_HZ: f64 = 1000.0;
const SIM_ECG_UV: f64 = 150.0;
const SIM_SPECIALIST_AMPLITUDE: f64 = 0.6;

/// Writes synthetic raw channels for one task and a manifest referencing
/// them: an MVIC trial, the full task (cobot) and the task at 60 % amplitude
/// (specialist), `reps` repetitions each. Returns the manifest path.
pub fn emg_simulate(
    task: TaskKind,
    profile: &SubjectProfile,
    reps: u32,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let base = TaskScript::builtin(task)
        .trajectory()
        .resample(DEFAULT_DT)?;
    let trials = [
        (Condition::CobotTraining, base.clone()),
        (
            Condition::SpecialistTraining,
            scale_amplitude(&base, SIM_SPECIALIST_AMPLITUDE),
        ),
    ];
    // (muscle, condition, repetition, activation, mvic)
    let mut jobs: Vec<(String, Condition, u32, Vec<f64>, f64)> = Vec::new();
    for m in default_surrogates(task) {
        let Some(&mvic) = profile.mvic.get(&m.muscle_id) else {
            bail!("profile has no MVIC for {}", m.muscle_id);
        };
        for rep in 0..reps {
            jobs.push((
                m.muscle_id.clone(),
                Condition::MvicTest,
                rep,
                vec![1.0; 41],
                mvic,
            ));
        }
        for (cond, tr) in &trials {
            let mut subject = Subject::new(profile.clone())?;
            let forces: Vec<ForceReading> = tr
                .waypoints()
                .iter()
                .map(|w| subject.sense(&w.pos, w.t))
                .collect();
            let act = surrogate_activation(tr, &forces, &m)?;
            for rep in 0..reps {
                jobs.push((m.muscle_id.clone(), *cond, rep, act.clone(), mvic));
            }
        }
    }
    let mut entries = Vec::new();
    for (i, (muscle, cond, rep, act, mvic)) in jobs.into_iter().enumerate() {
        let channel_seed = seed.wrapping_add(i as u64 + 1);
        let rec = synthesize_channel(
            &muscle,
            &act,
            DEFAULT_DT,
            SIM_FS_HZ,
            mvic,
            SIM_ECG_UV,
            cond,
            channel_seed,
        )?;
        let file = format!("{muscle}-{cond}-{rep}.csv");
        std::fs::write(out.join(&file), channel_csv_string(&rec))?;
        entries.push(ChannelEntry {
            muscle_id: muscle,
            fs_hz: SIM_FS_HZ,
            condition: cond,
            task,
            file,
            mvic_uv: None,
        });
    }
    let manifest = out.join("manifest.json");
    std::fs::write(&manifest, serde_json::to_string_pretty(&entries)?)?;
    Ok(manifest)
}
