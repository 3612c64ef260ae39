//! sEMG conditioning, MVIC normalization and the muscle-activation surrogate.
//!
//! The processing chain mirrors a conventional surface-EMG workflow:
//! high-pass to strip ECG and motion artifacts, 100 ms RMS envelope, time
//! normalization to a 0–100 % cycle, averaging across repetitions, and
//! scaling by the subject's maximum voluntary isometric contraction.
//!
//! [`surrogate_activation`] replaces a musculoskeletal simulation with a
//! linear drive model. Its absolute values carry no physiological meaning;
//! only comparisons between trajectories driven through the same model do.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::subject::ForceReading;
use crate::task::TaskKind;
use crate::trajectory::Trajectory;
use crate::Vec3;

pub const DEFAULT_RMS_WINDOW_S: f64 = 0.1;
pub const DEFAULT_ECG_CUTOFF_HZ: f64 = 30.0;
pub const DEFAULT_NORMALIZED_POINTS: usize = 101;

pub const SURROGATE_DISCLAIMER: &str = "Surrogate activation model: values are relative drive \
levels for comparing trajectories, not physiological muscle activation.";

#[derive(Debug, Error, PartialEq)]
pub enum EmgError {
    #[error("RMS window of {window_s} s is shorter than one sample at {fs} Hz")]
    WindowTooShort { window_s: f64, fs: f64 },
    #[error("cutoff {cutoff} Hz must be below Nyquist ({nyquist} Hz)")]
    CutoffAboveNyquist { cutoff: f64, nyquist: f64 },
    #[error("no repetitions supplied")]
    NoRepetitions,
    #[error("repetition {0} has fewer than 2 samples")]
    RepetitionTooShort(usize),
    #[error("repetitions mix muscles {0} and {1}")]
    MixedMuscles(String, String),
    #[error("MVIC reference must be positive, got {0}")]
    NonPositiveMvic(f64),
    #[error("tick grid mismatch: trajectory has {traj} samples, forces {forces}")]
    GridMismatch { traj: usize, forces: usize },
    #[error("muscle sets differ: {0}")]
    MuscleSetMismatch(String),
    #[error("task mismatch: {0} vs {1}")]
    TaskMismatch(TaskKind, TaskKind),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("missing MVIC reference for {0}")]
    MissingMvic(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    Rest,
    CobotTraining,
    SpecialistTraining,
    MvicTest,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmgRecord {
    pub muscle_id: String,
    /// Sampling rate, Hz.
    pub fs: f64,
    /// Microvolts.
    pub samples: Vec<f64>,
    pub condition: Condition,
}

impl EmgRecord {
    pub fn new(
        muscle_id: impl Into<String>,
        fs: f64,
        samples: Vec<f64>,
        condition: Condition,
    ) -> Result<Self, EmgError> {
        let rec = Self {
            muscle_id: muscle_id.into(),
            fs,
            samples,
            condition,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<(), EmgError> {
        if !(self.fs > 0.0) || !self.fs.is_finite() {
            return Err(EmgError::InvalidRecord(format!(
                "fs must be positive, got {}",
                self.fs
            )));
        }
        if self.samples.is_empty() {
            return Err(EmgError::InvalidRecord("no samples".into()));
        }
        if self.samples.iter().any(|s| !s.is_finite()) {
            return Err(EmgError::InvalidRecord("non-finite sample".into()));
        }
        Ok(())
    }

    fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }
}

/// Centered sliding-window RMS; windows are truncated at the record edges so
/// the output has the input's length.
pub fn rms_envelope(rec: &EmgRecord, window_s: f64) -> Result<EmgRecord, EmgError> {
    let w = (window_s * rec.fs).round();
    if !(w >= 1.0) {
        return Err(EmgError::WindowTooShort {
            window_s,
            fs: rec.fs,
        });
    }
    let w = w as usize;
    let n = rec.samples.len();
    // window covers [i - w/2, i - w/2 + w - 1]
    let before = w / 2;
    let after = w - 1 - before;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for s in &rec.samples {
        acc += s * s;
        prefix.push(acc);
    }
    let out = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after).min(n - 1);
            let sum = (prefix[hi + 1] - prefix[lo]).max(0.0);
            (sum / (hi + 1 - lo) as f64).sqrt()
        })
        .collect();
    Ok(rec.with_samples(out))
}

/// Second-order biquad coefficients, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Butterworth high-pass via the bilinear transform with pre-warping.
    pub fn butterworth_highpass(cutoff: f64, fs: f64) -> Result<Self, EmgError> {
        let nyquist = fs / 2.0;
        if !(cutoff > 0.0 && cutoff < nyquist) {
            return Err(EmgError::CutoffAboveNyquist { cutoff, nyquist });
        }
        let k = (PI * cutoff / fs).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        Ok(Self {
            b: [norm, -2.0 * norm, norm],
            a: [
                1.0,
                2.0 * (k * k - 1.0) * norm,
                (1.0 - SQRT_2 * k + k * k) * norm,
            ],
        })
    }

    /// Filter state that makes a constant unit input a steady state.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let y = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let z1 = b2 - a2 * y;
        let z0 = b1 - a1 * y + z1;
        [z0, z1]
    }

    /// Direct-form II transposed filtering from state `zi`.
    fn run(&self, x: &[f64], zi: [f64; 2]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let [mut z0, mut z1] = zi;
        x.iter()
            .map(|&xn| {
                let y = b0 * xn + z0;
                z0 = b1 * xn - a1 * y + z1;
                z1 = b2 * xn - a2 * y;
                y
            })
            .collect()
    }

    /// Zero-phase forward-backward filtering with odd-symmetric edge padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = (3 * 3).min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

        let zi = self.step_state();
        let scaled = |v: f64| [zi[0] * v, zi[1] * v];
        let mut y = self.run(&ext, scaled(ext[0]));
        y.reverse();
        let mut y = self.run(&y, scaled(y[0]));
        y.reverse();
        y[pad..pad + n].to_vec()
    }
}

/// Removes ECG and other low-frequency content with a zero-phase
/// second-order Butterworth high-pass.
pub fn remove_ecg(rec: &EmgRecord, cutoff: f64) -> Result<EmgRecord, EmgError> {
    let filter = Biquad::butterworth_highpass(cutoff, rec.fs)?;
    Ok(rec.with_samples(filter.filtfilt(&rec.samples)))
}

/// Resamples `samples` linearly to `n_points` spanning 0–100 % of its length.
fn normalize_length(samples: &[f64], n_points: usize) -> Vec<f64> {
    let last = (samples.len() - 1) as f64;
    (0..n_points)
        .map(|i| {
            let u = if n_points == 1 {
                0.0
            } else {
                i as f64 * last / (n_points - 1) as f64
            };
            let j = (u.floor() as usize).min(samples.len() - 2);
            let s = u - j as f64;
            samples[j] * (1.0 - s) + samples[j + 1] * s
        })
        .collect()
}

/// Time-normalizes each repetition to `n_points` and averages pointwise.
///
/// The output's `fs` is `n_points - 1`, i.e. samples per normalized cycle.
pub fn time_normalize_and_average(
    reps: &[EmgRecord],
    n_points: usize,
) -> Result<EmgRecord, EmgError> {
    let first = reps.first().ok_or(EmgError::NoRepetitions)?;
    if n_points < 2 {
        return Err(EmgError::InvalidRecord(
            "n_points must be at least 2".into(),
        ));
    }
    let mut acc = vec![0.0; n_points];
    for (i, r) in reps.iter().enumerate() {
        if r.samples.len() < 2 {
            return Err(EmgError::RepetitionTooShort(i));
        }
        if r.muscle_id != first.muscle_id {
            return Err(EmgError::MixedMuscles(
                first.muscle_id.clone(),
                r.muscle_id.clone(),
            ));
        }
        for (a, v) in acc.iter_mut().zip(normalize_length(&r.samples, n_points)) {
            *a += v;
        }
    }
    let k = reps.len() as f64;
    Ok(EmgRecord {
        muscle_id: first.muscle_id.clone(),
        fs: (n_points - 1) as f64,
        samples: acc.into_iter().map(|a| a / k).collect(),
        condition: first.condition,
    })
}

/// Expresses an envelope as percent of the MVIC reference.
pub fn pct_mvic(envelope: &EmgRecord, mvic_uv: f64) -> Result<Vec<f64>, EmgError> {
    if !(mvic_uv > 0.0) {
        return Err(EmgError::NonPositiveMvic(mvic_uv));
    }
    Ok(envelope
        .samples
        .iter()
        .map(|s| s / mvic_uv * 100.0)
        .collect())
}

/// Linear stand-in for one muscle's response to guided motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscleSurrogate {
    pub muscle_id: String,
    /// Sensitivity to motion direction; only its projection matters.
    pub direction_weight: Vec3,
    /// Gain on the projected end-effector speed, s/m.
    pub excursion_gain: f64,
    /// Gain on resistance force magnitude, 1/N.
    pub resistance_gain: f64,
    /// Gain on grip closing/opening rate, s.
    pub grip_gain: f64,
}

impl MuscleSurrogate {
    pub fn validate(&self) -> Result<(), EmgError> {
        let gains = [self.excursion_gain, self.resistance_gain, self.grip_gain];
        if gains.iter().any(|g| !(*g >= 0.0)) || gains.iter().all(|g| *g == 0.0) {
            return Err(EmgError::InvalidRecord(format!(
                "surrogate {}: gains must be >= 0 with at least one positive",
                self.muscle_id
            )));
        }
        Ok(())
    }
}

fn finite_difference<T: Copy>(
    values: &[T],
    times: &[f64],
    diff: impl Fn(T, T) -> T,
    scale: impl Fn(T, f64) -> T,
) -> Vec<T> {
    let n = values.len();
    (0..n)
        .map(|i| {
            let (a, b) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
            scale(diff(values[b], values[a]), 1.0 / (times[b] - times[a]))
        })
        .collect()
}

/// Unclamped surrogate drive per tick; linear in speed, force and grip rate.
pub fn surrogate_drive(
    traj: &Trajectory,
    forces: &[ForceReading],
    model: &MuscleSurrogate,
) -> Result<Vec<f64>, EmgError> {
    if traj.len() != forces.len() {
        return Err(EmgError::GridMismatch {
            traj: traj.len(),
            forces: forces.len(),
        });
    }
    let times: Vec<f64> = traj.waypoints().iter().map(|w| w.t).collect();
    let pos: Vec<Vec3> = traj.positions().collect();
    let vel = finite_difference(&pos, &times, |b, a| b - a, |v, s| v * s);
    let grip_rate = if traj.has_grip() {
        let g: Vec<f64> = traj
            .waypoints()
            .iter()
            .map(|w| w.grip.unwrap_or(0.0))
            .collect();
        finite_difference(&g, &times, |b, a| b - a, |v, s| v * s)
    } else {
        vec![0.0; traj.len()]
    };
    Ok(vel
        .iter()
        .zip(forces)
        .zip(&grip_rate)
        .map(|((v, f), g)| {
            model.excursion_gain * v.dot(&model.direction_weight).abs()
                + model.resistance_gain * f.magnitude()
                + model.grip_gain * g.abs()
        })
        .collect())
}

/// Surrogate activation in [0, 1] per tick.
pub fn surrogate_activation(
    traj: &Trajectory,
    forces: &[ForceReading],
    model: &MuscleSurrogate,
) -> Result<Vec<f64>, EmgError> {
    Ok(surrogate_drive(traj, forces, model)?
        .into_iter()
        .map(|a| a.clamp(0.0, 1.0))
        .collect())
}

/// Default target muscles and surrogate gains per task.
pub fn default_surrogates(task: TaskKind) -> Vec<MuscleSurrogate> {
    let m = |id: &str, w: [f64; 3], ex: f64, res: f64, grip: f64| MuscleSurrogate {
        muscle_id: id.to_string(),
        direction_weight: Vec3::new(w[0], w[1], w[2]),
        excursion_gain: ex,
        resistance_gain: res,
        grip_gain: grip,
    };
    match task {
        TaskKind::GrossArm => vec![
            m("anterior-deltoid", [0.7, 0.0, 0.7], 2.0, 0.006, 0.0),
            m("posterior-deltoid", [0.8, 0.3, 0.2], 1.6, 0.004, 0.0),
            m("biceps-brachii", [0.6, 0.0, 0.5], 2.2, 0.008, 0.0),
            m("triceps-brachii", [0.9, 0.0, -0.3], 1.8, 0.006, 0.0),
            m("upper-trapezius", [0.0, 0.2, 1.0], 1.4, 0.004, 0.0),
            m("pectoralis-major", [0.3, 0.9, 0.0], 1.5, 0.005, 0.0),
        ],
        TaskKind::FineHand => vec![
            m(
                "flexor-digitorum-superficialis",
                [0.0, 0.0, 1.0],
                0.6,
                0.004,
                0.35,
            ),
            m("extensor-digitorum", [0.0, 0.0, 1.0], 0.5, 0.004, 0.30),
            m("flexor-carpi-radialis", [0.5, 0.0, 0.8], 0.8, 0.005, 0.20),
            m("extensor-carpi-ulnaris", [0.5, 0.5, 0.5], 0.7, 0.005, 0.18),
            m("brachioradialis", [0.6, 0.0, 0.8], 1.2, 0.006, 0.10),
        ],
    }
}

/// Target muscle identifiers for a task.
pub fn target_muscles(task: TaskKind) -> Vec<String> {
    default_surrogates(task)
        .into_iter()
        .map(|m| m.muscle_id)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MuscleActivation {
    pub mean_pct_mvic: f64,
    pub peak_pct_mvic: f64,
}

impl MuscleActivation {
    pub fn from_pct_series(series: &[f64]) -> Self {
        let n = series.len().max(1) as f64;
        Self {
            mean_pct_mvic: series.iter().sum::<f64>() / n,
            peak_pct_mvic: series.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationReport {
    pub task: TaskKind,
    pub condition: Condition,
    pub per_muscle: BTreeMap<String, MuscleActivation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disclaimer: Option<String>,
}

impl ActivationReport {
    /// Checks percentages are nonnegative and every target muscle is present.
    pub fn validate(&self) -> Result<(), EmgError> {
        for m in target_muscles(self.task) {
            if !self.per_muscle.contains_key(&m) {
                return Err(EmgError::MuscleSetMismatch(format!("missing {m}")));
            }
        }
        for (m, a) in &self.per_muscle {
            if !(a.mean_pct_mvic >= 0.0 && a.peak_pct_mvic >= 0.0) {
                return Err(EmgError::InvalidRecord(format!(
                    "negative activation for {m}"
                )));
            }
        }
        Ok(())
    }

    /// Rows of `muscle_id,condition,mean_pct_mvic,peak_pct_mvic`.
    pub fn to_csv_rows(&self) -> String {
        self.per_muscle
            .iter()
            .map(|(m, a)| {
                format!(
                    "{m},{},{:.4},{:.4}\n",
                    self.condition, a.mean_pct_mvic, a.peak_pct_mvic
                )
            })
            .collect()
    }
}

pub const REPORT_CSV_HEADER: &str = "muscle_id,condition,mean_pct_mvic,peak_pct_mvic\n";

/// Surrogate activation report for one trajectory and its force trace.
pub fn surrogate_report(
    task: TaskKind,
    condition: Condition,
    traj: &Trajectory,
    forces: &[ForceReading],
    models: &[MuscleSurrogate],
) -> Result<ActivationReport, EmgError> {
    let mut per_muscle = BTreeMap::new();
    for m in models {
        let act = surrogate_activation(traj, forces, m)?;
        let pct: Vec<f64> = act.iter().map(|a| a * 100.0).collect();
        per_muscle.insert(m.muscle_id.clone(), MuscleActivation::from_pct_series(&pct));
    }
    Ok(ActivationReport {
        task,
        condition,
        per_muscle,
        disclaimer: Some(SURROGATE_DISCLAIMER.to_string()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncrementRow {
    pub muscle_id: String,
    pub cobot_pct: f64,
    pub specialist_pct: f64,
    /// Cobot minus specialist, %MVIC points.
    pub increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionComparison {
    pub task: TaskKind,
    pub rows: Vec<IncrementRow>,
    pub mean_increment: f64,
    /// Sample standard deviation (n − 1); zero for a single muscle.
    pub sd_increment: f64,
}

/// Per-muscle mean-activation increments of cobot over specialist training.
pub fn compare_conditions(
    cobot: &ActivationReport,
    specialist: &ActivationReport,
) -> Result<ConditionComparison, EmgError> {
    if cobot.task != specialist.task {
        return Err(EmgError::TaskMismatch(cobot.task, specialist.task));
    }
    let a: Vec<&String> = cobot.per_muscle.keys().collect();
    let b: Vec<&String> = specialist.per_muscle.keys().collect();
    if a != b {
        return Err(EmgError::MuscleSetMismatch(format!("{a:?} vs {b:?}")));
    }
    let rows: Vec<IncrementRow> = cobot
        .per_muscle
        .iter()
        .map(|(m, c)| {
            let s = specialist.per_muscle[m].mean_pct_mvic;
            IncrementRow {
                muscle_id: m.clone(),
                cobot_pct: c.mean_pct_mvic,
                specialist_pct: s,
                increment: c.mean_pct_mvic - s,
            }
        })
        .collect();
    let n = rows.len() as f64;
    let mean = if rows.is_empty() {
        0.0
    } else {
        rows.iter().map(|r| r.increment).sum::<f64>() / n
    };
    let sd = if rows.len() > 1 {
        (rows
            .iter()
            .map(|r| (r.increment - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0))
            .sqrt()
    } else {
        0.0
    };
    Ok(ConditionComparison {
        task: cobot.task,
        rows,
        mean_increment: mean,
        sd_increment: sd,
    })
}

// ---------------------------------------------------------------------------
// Channel files

/// One entry of a channel manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub muscle_id: String,
    pub fs_hz: f64,
    pub condition: Condition,
    pub task: TaskKind,
    /// CSV path, relative to the manifest.
    pub file: String,
    /// Optional explicit MVIC reference; otherwise taken from MvicTest channels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mvic_uv: Option<f64>,
}

/// Reads a `t_s,uv` channel CSV into a record.
pub fn read_channel_csv(
    path: &Path,
    muscle_id: &str,
    fs: f64,
    condition: Condition,
) -> Result<EmgRecord, EmgError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| EmgError::Io(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| EmgError::Io(e.to_string()))?
        .clone();
    let uv_col = headers
        .iter()
        .position(|h| h == "uv")
        .ok_or_else(|| EmgError::InvalidRecord(format!("{}: no uv column", path.display())))?;
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| EmgError::Io(e.to_string()))?;
        let v: f64 = rec
            .get(uv_col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| EmgError::InvalidRecord(format!("{}: bad uv value", path.display())))?;
        samples.push(v);
    }
    EmgRecord::new(muscle_id, fs, samples, condition)
}

/// Writes a record as a `t_s,uv` CSV.
pub fn channel_csv_string(rec: &EmgRecord) -> String {
    let mut s = String::from("t_s,uv\n");
    for (i, v) in rec.samples.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i as f64 / rec.fs, v));
    }
    s
}

/// Envelope of a raw channel: ECG removal then RMS smoothing.
pub fn condition_channel(rec: &EmgRecord) -> Result<EmgRecord, EmgError> {
    rms_envelope(
        &remove_ecg(rec, DEFAULT_ECG_CUTOFF_HZ)?,
        DEFAULT_RMS_WINDOW_S,
    )
}

/// Result of processing a manifest of raw channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmgReportSet {
    pub task: TaskKind,
    pub mvic_uv: BTreeMap<String, f64>,
    pub reports: Vec<ActivationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ConditionComparison>,
}

impl EmgReportSet {
    /// Table laid out as muscle × condition × %MVIC.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        for r in &self.reports {
            s.push_str(&r.to_csv_rows());
        }
        s
    }
}

/// Runs the full conditioning chain over every channel in a manifest.
///
/// Entries sharing a muscle and condition are treated as repetitions.
pub fn process_channels(
    entries: &[ChannelEntry],
    records: &[EmgRecord],
) -> Result<EmgReportSet, EmgError> {
    let task = entries
        .first()
        .map(|e| e.task)
        .ok_or(EmgError::NoRepetitions)?;
    if let Some(e) = entries.iter().find(|e| e.task != task) {
        return Err(EmgError::TaskMismatch(task, e.task));
    }
    let mut groups: BTreeMap<(Condition, String), Vec<EmgRecord>> = BTreeMap::new();
    let mut mvic: BTreeMap<String, f64> = BTreeMap::new();
    let mut mvic_peaks: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (e, r) in entries.iter().zip(records) {
        if let Some(v) = e.mvic_uv {
            if !(v > 0.0) {
                return Err(EmgError::NonPositiveMvic(v));
            }
            mvic.insert(e.muscle_id.clone(), v);
        }
        let env = condition_channel(r)?;
        if e.condition == Condition::MvicTest {
            let peak = env.samples.iter().copied().fold(0.0, f64::max);
            mvic_peaks
                .entry(e.muscle_id.clone())
                .or_default()
                .push(peak);
        } else {
            groups
                .entry((e.condition, e.muscle_id.clone()))
                .or_default()
                .push(env);
        }
    }
    for (m, peaks) in mvic_peaks {
        mvic.entry(m)
            .or_insert_with(|| peaks.iter().sum::<f64>() / peaks.len() as f64);
    }

    let mut by_condition: BTreeMap<Condition, BTreeMap<String, MuscleActivation>> = BTreeMap::new();
    for ((cond, muscle), reps) in groups {
        let avg = time_normalize_and_average(&reps, DEFAULT_NORMALIZED_POINTS)?;
        let reference = *mvic
            .get(&muscle)
            .ok_or_else(|| EmgError::MissingMvic(muscle.clone()))?;
        let pct = pct_mvic(&avg, reference)?;
        by_condition
            .entry(cond)
            .or_default()
            .insert(muscle, MuscleActivation::from_pct_series(&pct));
    }
    let reports: Vec<ActivationReport> = by_condition
        .into_iter()
        .map(|(condition, per_muscle)| ActivationReport {
            task,
            condition,
            per_muscle,
            disclaimer: None,
        })
        .collect();
    let find = |c: Condition| reports.iter().find(|r| r.condition == c);
    let comparison = match (
        find(Condition::CobotTraining),
        find(Condition::SpecialistTraining),
    ) {
        (Some(c), Some(s)) => Some(compare_conditions(c, s)?),
        _ => None,
    };
    Ok(EmgReportSet {
        task,
        mvic_uv: mvic,
        reports,
        comparison,
    })
}

/// Loads a manifest (a JSON array of [`ChannelEntry`]) and processes it.
pub fn report_from_manifest(path: &Path) -> Result<EmgReportSet, EmgError> {
    let text = std::fs::read_to_string(path).map_err(|e| EmgError::Io(e.to_string()))?;
    let entries: Vec<ChannelEntry> =
        serde_json::from_str(&text).map_err(|e| EmgError::InvalidRecord(e.to_string()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let records = entries
        .iter()
        .map(|e| read_channel_csv(&base.join(&e.file), &e.muscle_id, e.fs_hz, e.condition))
        .collect::<Result<Vec<_>, _>>()?;
    process_channels(&entries, &records)
}

/// Heart rate of the synthetic cardiac artifact, beats per second.
const SYNTH_HEART_HZ: f64 = 1.2;
/// Width of one synthetic QRS bump, seconds.
const SYNTH_QRS_S: f64 = 0.02;

/// Synthetic raw channel: Gaussian noise whose standard deviation follows
/// `mvic_uv * activation` (activation sampled every `tick_dt` seconds and
/// interpolated linearly), plus a low-frequency cardiac artifact of
/// `ecg_uv` peak amplitude.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_channel(
    muscle_id: &str,
    activation: &[f64],
    tick_dt: f64,
    fs: f64,
    mvic_uv: f64,
    ecg_uv: f64,
    condition: Condition,
    seed: u64,
) -> Result<EmgRecord, EmgError> {
    if activation.len() < 2 {
        return Err(EmgError::InvalidRecord(
            "need at least 2 activation ticks".into(),
        ));
    }
    if !(mvic_uv > 0.0) {
        return Err(EmgError::NonPositiveMvic(mvic_uv));
    }
    let duration = (activation.len() - 1) as f64 * tick_dt;
    let n = (duration * fs).round() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            let x = (t / tick_dt).min((activation.len() - 1) as f64);
            let k = (x.floor() as usize).min(activation.len() - 2);
            let s = x - k as f64;
            let a = activation[k] * (1.0 - s) + activation[k + 1] * s;
            let noise: f64 = StandardNormal.sample(&mut rng);
            let phase = (t * SYNTH_HEART_HZ).fract() / SYNTH_HEART_HZ - 0.5 / SYNTH_HEART_HZ;
            let ecg = ecg_uv * (-0.5 * (phase / SYNTH_QRS_S).powi(2)).exp();
            noise * mvic_uv * a + ecg
        })
        .collect();
    EmgRecord::new(muscle_id, fs, samples, condition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Waypoint;
    use proptest::prelude::*;

    fn rec(samples: Vec<f64>, fs: f64) -> EmgRecord {
        EmgRecord::new("biceps-brachii", fs, samples, Condition::CobotTraining).unwrap()
    }

    fn sine(freq: f64, amp: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin())
            .collect()
    }

    /// Power of the DFT bin at `freq` by direct summation (test oracle).
    fn bin_power(x: &[f64], freq: f64, fs: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * i as f64 / fs;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        re * re + im * im
    }

    fn power(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    #[test]
    fn rms_of_constant_and_zero() {
        let e = rms_envelope(&rec(vec![3.0; 500], 1000.0), 0.1).unwrap();
        assert!(e.samples.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert_eq!(e.samples.len(), 500);
        let z = rms_envelope(&rec(vec![0.0; 50], 1000.0), 0.1).unwrap();
        assert!(z.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rms_of_sine_interior() {
        // 10 Hz at 1 kHz: a 100 ms window spans exactly one period
        let e = rms_envelope(&rec(sine(10.0, 1.0, 1000.0, 2000), 1000.0), 0.1).unwrap();
        for v in &e.samples[50..1950] {
            assert!((v - 1.0 / 2f64.sqrt()).abs() <= 0.01 / 2f64.sqrt());
        }
    }

    #[test]
    fn rms_window_errors() {
        assert!(matches!(
            rms_envelope(&rec(vec![1.0; 10], 5.0), 0.05),
            Err(EmgError::WindowTooShort { .. })
        ));
    }

    #[test]
    fn ecg_removal_dc() {
        let out = remove_ecg(&rec(vec![100.0; 2000], 1000.0), 30.0).unwrap();
        let mean = out.samples.iter().sum::<f64>() / out.samples.len() as f64;
        assert!(mean.abs() <= 1.0, "residual mean {mean}");
        let z = remove_ecg(&rec(vec![0.0; 100], 1000.0), 30.0).unwrap();
        assert!(z.samples.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn ecg_removal_spectral_ratio() {
        let fs = 1000.0;
        let n = 4000;
        let ecg = sine(1.0, 200.0, fs, n);
        let emg = sine(80.0, 50.0, fs, n);
        let x: Vec<f64> = ecg.iter().zip(&emg).map(|(a, b)| a + b).collect();
        let y = remove_ecg(&rec(x.clone(), fs), 30.0).unwrap().samples;
        let db = |before: f64, after: f64| 10.0 * (after / before).log10();
        let low = db(bin_power(&x, 1.0, fs), bin_power(&y, 1.0, fs));
        let high = db(bin_power(&x, 80.0, fs), bin_power(&y, 80.0, fs));
        assert!(low <= -20.0, "1 Hz change {low} dB");
        assert!(high >= -1.0, "80 Hz change {high} dB");
        // half the cutoff is attenuated by at least 20 dB too
        let mid = sine(15.0, 1.0, fs, n);
        let ym = remove_ecg(&rec(mid.clone(), fs), 30.0).unwrap().samples;
        assert!(db(bin_power(&mid, 15.0, fs), bin_power(&ym, 15.0, fs)) <= -20.0);
    }

    #[test]
    fn ecg_cutoff_errors() {
        assert!(matches!(
            remove_ecg(&rec(vec![0.0; 10], 50.0), 30.0),
            Err(EmgError::CutoffAboveNyquist { .. })
        ));
    }

    #[test]
    fn ecg_filter_is_stable_under_reapplication() {
        let fs = 1000.0;
        let n = 3000;
        let x: Vec<f64> = sine(150.0, 30.0, fs, n)
            .iter()
            .zip(sine(230.0, 20.0, fs, n))
            .map(|(a, b)| a + b)
            .collect();
        let once = remove_ecg(&rec(x, fs), 30.0).unwrap();
        let twice = remove_ecg(&once, 30.0).unwrap();
        let change = (power(&twice.samples) - power(&once.samples)).abs() / power(&once.samples);
        assert!(change <= 0.01, "power change {change}");
    }

    #[test]
    fn averaging_examples() {
        let a = rec((0..50).map(|i| i as f64).collect(), 1000.0);
        let single = time_normalize_and_average(std::slice::from_ref(&a), 101).unwrap();
        assert_eq!(single.samples.len(), 101);
        assert_eq!(single.samples[0], 0.0);
        assert!((single.samples[100] - 49.0).abs() < 1e-12);
        assert!((single.samples[50] - 24.5).abs() < 1e-12);
        let pair = time_normalize_and_average(&[a.clone(), a.clone()], 101).unwrap();
        assert_eq!(pair.samples, single.samples);
        let two = rec(vec![2.0; 30], 1000.0);
        let four = rec(vec![4.0; 70], 1000.0);
        let m = time_normalize_and_average(&[two, four], 101).unwrap();
        assert!(m.samples.iter().all(|v| (v - 3.0).abs() < 1e-12));
        assert_eq!(
            time_normalize_and_average(&[], 101),
            Err(EmgError::NoRepetitions)
        );
        let short = rec(vec![1.0], 1000.0);
        assert_eq!(
            time_normalize_and_average(&[short], 101),
            Err(EmgError::RepetitionTooShort(0))
        );
    }

    #[test]
    fn pct_mvic_examples() {
        let r = rec(vec![50.0, 100.0], 1000.0);
        assert_eq!(pct_mvic(&r, 100.0).unwrap(), vec![50.0, 100.0]);
        assert_eq!(pct_mvic(&r, 0.0), Err(EmgError::NonPositiveMvic(0.0)));
    }

    fn moving(t: &[f64], f: impl Fn(f64) -> Vec3) -> Trajectory {
        Trajectory::new(t.iter().map(|&t| Waypoint::new(t, f(t))).collect()).unwrap()
    }

    #[test]
    fn surrogate_examples() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 * 0.05).collect();
        let zeros: Vec<ForceReading> = ts.iter().map(|&t| ForceReading::zero(t)).collect();
        let still = moving(&ts, |_| Vec3::new(0.4, 0.0, 0.3));
        for m in default_surrogates(TaskKind::GrossArm) {
            let a = surrogate_activation(&still, &zeros, &m).unwrap();
            assert!(a.iter().all(|v| *v == 0.0));
        }
        let base = |t: f64| Vec3::new(0.1 * t.sin(), 0.05 * t, 0.02 * t.cos());
        let one = moving(&ts, base);
        let two = moving(&ts, |t| base(t) * 2.0);
        for m in default_surrogates(TaskKind::GrossArm) {
            let d1 = surrogate_drive(&one, &zeros, &m).unwrap();
            let d2 = surrogate_drive(&two, &zeros, &m).unwrap();
            for (a, b) in d1.iter().zip(&d2) {
                assert!((b - 2.0 * a).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let a1 = surrogate_activation(&one, &zeros, &m).unwrap();
            let a2 = surrogate_activation(&two, &zeros, &m).unwrap();
            assert!(a1.iter().zip(&a2).all(|(a, b)| b >= a));
        }
        assert!(matches!(
            surrogate_activation(
                &one,
                &zeros[..10],
                &default_surrogates(TaskKind::GrossArm)[0]
            ),
            Err(EmgError::GridMismatch { .. })
        ));
    }

    #[test]
    fn default_surrogate_sets() {
        assert_eq!(target_muscles(TaskKind::GrossArm).len(), 6);
        assert_eq!(target_muscles(TaskKind::FineHand).len(), 5);
        for t in [TaskKind::GrossArm, TaskKind::FineHand] {
            for m in default_surrogates(t) {
                m.validate().unwrap();
            }
        }
    }

    fn report(task: TaskKind, cond: Condition, value: f64) -> ActivationReport {
        ActivationReport {
            task,
            condition: cond,
            per_muscle: target_muscles(task)
                .into_iter()
                .map(|m| {
                    (
                        m,
                        MuscleActivation {
                            mean_pct_mvic: value,
                            peak_pct_mvic: value * 2.0,
                        },
                    )
                })
                .collect(),
            disclaimer: None,
        }
    }

    #[test]
    fn comparison_examples() {
        let a = report(TaskKind::GrossArm, Condition::CobotTraining, 20.0);
        let z = compare_conditions(&a, &a).unwrap();
        assert!(z.rows.iter().all(|r| r.increment == 0.0));
        assert_eq!((z.mean_increment, z.sd_increment), (0.0, 0.0));

        let c = report(TaskKind::GrossArm, Condition::CobotTraining, 25.0);
        let s = report(TaskKind::GrossArm, Condition::SpecialistTraining, 10.0);
        let cmp = compare_conditions(&c, &s).unwrap();
        assert!(cmp.rows.iter().all(|r| r.increment == 15.0));
        assert_eq!(cmp.mean_increment, 15.0);
        assert_eq!(cmp.sd_increment, 0.0);

        let f = report(TaskKind::FineHand, Condition::SpecialistTraining, 10.0);
        assert!(compare_conditions(&c, &f).is_err());
        let mut partial = s.clone();
        partial.per_muscle.pop_first();
        assert!(matches!(
            compare_conditions(&c, &partial),
            Err(EmgError::MuscleSetMismatch(_))
        ));
        assert!(partial.validate().is_err());
        c.validate().unwrap();
    }

    #[test]
    fn comparison_sample_sd() {
        let c = report(TaskKind::FineHand, Condition::CobotTraining, 0.0);
        let mut c2 = c.clone();
        for (i, v) in c2.per_muscle.values_mut().enumerate() {
            v.mean_pct_mvic = [10.0, 12.0, 14.0, 16.0, 18.0][i];
        }
        let cmp = compare_conditions(&c2, &c).unwrap();
        assert!((cmp.mean_increment - 14.0).abs() < 1e-12);
        // sample sd of 10,12,14,16,18 = sqrt(40/4)
        assert!((cmp.sd_increment - 10f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rms_sign_and_scale(x in prop::collection::vec(-500.0f64..500.0, 5..300), c in 0.01f64..50.0) {
            let r = rec(x.clone(), 1000.0);
            let e = rms_envelope(&r, 0.02).unwrap();
            let neg = rms_envelope(&rec(x.iter().map(|v| -v).collect(), 1000.0), 0.02).unwrap();
            prop_assert_eq!(&e.samples, &neg.samples);
            let scaled = rms_envelope(&rec(x.iter().map(|v| v * c).collect(), 1000.0), 0.02).unwrap();
            for (a, b) in e.samples.iter().zip(&scaled.samples) {
                prop_assert!((b - c * a).abs() <= 1e-9 * (1.0 + c * a));
            }
        }

        #[test]
        fn pct_mvic_linearity(
            x in prop::collection::vec(0.0f64..500.0, 1..50),
            y in prop::collection::vec(0.0f64..500.0, 1..50),
            a in -5.0f64..5.0, mvic in 1.0f64..1000.0, k in 0.1f64..10.0
        ) {
            let n = x.len().min(y.len());
            let (x, y) = (&x[..n], &y[..n]);
            let mix: Vec<f64> = x.iter().zip(y).map(|(p, q)| a * p + q).collect();
            let px = pct_mvic(&rec(x.to_vec(), 100.0), mvic).unwrap();
            let py = pct_mvic(&rec(y.to_vec(), 100.0), mvic).unwrap();
            let pm = pct_mvic(&rec(mix, 100.0), mvic).unwrap();
            let pk = pct_mvic(&rec(x.to_vec(), 100.0), mvic * k).unwrap();
            for i in 0..n {
                prop_assert!((pm[i] - (a * px[i] + py[i])).abs() <= 1e-9 * (1.0 + pm[i].abs()));
                prop_assert!((pk[i] * k - px[i]).abs() <= 1e-9 * (1.0 + px[i].abs()));
            }
        }

        #[test]
        fn surrogate_translation_invariant(dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0) {
            let ts: Vec<f64> = (0..30).map(|i| i as f64 * 0.05).collect();
            let f: Vec<ForceReading> = ts.iter().map(|&t| ForceReading::new(Vec3::new(t, 0.0, 1.0), t)).collect();
            let tr = moving(&ts, |t| Vec3::new(0.1 * t, 0.05 * t * t, 0.0));
            let moved = tr.translated(&Vec3::new(dx, dy, dz));
            for m in default_surrogates(TaskKind::GrossArm) {
                let a = surrogate_drive(&tr, &f, &m).unwrap();
                let b = surrogate_drive(&moved, &f, &m).unwrap();
                for (p, q) in a.iter().zip(&b) {
                    prop_assert!((p - q).abs() < 1e-9);
                }
            }
        }
    }
}
