//! Headless acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::f64::consts::{PI, SQRT_2};
use std::process::Command as Proc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rehab_core::emg::{
    default_surrogates, pct_mvic, remove_ecg, rms_envelope, surrogate_report, Condition, EmgRecord,
};
use rehab_core::imitation::{
    run_session, Label, ScriptedExpert, SessionConfig, SessionStatus, DEFAULT_BAND_RADIUS_M,
};
use rehab_core::safety::{stage_defaults, Mode, F_SAFE_N};
use rehab_core::session::{run_scripted_session, ScriptedSessionOptions};
use rehab_core::subject::{normalized_depth, ForceReading, Subject, SubjectProfile};
use rehab_core::task::scale_amplitude;
use rehab_core::{Command, SafetyMonitor, TaskKind, TaskScript, Trajectory, Vec3, DEFAULT_DT};

// Pinned tolerances.
const FIDELITY_RMSE_M: f64 = 2e-2;
const FIDELITY_BAND_FRACTION: f64 = 0.95;
const FIDELITY_RUNTIME_S: f64 = 60.0;
const ESTOP_FUZZ_COMMANDS: usize = 1000;
const CONVERGENCE_SEEDS: u64 = 100;
const CONVERGENCE_MAX_ADJUSTMENTS: usize = 5;
const CONVERGENCE_MAX_DEPTH: f64 = 1.0;
const EXPERT_GAMMA: f64 = 0.8;
const TRUNCATED_AMPLITUDE: f64 = 0.6;
const RMS_REL_TOL: f64 = 0.01;
const ECG_STOP_DB: f64 = 20.0;
const ECG_PASS_DB: f64 = 1.0;
const LINEARITY_CASES: usize = 1000;
const LINEARITY_REL_TOL: f64 = 1e-12;
const INTERVAL_S: f64 = 300.0;
const REST_S: f64 = 20.0;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn policy_fidelity() -> Outcome {
    let t0 = Instant::now();
    let profile = SubjectProfile::builtin("permissive").unwrap();
    let art = run_scripted_session(
        &profile,
        &ScriptedSessionOptions::new(TaskKind::GrossArm, 3, 1),
    )
    .map_err(|e| e.to_string())?;
    let runtime = t0.elapsed().as_secs_f64();
    let ev = art.record.evaluation.ok_or("session did not converge")?;
    check(
        ev.band_radius == DEFAULT_BAND_RADIUS_M
            && ev.rmse <= FIDELITY_RMSE_M
            && ev.band_fraction >= FIDELITY_BAND_FRACTION
            && runtime <= FIDELITY_RUNTIME_S,
        format!(
            "rmse {:.4} m (<= {FIDELITY_RMSE_M}), band_fraction({}) {:.3} (>= {FIDELITY_BAND_FRACTION}), runtime {runtime:.2} s (<= {FIDELITY_RUNTIME_S})",
            ev.rmse, ev.band_radius, ev.band_fraction
        ),
    )
}

fn emergency_stop() -> Outcome {
    let cfg = stage_defaults(3).unwrap();
    let mut m = SafetyMonitor::new(cfg).unwrap();
    let center = cfg.workspace.center();
    let dt = DEFAULT_DT;
    let force = |f: f64, t: f64| ForceReading::new(Vec3::new(0.0, 0.0, f), t);
    m.tick(&force(0.0, 0.0), Some(Command::Start), &center, 0.0)
        .unwrap();
    // 0.5 N per tick from 40 N: 44.5 N at tick 10, 45.0 N at tick 11
    let mut crossing = None;
    for k in 1..=20 {
        let f = 40.0 + 0.5 * (k - 1) as f64;
        let t = k as f64 * dt;
        m.tick(&force(f, t), None, &center, t).unwrap();
        if f >= F_SAFE_N && crossing.is_none() {
            crossing = Some((k, m.mode(), f));
        }
        if f < F_SAFE_N && m.mode() != Mode::Running {
            return Err(format!("left Running at {f} N"));
        }
    }
    let (k, mode, f) = crossing.ok_or("ramp never crossed")?;
    if mode != Mode::EmergencyStop {
        return Err(format!("mode {mode} on the crossing tick ({f} N)"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let mut max_disp: f64 = 0.0;
    let mut rejected = 0;
    for i in 0..ESTOP_FUZZ_COMMANDS {
        let t = (21 + i) as f64 * dt;
        let cmd = match rng.random_range(0..4) {
            0 => None,
            1 => Some(Command::Start),
            2 => Some(Command::Stop),
            _ => Some(Command::Resume),
        };
        let f = rng.random_range(0.0..60.0);
        let off = Vec3::new(
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.5..0.5),
        );
        if m.tick(&force(f, t), cmd, &(center + off), t).is_err() {
            rejected += 1;
        }
        if m.mode() != Mode::EmergencyStop {
            return Err(format!(
                "left EmergencyStop after fuzz command {i}: {cmd:?}"
            ));
        }
        max_disp = max_disp.max(m.state().speed_scale * cfg.v_max * dt);
    }
    check(
        max_disp == 0.0,
        format!(
            "EmergencyStop on tick {k} at {f:.1} N (threshold {F_SAFE_N}); commanded displacement after = {max_disp}; absorbing under {ESTOP_FUZZ_COMMANDS} fuzzed commands ({rejected} rejected)"
        ),
    )
}

fn figure_eight(center: Vec3, amp: f64, omega: f64, dt: f64) -> Trajectory {
    let n = (2.0 * PI / omega / dt).round() as usize;
    let pts: Vec<Vec3> = (0..=n)
        .map(|i| {
            let t = i as f64 * dt;
            center + Vec3::new((omega * t).sin(), 0.5 * (2.0 * omega * t).sin(), 0.0) * amp
        })
        .collect();
    Trajectory::from_positions(0.0, dt, &pts).unwrap()
}

fn convergence() -> Outcome {
    let center = Vec3::new(0.45, 0.0, 0.35);
    let amp = 0.2;
    let traj = figure_eight(center, amp, 0.1, DEFAULT_DT);
    let mut worst_adj = 0;
    let mut worst_depth: f64 = 0.0;
    for seed in 0..CONVERGENCE_SEEDS {
        // ROM radius at half the expert amplitude
        let mut p = SubjectProfile::spherical(center, 0.5 * amp, 200.0, 0.8, 1.0);
        p.noise_sigma = 0.1;
        p.seed = seed;
        let mut expert = ScriptedExpert::new(center);
        expert.gamma = EXPERT_GAMMA;
        let out = run_session(
            &mut expert,
            Subject::new(p.clone()).unwrap(),
            SafetyMonitor::new(stage_defaults(3).unwrap()).unwrap(),
            traj.clone(),
            SessionConfig::default(),
        )
        .map_err(|e| format!("seed {seed}: {e}"))?;
        if out.status != SessionStatus::Converged {
            return Err(format!("seed {seed}: {:?}", out.status));
        }
        out.dataset
            .check_labels()
            .map_err(|e| format!("seed {seed}: {e}"))?;
        let its = &out.dataset.iterations;
        for it in its {
            let bad = it.trace.iter().filter(|s| s.label == Label::Bad).count();
            if bad != usize::from(it.stop_index.is_some()) {
                return Err(format!(
                    "seed {seed} iteration {}: {bad} bad labels",
                    it.index
                ));
            }
        }
        if its.last().is_none_or(|it| it.stop_index.is_some()) {
            return Err(format!("seed {seed}: final pass stopped"));
        }
        let depth = out
            .final_trajectory
            .positions()
            .map(|q| normalized_depth(&q, &p))
            .fold(0.0, f64::max);
        worst_adj = worst_adj.max(out.dataset.adjustments());
        worst_depth = worst_depth.max(depth);
    }
    check(
        worst_adj <= CONVERGENCE_MAX_ADJUSTMENTS && worst_depth <= CONVERGENCE_MAX_DEPTH,
        format!(
            "{CONVERGENCE_SEEDS} seeds, gamma {EXPERT_GAMMA}: max adjustments {worst_adj} (<= {CONVERGENCE_MAX_ADJUSTMENTS}), max final depth {worst_depth:.3} (<= {CONVERGENCE_MAX_DEPTH}), labeling invariant held on every run"
        ),
    )
}

fn activation() -> Outcome {
    let profile = SubjectProfile::builtin("permissive").unwrap();
    let forces = |tr: &Trajectory| {
        let mut s = Subject::new(profile.clone()).unwrap();
        tr.waypoints()
            .iter()
            .map(|w| s.sense(&w.pos, w.t))
            .collect::<Vec<_>>()
    };
    let mut lines = Vec::new();
    for task in [TaskKind::GrossArm, TaskKind::FineHand] {
        let full = TaskScript::builtin(task)
            .trajectory()
            .resample(DEFAULT_DT)
            .unwrap();
        let short = scale_amplitude(&full, TRUNCATED_AMPLITUDE);
        let models = default_surrogates(task);
        let a = surrogate_report(
            task,
            Condition::CobotTraining,
            &full,
            &forces(&full),
            &models,
        )
        .unwrap();
        let b = surrogate_report(
            task,
            Condition::SpecialistTraining,
            &short,
            &forces(&short),
            &models,
        )
        .unwrap();
        let mut min_gap = f64::INFINITY;
        let mut n = 0;
        for m in models.iter().filter(|m| m.excursion_gain > 0.0) {
            let x = a.per_muscle[&m.muscle_id].mean_pct_mvic;
            let y = b.per_muscle[&m.muscle_id].mean_pct_mvic;
            if x.is_nan() || x <= y {
                return Err(format!(
                    "{task} {}: full {x:.3} vs truncated {y:.3}",
                    m.muscle_id
                ));
            }
            min_gap = min_gap.min(x - y);
            n += 1;
        }
        lines.push(format!(
            "{task}: {n} muscles, min increment {min_gap:.3} %MVIC"
        ));
    }
    Ok(format!(
        "full > {TRUNCATED_AMPLITUDE} amplitude for every muscle; {}",
        lines.join("; ")
    ))
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn emg_analytics() -> Outcome {
    let fs = 1000.0;
    let sine = |f: f64, secs: f64| -> Vec<f64> {
        (0..(secs * fs) as usize)
            .map(|i| (2.0 * PI * f * i as f64 / fs).sin())
            .collect()
    };
    let rec = |s: Vec<f64>| EmgRecord::new("m", fs, s, Condition::CobotTraining).unwrap();

    // 10 Hz sine, 100 ms window: one full period per window
    let env = rms_envelope(&rec(sine(10.0, 2.0)), 0.1).unwrap();
    let mid = env.samples[env.samples.len() / 2];
    let rms_err = (mid - 1.0 / SQRT_2).abs() / (1.0 / SQRT_2);

    let gain_db = |f: f64| {
        let x = sine(f, 10.0);
        let y = remove_ecg(&rec(x.clone()), 30.0).unwrap().samples;
        let (a, b) = (3000, 7000);
        20.0 * (rms(&y[a..b]) / rms(&x[a..b])).log10()
    };
    let g1 = gain_db(1.0);
    let g80 = gain_db(80.0);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..LINEARITY_CASES {
        let n = rng.random_range(1..50);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..500.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..500.0)).collect();
        let (a, b) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
        let mvic = rng.random_range(1.0..1000.0);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let px = pct_mvic(&rec(x.clone()), mvic).unwrap();
        let py = pct_mvic(&rec(y), mvic).unwrap();
        let pc = pct_mvic(&rec(combo), mvic).unwrap();
        for i in 0..n {
            let expect = a * px[i] + b * py[i];
            let direct = 100.0 * x[i] / mvic;
            let scale = expect.abs().max(1.0);
            worst = worst.max((pc[i] - expect).abs() / scale);
            worst = worst.max((px[i] - direct).abs() / direct.abs().max(1.0));
        }
    }
    check(
        rms_err <= RMS_REL_TOL && -g1 >= ECG_STOP_DB && -g80 <= ECG_PASS_DB && worst <= LINEARITY_REL_TOL,
        format!(
            "RMS(unit sine) {mid:.5} (error {:.3} %, <= 1 %); remove_ecg 1 Hz {g1:.1} dB (<= -{ECG_STOP_DB}), 80 Hz {g80:.3} dB (>= -{ECG_PASS_DB}); pct_mvic linearity over {LINEARITY_CASES} cases, max rel error {worst:.1e}",
            rms_err * 100.0
        ),
    )
}

fn scheduling() -> Outcome {
    let profile = SubjectProfile::builtin("permissive").unwrap();
    let mut opts = ScriptedSessionOptions::new(TaskKind::FineHand, 3, 1);
    opts.session.intervals = Some(2);
    let t0 = Instant::now();
    let art = run_scripted_session(&profile, &opts).map_err(|e| e.to_string())?;
    let wall = t0.elapsed().as_secs_f64();
    let dt = art.outcome.dt;
    let tr = &art.outcome.transitions;
    let rests: Vec<_> = tr.iter().filter(|t| t.to == Mode::Resting).collect();
    if rests.len() != 1 {
        return Err(format!("{} Resting spans", rests.len()));
    }
    let mut spans = Vec::new();
    let mut running_since = None;
    let mut rest_span = None;
    for t in tr {
        if t.from == Mode::Running {
            spans.push(t.t - running_since.ok_or("Running without entry")?);
        }
        if t.to == Mode::Running {
            running_since = Some(t.t);
        }
        if t.from == Mode::Resting {
            rest_span = Some(t.t - rests[0].t);
        }
    }
    let rest = rest_span.ok_or("rest never ended")?;
    let tol = dt + 1e-9;
    check(
        (rest - REST_S).abs() <= tol
            && spans.len() == 2
            && spans.iter().all(|s| (s - INTERVAL_S).abs() <= tol)
            && art.record.status == SessionStatus::Converged,
        format!(
            "1 Resting span of {rest:.3} s ({REST_S} ± {dt}); Running spans {spans:.3?} s ({INTERVAL_S} ± {dt}); {:.0} simulated s in {wall:.2} wall s",
            art.outcome.ticks as f64 * dt
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = Proc::new(env!("CARGO_BIN_EXE_rehab"))
            .args([
                "run",
                "--task",
                "gross",
                "--profile",
                "limited",
                "--stage",
                "2",
                "--seed",
                "42",
                "--out",
            ])
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!(
                "rehab run failed: {}",
                String::from_utf8_lossy(&o.stderr)
            ));
        }
        let s = out.join("gross-stage2-seed42");
        let read = |f: &str| std::fs::read(s.join(f)).map_err(|e| format!("{f}: {e}"));
        files.push((read("dataset.jsonl")?, read("policy.json")?));
    }
    let (a, b) = (&files[0], &files[1]);
    check(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "two `rehab run` invocations: dataset.jsonl {} bytes identical={}, policy.json {} bytes identical={}",
            a.0.len(),
            a.0 == b.0,
            a.1.len(),
            a.1 == b.1
        ),
    )
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("policy-fidelity", policy_fidelity),
        ("emergency-stop", emergency_stop),
        ("imitation-convergence", convergence),
        ("activation-direction", activation),
        ("emg-analytics", emg_analytics),
        ("interval-scheduling", scheduling),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
