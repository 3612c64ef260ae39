//! Parametric stand-in for the human subject.
//!
//! The subject's range of motion is an axis-aligned ellipsoid. Inside a
//! scaled "comfort" sub-ellipsoid the subject is passive; beyond it they push
//! back with a linear spring. The subject presses stop once the resistance
//! reaches their personal threshold.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Vec3;

/// Names accepted by [`SubjectProfile::builtin`].
pub const BUILTIN_PROFILES: [&str; 3] = ["permissive", "limited", "guarded"];

/// Default time the subject must stay comfortable before signalling resume.
pub const DEFAULT_SETTLE_S: f64 = 0.5;

/// After re-arming, resistance above threshold is tolerated for this long
/// unless it drops below threshold first.
pub const DEFAULT_REARM_GRACE_S: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum SubjectError {
    #[error("invalid subject profile: {0}")]
    InvalidProfile(String),
    #[error("feedback tick at t={t} precedes previous tick t={last}")]
    OutOfOrder { t: f64, last: f64 },
    #[error("profile file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectProfile {
    #[serde(default = "default_subject_id")]
    pub subject_id: String,
    pub rom_center: Vec3,
    /// Ellipsoid semi-axes, meters.
    pub rom_radii: Vec3,
    /// Resistance spring constant beyond the comfort boundary, N/m.
    pub stiffness_k: f64,
    /// Comfort ellipsoid is the ROM scaled by this factor.
    pub comfort_margin: f64,
    /// Resistance at which the subject presses stop, N.
    pub stop_threshold: f64,
    /// Per-muscle MVIC reference, microvolts.
    #[serde(default)]
    pub mvic: BTreeMap<String, f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_subject_id() -> String {
    "subject".to_string()
}

impl SubjectProfile {
    /// Spherical ROM with the given center and radius, no noise.
    pub fn spherical(
        center: Vec3,
        radius: f64,
        stiffness_k: f64,
        comfort_margin: f64,
        stop_threshold: f64,
    ) -> Self {
        Self {
            subject_id: default_subject_id(),
            rom_center: center,
            rom_radii: Vec3::repeat(radius),
            stiffness_k,
            comfort_margin,
            stop_threshold,
            mvic: BTreeMap::new(),
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SubjectError> {
        let bad = |m: &str| Err(SubjectError::InvalidProfile(m.to_string()));
        if self.rom_radii.iter().any(|r| !(*r > 0.0)) {
            return bad("rom_radii must be positive");
        }
        if self.rom_center.iter().any(|c| !c.is_finite()) {
            return bad("rom_center must be finite");
        }
        if !(self.stiffness_k >= 0.0) {
            return bad("stiffness_k must be >= 0");
        }
        if !(self.comfort_margin > 0.0 && self.comfort_margin <= 1.0) {
            return bad("comfort_margin must be in (0, 1]");
        }
        if !(self.stop_threshold > 0.0) {
            return bad("stop_threshold must be positive");
        }
        if let Some((m, _)) = self.mvic.iter().find(|(_, v)| !(**v > 0.0)) {
            return Err(SubjectError::InvalidProfile(format!(
                "mvic for {m} must be positive"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self, SubjectError> {
        let p: Self = serde_json::from_str(s).map_err(|e| SubjectError::Format(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    /// One of the profiles shipped with the crate, see [`BUILTIN_PROFILES`].
    pub fn builtin(name: &str) -> Option<Self> {
        let text = match name {
            "permissive" => include_str!("../data/profiles/permissive.json"),
            "limited" => include_str!("../data/profiles/limited.json"),
            "guarded" => include_str!("../data/profiles/guarded.json"),
            _ => return None,
        };
        Some(Self::from_json_str(text).expect("builtin profile is valid"))
    }

    pub fn load(path: &Path) -> Result<Self, SubjectError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SubjectError::Format(e.to_string()))?;
        Self::from_json_str(&text)
    }
}

/// Ellipsoidal radius of `pos`: 0 at the ROM center, 1 on the ROM surface.
pub fn normalized_depth(pos: &Vec3, profile: &SubjectProfile) -> f64 {
    (pos - profile.rom_center)
        .component_div(&profile.rom_radii)
        .norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceReading {
    pub f: Vec3,
    pub torque: Vec3,
    pub t: f64,
}

impl ForceReading {
    pub fn new(f: Vec3, t: f64) -> Self {
        Self {
            f,
            torque: Vec3::zeros(),
            t,
        }
    }

    pub fn zero(t: f64) -> Self {
        Self::new(Vec3::zeros(), t)
    }

    pub fn magnitude(&self) -> f64 {
        self.f.norm()
    }
}

/// Noise-free resistance the subject exerts at `pos`.
///
/// Zero inside the comfort ellipsoid; beyond it, a spring pulling back toward
/// the ROM center whose extension is the distance from `pos` to the comfort
/// surface along the ray from the center.
pub fn resistance_force(pos: &Vec3, profile: &SubjectProfile) -> ForceReading {
    let d = normalized_depth(pos, profile);
    if d <= profile.comfort_margin {
        return ForceReading::zero(0.0);
    }
    let offset = pos - profile.rom_center;
    let penetration = offset.norm() * (1.0 - profile.comfort_margin / d);
    let dir = -offset.normalize();
    ForceReading::new(dir * (profile.stiffness_k * penetration), 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeedbackKind {
    Stop,
    Resume,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub t: f64,
    pub sample_index: usize,
    pub kind: FeedbackKind,
}

/// A simulated subject: force sensing plus the stop/resume decision.
#[derive(Debug, Clone)]
pub struct Subject {
    profile: SubjectProfile,
    settle_s: f64,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    stop_pending: bool,
    comfortable_since: Option<f64>,
    grace_s: f64,
    armed: bool,
    rearmed_at: Option<f64>,
    last_t: Option<f64>,
}

impl Subject {
    pub fn new(profile: SubjectProfile) -> Result<Self, SubjectError> {
        profile.validate()?;
        let noise = if profile.noise_sigma > 0.0 {
            Some(Normal::new(0.0, profile.noise_sigma).expect("sigma validated"))
        } else {
            None
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(profile.seed),
            profile,
            settle_s: DEFAULT_SETTLE_S,
            noise,
            stop_pending: false,
            comfortable_since: None,
            grace_s: DEFAULT_REARM_GRACE_S,
            armed: true,
            rearmed_at: None,
            last_t: None,
        })
    }

    pub fn with_settle_time(mut self, settle_s: f64) -> Self {
        self.settle_s = settle_s;
        self
    }

    pub fn with_rearm_grace(mut self, grace_s: f64) -> Self {
        self.grace_s = grace_s;
        self
    }

    pub fn profile(&self) -> &SubjectProfile {
        &self.profile
    }

    pub fn stop_pending(&self) -> bool {
        self.stop_pending
    }

    /// Force/torque reading at `pos`, including optional sensor noise.
    pub fn sense(&mut self, pos: &Vec3, t: f64) -> ForceReading {
        let mut r = resistance_force(pos, &self.profile);
        r.t = t;
        if let Some(n) = &self.noise {
            let e = Vec3::new(
                n.sample(&mut self.rng),
                n.sample(&mut self.rng),
                n.sample(&mut self.rng),
            );
            r.f += e;
        }
        r
    }

    /// Decides whether the subject presses stop (or signals resume) this tick.
    pub fn feedback_step(
        &mut self,
        pos: &Vec3,
        force: &ForceReading,
        t: f64,
        sample_index: usize,
    ) -> Result<Option<FeedbackEvent>, SubjectError> {
        if let Some(last) = self.last_t {
            if t < last {
                return Err(SubjectError::OutOfOrder { t, last });
            }
        }
        self.last_t = Some(t);
        let comfortable = normalized_depth(pos, &self.profile) <= self.profile.comfort_margin;
        if !self.stop_pending {
            let over = force.magnitude() >= self.profile.stop_threshold;
            if !self.armed {
                let waited = self.rearmed_at.is_none_or(|r| t - r >= self.grace_s - 1e-9);
                if !over || waited {
                    self.armed = true;
                }
            }
            if over && self.armed {
                self.stop_pending = true;
                self.comfortable_since = None;
                return Ok(Some(FeedbackEvent {
                    t,
                    sample_index,
                    kind: FeedbackKind::Stop,
                }));
            }
            return Ok(None);
        }
        if !comfortable {
            self.comfortable_since = None;
            return Ok(None);
        }
        let since = *self.comfortable_since.get_or_insert(t);
        if t - since >= self.settle_s - 1e-9 {
            self.stop_pending = false;
            self.comfortable_since = None;
            return Ok(Some(FeedbackEvent {
                t,
                sample_index,
                kind: FeedbackKind::Resume,
            }));
        }
        Ok(None)
    }

    /// Clears a pending stop once an adjusted trajectory has been accepted.
    /// The next stop needs the resistance to fall below threshold first, or
    /// the grace period to pass.
    pub fn rearm(&mut self) {
        self.stop_pending = false;
        self.comfortable_since = None;
        self.armed = false;
        self.rearmed_at = self.last_t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn builtin_profiles_load() {
        for name in BUILTIN_PROFILES {
            let p = SubjectProfile::builtin(name).unwrap();
            assert_eq!(p.subject_id, name);
            assert_eq!(p.mvic.len(), 11);
        }
        assert!(SubjectProfile::builtin("nobody").is_none());
    }

    fn sphere(k: f64, margin: f64, stop: f64) -> SubjectProfile {
        SubjectProfile::spherical(Vec3::zeros(), 0.4, k, margin, stop)
    }

    #[test]
    fn depth_examples() {
        let p = sphere(200.0, 1.0, 8.0);
        assert_eq!(normalized_depth(&Vec3::zeros(), &p), 0.0);
        assert!((normalized_depth(&Vec3::new(0.4, 0.0, 0.0), &p) - 1.0).abs() < 1e-15);
        let mut e = p.clone();
        e.rom_radii = Vec3::new(0.4, 0.3, 0.3);
        let d = normalized_depth(&Vec3::new(0.2, 0.15, 0.0), &e);
        assert!((d - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spring_examples() {
        let p = sphere(200.0, 1.0, 8.0);
        assert_eq!(resistance_force(&Vec3::zeros(), &p).magnitude(), 0.0);
        let f = resistance_force(&Vec3::new(0.45, 0.0, 0.0), &p);
        assert!((f.magnitude() - 10.0).abs() < 1e-9);
        assert!(f.f.x < 0.0);
        let f = resistance_force(&Vec3::new(0.0, 0.0, 0.625), &p);
        assert!((f.magnitude() - 45.0).abs() < 1e-9);
        assert_eq!(f.torque, Vec3::zeros());
    }

    #[test]
    fn stop_is_debounced_and_resume_needs_settle() {
        let p = sphere(200.0, 1.0, 8.0);
        let mut s = Subject::new(p).unwrap().with_settle_time(0.2);
        let far = Vec3::new(0.45, 0.0, 0.0);
        let f = s.sense(&far, 0.0);
        assert!((f.magnitude() - 10.0).abs() < 1e-9);
        let ev = s.feedback_step(&far, &f, 0.0, 3).unwrap().unwrap();
        assert_eq!(ev.kind, FeedbackKind::Stop);
        assert_eq!(ev.sample_index, 3);
        assert_eq!(s.feedback_step(&far, &f, 0.05, 4).unwrap(), None);
        let c = Vec3::zeros();
        let z = s.sense(&c, 0.1);
        assert_eq!(s.feedback_step(&c, &z, 0.1, 5).unwrap(), None);
        assert_eq!(s.feedback_step(&c, &z, 0.2, 6).unwrap(), None);
        let ev = s.feedback_step(&c, &z, 0.3, 7).unwrap().unwrap();
        assert_eq!(ev.kind, FeedbackKind::Resume);
        assert!(!s.stop_pending());
    }

    #[test]
    fn rearmed_subject_waits_for_relief_or_grace() {
        let p = sphere(200.0, 1.0, 8.0);
        let mut s = Subject::new(p).unwrap().with_rearm_grace(0.5);
        let far = Vec3::new(0.45, 0.0, 0.0);
        let f = s.sense(&far, 0.0);
        assert!(s.feedback_step(&far, &f, 0.0, 0).unwrap().is_some());
        s.rearm();
        assert_eq!(s.feedback_step(&far, &f, 0.1, 1).unwrap(), None);
        assert_eq!(s.feedback_step(&far, &f, 0.4, 2).unwrap(), None);
        let ev = s.feedback_step(&far, &f, 0.5, 3).unwrap().unwrap();
        assert_eq!(ev.kind, FeedbackKind::Stop);
        // relief re-arms immediately
        s.rearm();
        let c = Vec3::zeros();
        let z = s.sense(&c, 0.6);
        assert_eq!(s.feedback_step(&c, &z, 0.6, 4).unwrap(), None);
        let ev = s.feedback_step(&far, &f, 0.65, 5).unwrap().unwrap();
        assert_eq!(ev.kind, FeedbackKind::Stop);
    }

    #[test]
    fn comfortable_subject_is_silent() {
        let mut s = Subject::new(sphere(200.0, 1.0, 8.0)).unwrap();
        let c = Vec3::zeros();
        let f = s.sense(&c, 0.0);
        assert_eq!(s.feedback_step(&c, &f, 0.0, 0).unwrap(), None);
        assert!(matches!(
            s.feedback_step(&c, &f, -1.0, 1),
            Err(SubjectError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn profile_validation_and_json() {
        let mut p = sphere(200.0, 0.9, 8.0);
        p.mvic.insert("biceps-brachii".into(), 250.0);
        p.validate().unwrap();
        let json = serde_json::to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["rom_center"], serde_json::json!([0.0, 0.0, 0.0]));
        assert_eq!(SubjectProfile::from_json_str(&json).unwrap(), p);

        let mut bad = p.clone();
        bad.comfort_margin = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = p.clone();
        bad.mvic.insert("x".into(), 0.0);
        assert!(bad.validate().is_err());
        let mut bad = p;
        bad.rom_radii.y = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let mut p = sphere(200.0, 1.0, 8.0);
        p.noise_sigma = 0.5;
        p.seed = 7;
        let mut a = Subject::new(p.clone()).unwrap();
        let mut b = Subject::new(p).unwrap();
        for k in 0..10 {
            let t = k as f64;
            assert_eq!(a.sense(&Vec3::zeros(), t), b.sense(&Vec3::zeros(), t));
        }
    }

    fn arb_profile() -> impl Strategy<Value = SubjectProfile> {
        (
            (0.05f64..0.6, 0.05f64..0.6, 0.05f64..0.6),
            0.0f64..1000.0,
            0.1f64..=1.0,
        )
            .prop_map(|((a, b, c), k, m)| {
                let mut p = SubjectProfile::spherical(Vec3::new(0.1, -0.2, 0.3), 1.0, k, m, 5.0);
                p.rom_radii = Vec3::new(a, b, c);
                p
            })
    }

    fn arb_dir() -> impl Strategy<Value = Vec3> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
            .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
    }

    proptest! {
        #[test]
        fn zero_inside_comfort(p in arb_profile(), dir in arb_dir(), frac in 0.0f64..=1.0) {
            // point at depth frac * comfort_margin along dir
            let unit_depth = normalized_depth(&(p.rom_center + dir), &p);
            let pos = p.rom_center + dir * (frac * p.comfort_margin / unit_depth);
            prop_assert_eq!(resistance_force(&pos, &p).magnitude(), 0.0);
        }

        #[test]
        fn monotone_along_rays(p in arb_profile(), dir in arb_dir(), r1 in 0.0f64..2.0, r2 in 0.0f64..2.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let f_lo = resistance_force(&(p.rom_center + dir * lo), &p).magnitude();
            let f_hi = resistance_force(&(p.rom_center + dir * hi), &p).magnitude();
            prop_assert!(f_lo <= f_hi + 1e-12);
        }

        #[test]
        fn force_points_toward_center(p in arb_profile(), dir in arb_dir(), r in 0.0f64..2.0) {
            let pos = p.rom_center + dir * r;
            let f = resistance_force(&pos, &p);
            if f.magnitude() > 0.0 {
                prop_assert!(f.f.dot(&(p.rom_center - pos)) >= 0.0);
            }
        }

        #[test]
        fn shrinking_rom_never_reduces_force(
            p in arb_profile(), dir in arb_dir(), r in 0.0f64..2.0,
            s in (0.2f64..=1.0, 0.2f64..=1.0, 0.2f64..=1.0)
        ) {
            let pos = p.rom_center + dir * r;
            let mut q = p.clone();
            q.rom_radii = p.rom_radii.component_mul(&Vec3::new(s.0, s.1, s.2));
            let before = resistance_force(&pos, &p).magnitude();
            let after = resistance_force(&pos, &q).magnitude();
            prop_assert!(after + 1e-9 >= before);
        }

        #[test]
        fn at_most_one_stop_between_resumes(path in prop::collection::vec(0.0f64..1.0, 1..200)) {
            let mut s = Subject::new(SubjectProfile::spherical(Vec3::zeros(), 0.4, 200.0, 0.8, 8.0))
                .unwrap()
                .with_settle_time(0.1);
            let mut stops_since_resume = 0;
            for (k, r) in path.into_iter().enumerate() {
                let t = k as f64 * 0.05;
                let pos = Vec3::new(r, 0.0, 0.0);
                let f = s.sense(&pos, t);
                match s.feedback_step(&pos, &f, t, k).unwrap() {
                    Some(FeedbackEvent { kind: FeedbackKind::Stop, .. }) => stops_since_resume += 1,
                    Some(FeedbackEvent { kind: FeedbackKind::Resume, .. }) => stops_since_resume = 0,
                    None => {}
                }
                prop_assert!(stops_since_resume <= 1);
            }
        }
    }
}
