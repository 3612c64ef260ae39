//! Time-indexed imitation policy: a penalized cubic B-spline fitted to
//! weighted labeled states.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Trajectory, TrajectoryError, Waypoint, WORLD_FRAME};
use crate::Vec3;

pub const DEGREE: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("no training samples")]
    NoSamples,
    #[error("duration must be positive, got {0}")]
    NonPositiveDuration(f64),
    #[error("normal equations are not positive definite")]
    Singular,
    #[error("grip given for some samples but not others")]
    MixedGrip,
    #[error("policy file: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Interior knot spacing, seconds.
    pub knot_spacing: f64,
    /// Second-difference penalty weight on the control points.
    pub smoothing: f64,
    /// Relative weight of samples from passes that finished without a stop.
    pub final_pass_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            knot_spacing: 0.2,
            smoothing: 1e-7,
            final_pass_weight: 4.0,
        }
    }
}

/// One weighted training sample at trajectory time `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSample {
    pub tau: f64,
    pub pos: Vec3,
    pub grip: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub subject_id: String,
    pub iterations: usize,
    pub samples: usize,
    pub training_rmse: f64,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub frame: String,
    pub degree: usize,
    pub duration: f64,
    pub dt: f64,
    pub knots: Vec<f64>,
    pub control_points: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grip_control_points: Option<Vec<f64>>,
    pub meta: PolicyMeta,
}

/// Clamped uniform knot vector on `[0, duration]`.
pub fn clamped_knots(duration: f64, spacing: f64) -> Vec<f64> {
    let segments = ((duration / spacing).ceil() as usize).max(1);
    let h = duration / segments as f64;
    let mut k = vec![0.0; DEGREE + 1];
    k.extend((1..segments).map(|i| i as f64 * h));
    k.extend(std::iter::repeat_n(duration, DEGREE + 1));
    k
}

/// Index `i` of the knot span with `knots[i] <= t < knots[i+1]`, with the
/// right end mapped into the last non-empty span.
fn find_span(knots: &[f64], n_basis: usize, t: f64) -> usize {
    if t >= knots[n_basis] {
        return n_basis - 1;
    }
    if t <= knots[DEGREE] {
        return DEGREE;
    }
    let (mut lo, mut hi) = (DEGREE, n_basis);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if t < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The `DEGREE + 1` nonzero basis values at `t` and the index of the first.
pub fn basis_functions(knots: &[f64], t: f64) -> (usize, [f64; DEGREE + 1]) {
    let n_basis = knots.len() - DEGREE - 1;
    let span = find_span(knots, n_basis, t);
    let mut n = [0.0; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    n[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    (span - DEGREE, n)
}

fn solve_penalized(
    knots: &[f64],
    taus: &[f64],
    weights: &[f64],
    targets: &[Vec<f64>],
    smoothing: f64,
) -> Result<Vec<Vec<f64>>, PolicyError> {
    let nb = knots.len() - DEGREE - 1;
    let mut a = DMatrix::<f64>::zeros(nb, nb);
    let mut rhs = DMatrix::<f64>::zeros(nb, targets.len());
    for (s, (&t, &w)) in taus.iter().zip(weights).enumerate() {
        let (first, b) = basis_functions(knots, t);
        for i in 0..=DEGREE {
            for j in 0..=DEGREE {
                a[(first + i, first + j)] += w * b[i] * b[j];
            }
            for (c, tgt) in targets.iter().enumerate() {
                rhs[(first + i, c)] += w * b[i] * tgt[s];
            }
        }
    }
    // second-difference penalty D^T D
    for k in 0..nb.saturating_sub(2) {
        let d = [1.0, -2.0, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                a[(k + i, k + j)] += smoothing * d[i] * d[j];
            }
        }
    }
    let chol = a.cholesky().ok_or(PolicyError::Singular)?;
    let sol = chol.solve(&rhs);
    Ok((0..targets.len())
        .map(|c| sol.column(c).iter().copied().collect())
        .collect())
}

impl Policy {
    /// Weighted penalized least-squares fit. Weights are normalized to sum to
    /// one, so repeating every sample leaves the fit unchanged.
    pub fn fit(
        samples: &[FitSample],
        duration: f64,
        dt: f64,
        cfg: &FitConfig,
        subject_id: &str,
        iterations: usize,
    ) -> Result<Self, PolicyError> {
        let samples: Vec<&FitSample> = samples.iter().filter(|s| s.weight > 0.0).collect();
        if samples.is_empty() {
            return Err(PolicyError::NoSamples);
        }
        if !(duration > 0.0) {
            return Err(PolicyError::NonPositiveDuration(duration));
        }
        let has_grip = samples[0].grip.is_some();
        if samples.iter().any(|s| s.grip.is_some() != has_grip) {
            return Err(PolicyError::MixedGrip);
        }
        let knots = clamped_knots(duration, cfg.knot_spacing);
        let total: f64 = samples.iter().map(|s| s.weight).sum();
        let taus: Vec<f64> = samples.iter().map(|s| s.tau.clamp(0.0, duration)).collect();
        let weights: Vec<f64> = samples.iter().map(|s| s.weight / total).collect();
        let mut targets: Vec<Vec<f64>> = (0..3)
            .map(|k| samples.iter().map(|s| s.pos[k]).collect())
            .collect();
        if has_grip {
            targets.push(samples.iter().map(|s| s.grip.unwrap_or(0.0)).collect());
        }
        let mut sol = solve_penalized(&knots, &taus, &weights, &targets, cfg.smoothing)?;
        let grip_control_points = if has_grip { sol.pop() } else { None };
        let control_points = (0..sol[0].len())
            .map(|i| [sol[0][i], sol[1][i], sol[2][i]])
            .collect();
        let mut policy = Policy {
            frame: WORLD_FRAME.to_string(),
            degree: DEGREE,
            duration,
            dt,
            knots,
            control_points,
            grip_control_points,
            meta: PolicyMeta {
                subject_id: subject_id.to_string(),
                iterations,
                samples: samples.len(),
                training_rmse: 0.0,
                fit: *cfg,
            },
        };
        let sq: f64 = samples
            .iter()
            .map(|s| (policy.position(s.tau) - s.pos).norm_squared())
            .sum();
        policy.meta.training_rmse = (sq / samples.len() as f64).sqrt();
        Ok(policy)
    }

    pub fn position(&self, t: f64) -> Vec3 {
        let (first, b) = basis_functions(&self.knots, t.clamp(0.0, self.duration));
        let mut p = Vec3::zeros();
        for (i, bi) in b.iter().enumerate() {
            let c = self.control_points[first + i];
            p += Vec3::new(c[0], c[1], c[2]) * *bi;
        }
        p
    }

    pub fn grip(&self, t: f64) -> Option<f64> {
        let g = self.grip_control_points.as_ref()?;
        let (first, b) = basis_functions(&self.knots, t.clamp(0.0, self.duration));
        let v: f64 = b.iter().enumerate().map(|(i, bi)| bi * g[first + i]).sum();
        Some(v.clamp(0.0, 1.0))
    }

    pub fn waypoint(&self, t: f64) -> Waypoint {
        Waypoint {
            t,
            pos: self.position(t),
            grip: self.grip(t),
        }
    }

    /// Rolls the policy out on its own tick grid.
    pub fn rollout(&self) -> Trajectory {
        let times = crate::trajectory::time_grid(0.0, self.duration, self.dt);
        Trajectory::new(times.into_iter().map(|t| self.waypoint(t)).collect())
            .expect("grid is increasing")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self, PolicyError> {
        serde_json::from_str(s).map_err(|e| PolicyError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let s = std::fs::read_to_string(path).map_err(|e| PolicyError::Io(e.to_string()))?;
        Self::from_json_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json_string()).map_err(|e| PolicyError::Io(e.to_string()))
    }
}
