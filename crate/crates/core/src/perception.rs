//! Synthetic grip-site detector.
//!
//! Produces noisy observations of a known ground-truth grip-site so the
//! session loop consumes the same interface a camera pipeline would provide.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::Vec3;

/// Noise scale of the confidence heuristic, meters.
const CONFIDENCE_SCALE_M: f64 = 0.01;

/// Observations at or below this confidence never move the start point.
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripSiteObservation {
    /// `None` when the site is occluded.
    pub pos: Option<Vec3>,
    pub confidence: f64,
    pub t: f64,
}

/// Seeded generator of grip-site observations; one per session.
#[derive(Debug, Clone)]
pub struct GripSiteLocator {
    rng: ChaCha8Rng,
}

impl GripSiteLocator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Observes `ground_truth` with isotropic Gaussian error of `noise_sigma`
    /// per axis. Negative sigma is treated as zero.
    pub fn locate(
        &mut self,
        ground_truth: &Vec3,
        noise_sigma: f64,
        occluded: bool,
        t: f64,
    ) -> GripSiteObservation {
        if occluded {
            return GripSiteObservation {
                pos: None,
                confidence: 0.0,
                t,
            };
        }
        let sigma = noise_sigma.max(0.0);
        let pos = if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).expect("finite sigma");
            ground_truth
                + Vec3::new(
                    n.sample(&mut self.rng),
                    n.sample(&mut self.rng),
                    n.sample(&mut self.rng),
                )
        } else {
            *ground_truth
        };
        GripSiteObservation {
            pos: Some(pos),
            confidence: (-sigma / CONFIDENCE_SCALE_M).exp(),
            t,
        }
    }
}

/// Tracks the session start point from a stream of observations.
#[derive(Debug, Clone)]
pub struct StartPointSelector {
    threshold: f64,
    current: Vec3,
    updated: bool,
}

impl StartPointSelector {
    pub fn new(nominal: Vec3, threshold: f64) -> Self {
        Self {
            threshold,
            current: nominal,
            updated: false,
        }
    }

    /// Adopts the observation if its confidence exceeds the threshold.
    pub fn observe(&mut self, obs: &GripSiteObservation) -> bool {
        match obs.pos {
            Some(p) if obs.confidence > self.threshold => {
                self.current = p;
                self.updated = true;
                true
            }
            _ => false,
        }
    }

    pub fn start_point(&self) -> Vec3 {
        self.current
    }

    /// Whether any observation has been adopted.
    pub fn updated(&self) -> bool {
        self.updated
    }
}

/// Writes observations as JSON lines for later replay.
pub fn write_jsonl<W: Write>(mut w: W, obs: &[GripSiteObservation]) -> std::io::Result<()> {
    for o in obs {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a recorded observation stream written by [`write_jsonl`].
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<GripSiteObservation>, serde_json::Error> {
    r.lines()
        .map_while(Result::ok)
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(&l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_and_occluded() {
        let mut loc = GripSiteLocator::new(1);
        let gt = Vec3::new(0.4, 0.1, 0.3);
        let o = loc.locate(&gt, 0.0, false, 0.0);
        assert_eq!(o.pos, Some(gt));
        assert_eq!(o.confidence, 1.0);
        let o = loc.locate(&gt, 0.01, true, 0.1);
        assert_eq!(o.confidence, 0.0);
        assert_eq!(o.pos, None);
    }

    #[test]
    fn per_axis_spread_matches_sigma() {
        let mut loc = GripSiteLocator::new(42);
        let gt = Vec3::new(0.4, 0.1, 0.3);
        let n = 10_000;
        let sigma = 0.005;
        let errs: Vec<Vec3> = (0..n)
            .map(|i| loc.locate(&gt, sigma, false, i as f64).pos.unwrap() - gt)
            .collect();
        for k in 0..3 {
            let mean = errs.iter().map(|e| e[k]).sum::<f64>() / n as f64;
            let var = errs.iter().map(|e| (e[k] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            assert!((0.0045..=0.0055).contains(&sd), "axis {k}: sd {sd}");
            // unbiased within 3 sigma / sqrt(N)
            assert!(
                mean.abs() <= 3.0 * sigma / (n as f64).sqrt(),
                "axis {k}: mean {mean}"
            );
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let gt = Vec3::new(0.4, 0.1, 0.3);
        let mut a = GripSiteLocator::new(9);
        let mut b = GripSiteLocator::new(9);
        for i in 0..50 {
            let t = i as f64;
            assert_eq!(
                a.locate(&gt, 0.003, false, t),
                b.locate(&gt, 0.003, false, t)
            );
        }
    }

    #[test]
    fn low_confidence_never_moves_start() {
        let nominal = Vec3::new(0.45, 0.0, 0.3);
        let mut sel = StartPointSelector::new(nominal, DEFAULT_CONFIDENCE_THRESHOLD);
        let mut loc = GripSiteLocator::new(3);
        // sigma 0.01 gives confidence exp(-1) < 0.5
        for i in 0..20 {
            let o = loc.locate(&nominal, 0.01, false, i as f64);
            assert!(!sel.observe(&o));
        }
        assert_eq!(sel.start_point(), nominal);
        let o = loc.locate(&nominal, 0.002, false, 21.0);
        assert!(sel.observe(&o));
        assert_eq!(Some(sel.start_point()), o.pos);
        // an occluded frame afterwards keeps the latest good one
        let occl = loc.locate(&nominal, 0.002, true, 22.0);
        assert!(!sel.observe(&occl));
        assert_eq!(Some(sel.start_point()), o.pos);
    }

    #[test]
    fn jsonl_replay() {
        let mut loc = GripSiteLocator::new(5);
        let gt = Vec3::new(0.4, 0.0, 0.3);
        let obs: Vec<_> = (0..5)
            .map(|i| loc.locate(&gt, 0.002, i == 2, i as f64 * 0.1))
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &obs).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, obs);
    }
}
