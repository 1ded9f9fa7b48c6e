use nalgebra::DVector;

use super::InversionTrajectory;
use crate::error::{Error, Result};

/// Lower bound on the tail scale, relative to `1 + |tail mean|`, so that
/// round-off jitter of a converged tail never reads as motion.
const SCALE_FLOOR: f64 = 1e-12;

/// Periodic structure of a trajectory tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    /// 0 = aperiodic, 1 = converged, p >= 2 = p-cycle.
    pub period: usize,
    /// Mean of each residue class `k mod p`, indexed by the residue of the
    /// absolute iterate index. Empty when `period == 0`.
    pub phase_means: Vec<DVector<f64>>,
    /// RMS radius of each residue class around its mean.
    pub phase_spreads: Vec<f64>,
    /// Unweighted average of the phase means; the plain tail mean when
    /// aperiodic.
    pub mean_of_means: DVector<f64>,
    /// RMS distance of the tail to its mean (the detector's length scale).
    pub tail_scale: f64,
    pub window: usize,
}

impl ClusterReport {
    pub fn max_spread(&self) -> f64 {
        self.phase_spreads.iter().copied().fold(0.0, f64::max)
    }

    /// `|z' - z''|` for a two-cycle.
    pub fn phase_separation(&self) -> Option<f64> {
        match self.phase_means.as_slice() {
            [a, b] => Some((a - b).norm()),
            _ => None,
        }
    }
}

/// Finds the smallest lag `p <= W/2` under which the last `W` iterates
/// repeat to within `tol` times the tail scale.
pub fn detect_period(traj: &InversionTrajectory, window: usize, tol: f64) -> Result<ClusterReport> {
    if window < 2 {
        return Err(Error::domain("period window must be at least 2"));
    }
    if !(tol > 0.0) {
        return Err(Error::domain(format!("tolerance {tol} must be positive")));
    }
    let k = traj.iterations();
    if k < 2 * window {
        return Err(Error::InsufficientLength {
            needed: 2 * window,
            have: k,
        });
    }
    let start = traj.iterates.len() - window;
    let tail = &traj.iterates[start..];
    let mean = centroid(tail);
    let scale = rms_radius(tail, &mean).max(SCALE_FLOOR * (1.0 + mean.norm()));
    let threshold = tol * scale;

    let period = (1..=window / 2)
        .find(|&p| (0..window - p).all(|i| (&tail[i] - &tail[i + p]).norm() < threshold))
        .unwrap_or(0);

    let (phase_means, phase_spreads) = if period == 0 {
        (Vec::new(), Vec::new())
    } else {
        (0..period)
            .map(|r| {
                let members: Vec<DVector<f64>> = (start..traj.iterates.len())
                    .filter(|idx| idx % period == r)
                    .map(|idx| traj.iterates[idx].clone())
                    .collect();
                let m = centroid(&members);
                let s = rms_radius(&members, &m);
                (m, s)
            })
            .unzip()
    };
    let mean_of_means = if phase_means.is_empty() {
        mean
    } else {
        centroid(&phase_means)
    };
    Ok(ClusterReport {
        period,
        phase_means,
        phase_spreads,
        mean_of_means,
        tail_scale: scale,
        window,
    })
}

fn centroid(points: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(points[0].len());
    for p in points {
        acc += p;
    }
    acc / points.len() as f64
}

fn rms_radius(points: &[DVector<f64>], center: &DVector<f64>) -> f64 {
    let ss: f64 = points.iter().map(|p| (p - center).norm_squared()).sum();
    (ss / points.len() as f64).sqrt()
}
