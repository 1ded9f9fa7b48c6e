use nalgebra::DVector;

use super::{detect_period, find_root, invert, ClusterReport, FixedPointMap, RootResult};
use crate::error::Result;
use crate::field::VelocityField;

const ROOT_TOL: f64 = 1e-12;
/// Phases count as compact when every spread is below this fraction of the
/// phase separation.
pub const COMPACT_RATIO: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum AveragingOutcome {
    /// The tail is not a two-cycle; the averaging claim does not apply.
    Inapplicable { period: usize },
    Checked {
        root: RootResult,
        /// `|(z' + z'') / 2 - z*|`.
        averaging_error: f64,
        /// `averaging_error / |z' - z''|`.
        relative_error: f64,
        /// Spreads below `COMPACT_RATIO * |z' - z''|`.
        compact: bool,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragingRecord {
    pub cluster: ClusterReport,
    pub outcome: AveragingOutcome,
}

impl AveragingRecord {
    pub fn relative_error(&self) -> Option<f64> {
        match &self.outcome {
            AveragingOutcome::Checked { relative_error, .. } => Some(*relative_error),
            AveragingOutcome::Inapplicable { .. } => None,
        }
    }

    pub fn is_compact_two_cycle(&self) -> bool {
        matches!(
            self.outcome,
            AveragingOutcome::Checked { compact: true, .. }
        )
    }
}

/// Checks that the two phase means of an oscillating inversion average to
/// the exact root.
///
/// Runs `invert` for `iterations`, detects the period on the last `window`
/// iterates, and, for a two-cycle, solves for the root starting from the
/// mean of the phase means.
pub fn verify_cluster_averaging<F: VelocityField + ?Sized>(
    field: &F,
    target: &DVector<f64>,
    gamma: f64,
    iterations: usize,
    window: usize,
    tol: f64,
) -> Result<AveragingRecord> {
    let map = FixedPointMap::new(field, target.clone(), gamma)?;
    let traj = invert(&map, iterations)?;
    let cluster = detect_period(&traj, window, tol)?;
    if cluster.period != 2 {
        return Ok(AveragingRecord {
            outcome: AveragingOutcome::Inapplicable {
                period: cluster.period,
            },
            cluster,
        });
    }
    let root = find_root(&map, &cluster.mean_of_means, ROOT_TOL)?;
    let averaging_error = (&cluster.mean_of_means - &root.z_star).norm();
    let separation = cluster.phase_separation().unwrap_or(0.0);
    let relative_error = if separation > 0.0 {
        averaging_error / separation
    } else {
        f64::INFINITY
    };
    let compact = separation > 0.0 && cluster.max_spread() < COMPACT_RATIO * separation;
    Ok(AveragingRecord {
        outcome: AveragingOutcome::Checked {
            root,
            averaging_error,
            relative_error,
            compact,
        },
        cluster,
    })
}
