use nalgebra::DVector;

use super::{detect_period, find_root, invert, spectral_norm, FixedPointMap};
use crate::error::Result;
use crate::exec::Exec;
use crate::field::VelocityField;

const ROOT_TOL: f64 = 1e-12;

/// One `gamma` of a stability sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub period: Option<usize>,
    /// Spectral norm of `J_f` at the located root.
    pub spectral_norm: Option<f64>,
    pub root_residual: Option<f64>,
    /// The iteration settled on a single point (`period == 1`).
    pub converged: bool,
    pub error: Option<String>,
}

/// Runs invert, period detection, root finding and the Jacobian norm for
/// each `gamma`. A failing row records its error; the sweep continues.
pub fn stability_sweep<F: VelocityField + ?Sized>(
    field: &F,
    target: &DVector<f64>,
    gammas: &[f64],
    iterations: usize,
    window: usize,
    tol: f64,
    exec: Exec,
) -> Vec<SweepRow> {
    exec.map_slice(gammas, |&gamma| {
        sweep_row(field, target, gamma, iterations, window, tol).unwrap_or_else(|e| SweepRow {
            gamma,
            period: None,
            spectral_norm: None,
            root_residual: None,
            converged: false,
            error: Some(e.to_string()),
        })
    })
}

fn sweep_row<F: VelocityField + ?Sized>(
    field: &F,
    target: &DVector<f64>,
    gamma: f64,
    iterations: usize,
    window: usize,
    tol: f64,
) -> Result<SweepRow> {
    let map = FixedPointMap::new(field, target.clone(), gamma)?;
    let traj = invert(&map, iterations)?;
    let cluster = detect_period(&traj, window, tol)?;
    let root = find_root(&map, &cluster.mean_of_means, ROOT_TOL)?;
    let jac = spectral_norm(field, &root.z_star, gamma);
    Ok(SweepRow {
        gamma,
        period: Some(cluster.period),
        spectral_norm: Some(jac.spectral_norm),
        root_residual: Some(root.residual),
        converged: cluster.period == 1,
        error: None,
    })
}

/// Rows contradicting `(period == 1) <=> (norm < 1)`, ignoring rows whose
/// norm lies within `dead_band` of one and rows without a located root.
pub fn stability_violations(rows: &[SweepRow], dead_band: f64, root_tol: f64) -> Vec<&SweepRow> {
    rows.iter()
        .filter(|r| {
            let (Some(norm), Some(period), Some(res)) =
                (r.spectral_norm, r.period, r.root_residual)
            else {
                return false;
            };
            if (norm - 1.0).abs() <= dead_band || res > root_tol {
                return false;
            }
            (period == 1) != (norm < 1.0)
        })
        .collect()
}
