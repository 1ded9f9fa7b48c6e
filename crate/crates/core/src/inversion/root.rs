use nalgebra::{DMatrix, DVector};

use super::FixedPointMap;
use crate::error::{check_dim, Error, Result};
use crate::field::{jacobian_or_fd, VelocityField};

pub const ROOT_MAX_ITERS: usize = 500;
const GROWTH_LIMIT: usize = 5;
const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RootMethod {
    Newton,
    /// Krasnosel'skii-Mann averaging `z <- (z + f(z)) / 2`.
    AveragedIteration,
}

impl RootMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            RootMethod::Newton => "newton",
            RootMethod::AveragedIteration => "averaged-iteration",
        }
    }
}

/// Best point found for `f(z) = z`. The residual is reported as measured.
#[derive(Debug, Clone, PartialEq)]
pub struct RootResult {
    pub z_star: DVector<f64>,
    /// `|f(z*) - z*|`.
    pub residual: f64,
    pub method: RootMethod,
    pub iterations: usize,
    pub converged: bool,
}

/// Damped Newton on `g(z) = f(z) - z`, falling back to averaged iteration
/// after five consecutive residual increases.
pub fn find_root<F: VelocityField + ?Sized>(
    map: &FixedPointMap<'_, F>,
    init: &DVector<f64>,
    tol: f64,
) -> Result<RootResult> {
    check_dim(map.field().dim(), init.len())?;
    if init.iter().any(|c| !c.is_finite()) {
        return Err(Error::domain("root initial point is not finite"));
    }
    let d = init.len();
    let gamma = map.gamma();
    let g = |z: &DVector<f64>| map.apply(z) - z;

    let mut z = init.clone();
    let mut gz = g(&z);
    let mut r = gz.norm();
    let mut best = (z.clone(), r);
    let mut method = RootMethod::Newton;
    let mut growth = 0;
    let mut iterations = 0;

    while iterations < ROOT_MAX_ITERS && r >= tol {
        iterations += 1;
        match method {
            RootMethod::Newton => {
                let jac =
                    jacobian_or_fd(map.field(), &z, gamma).scale(gamma) - DMatrix::identity(d, d);
                let Some(step) = jac.lu().solve(&(-&gz)) else {
                    method = RootMethod::AveragedIteration;
                    continue;
                };
                let mut lambda = 1.0;
                let mut accepted = None;
                for _ in 0..MAX_HALVINGS {
                    let trial = &z + step.scale(lambda);
                    let gt = g(&trial);
                    let rt = gt.norm();
                    if rt.is_finite() && rt <= (1.0 - ARMIJO_C * lambda) * r {
                        accepted = Some((trial, gt, rt));
                        break;
                    }
                    lambda *= 0.5;
                }
                let (nz, ng, nr) = accepted.unwrap_or_else(|| {
                    let trial = &z + &step;
                    let gt = g(&trial);
                    let rt = gt.norm();
                    (trial, gt, rt)
                });
                if !nr.is_finite() {
                    method = RootMethod::AveragedIteration;
                    continue;
                }
                growth = if nr > r { growth + 1 } else { 0 };
                (z, gz, r) = (nz, ng, nr);
                if growth >= GROWTH_LIMIT {
                    log::debug!("newton stalled after {iterations} steps; averaging");
                    method = RootMethod::AveragedIteration;
                    // restart from the best Newton point
                    z = best.0.clone();
                    gz = g(&z);
                    r = gz.norm();
                }
            }
            RootMethod::AveragedIteration => {
                z = (&z + map.apply(&z)) / 2.0;
                gz = g(&z);
                r = gz.norm();
                if !r.is_finite() {
                    break;
                }
            }
        }
        if r < best.1 {
            best = (z.clone(), r);
        }
    }
    let (z_star, residual) = best;
    Ok(RootResult {
        converged: residual < tol,
        z_star,
        residual,
        method,
        iterations,
    })
}
