use nalgebra::{DMatrix, DVector};

use crate::field::{jacobian_or_fd, VelocityField};

const POWER_ITERS: usize = 100;
const POWER_REL_TOL: f64 = 1e-12;

/// Largest singular value of the fixed-point map's Jacobian at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub spectral_norm: f64,
    pub top_singular_vector: DVector<f64>,
    pub eval_point: DVector<f64>,
    pub t: f64,
}

/// `|J_f|_2` for `J_f = gamma dv/dz` at `(z, gamma)`.
pub fn spectral_norm<F: VelocityField + ?Sized>(
    field: &F,
    z: &DVector<f64>,
    gamma: f64,
) -> JacobianReport {
    let jac = jacobian_or_fd(field, z, gamma).scale(gamma);
    let (norm, vec) = spectral_norm_of(&jac);
    JacobianReport {
        spectral_norm: norm,
        top_singular_vector: vec,
        eval_point: z.clone(),
        t: gamma,
    }
}

/// Power iteration on `J^T J`.
pub fn spectral_norm_of(jac: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let n = jac.ncols();
    let gram = jac.transpose() * jac;
    // fixed, non-symmetric start so no coordinate direction is missed
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.37 * i as f64).normalize();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERS {
        let w = &gram * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return (0.0, v);
        }
        let next = v.dot(&w);
        v = w / norm;
        let done = (next - lambda).abs() <= POWER_REL_TOL * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    ((jac * &v).norm(), v)
}
