//! Post-inversion refinement of a latent `z`: minimize a loss on the
//! one-step prediction `z - gamma v(z, gamma)`, optionally plus `beta`
//! times an MMD penalty pulling `z` toward a reference cluster.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::inversion::check_gamma;

const ARMIJO_C: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;

/// RBF kernel `exp(-|a - b|^2 / (2 l^2))`.
pub fn rbf_kernel(a: &DVector<f64>, b: &DVector<f64>, l: f64) -> f64 {
    (-(a - b).norm_squared() / (2.0 * l * l)).exp()
}

/// Squared MMD between the point mass at `z` and the empirical reference
/// distribution: `k(z,z) - 2/N sum_i k(z, r_i) + 1/N^2 sum_ij k(r_i, r_j)`.
pub fn gp_loss(z: &DVector<f64>, references: &[DVector<f64>], l: f64) -> Result<f64> {
    check_references(z, references, l)?;
    let n = references.len() as f64;
    let cross: f64 = references.iter().map(|r| rbf_kernel(z, r, l)).sum();
    Ok(1.0 - 2.0 * cross / n + reference_self_term(references, l))
}

/// `d gp_loss / dz`.
pub fn gp_gradient(z: &DVector<f64>, references: &[DVector<f64>], l: f64) -> Result<DVector<f64>> {
    check_references(z, references, l)?;
    let mut g = DVector::zeros(z.len());
    for r in references {
        let diff = z - r;
        let k = rbf_kernel(z, r, l);
        g.axpy(k, &diff, 1.0);
    }
    Ok(g * (2.0 / (references.len() as f64 * l * l)))
}

fn reference_self_term(references: &[DVector<f64>], l: f64) -> f64 {
    let n = references.len() as f64;
    let mut s = 0.0;
    for a in references {
        for b in references {
            s += rbf_kernel(a, b, l);
        }
    }
    s / (n * n)
}

fn check_references(z: &DVector<f64>, references: &[DVector<f64>], l: f64) -> Result<()> {
    if references.is_empty() {
        return Err(Error::domain(
            "the MMD penalty needs at least one reference",
        ));
    }
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::domain(format!(
            "kernel scale must be positive, got {l}"
        )));
    }
    for r in references {
        check_dim(z.len(), r.len())?;
    }
    Ok(())
}

/// Below this fraction of `1 + max |z'_i|` the references count as one point.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

/// Median pairwise distance between references. `None` with fewer than two
/// references or when the median is at round-off level (a fully converged
/// cluster), where an RBF of that width would be flat everywhere else.
pub fn median_heuristic(references: &[DVector<f64>]) -> Option<f64> {
    let mut d: Vec<f64> = Vec::new();
    for (i, a) in references.iter().enumerate() {
        for b in &references[i + 1..] {
            d.push((a - b).norm());
        }
    }
    if d.is_empty() {
        return None;
    }
    d.sort_by(f64::total_cmp);
    let mid = d.len() / 2;
    let m = if d.len() % 2 == 1 {
        d[mid]
    } else {
        0.5 * (d[mid - 1] + d[mid])
    };
    let size = references.iter().map(|r| r.norm()).fold(0.0, f64::max);
    (m > DEGENERATE_SPREAD * (1.0 + size)).then_some(m)
}

/// Objective applied to the one-step prediction (the decoder is the identity).
pub trait PixelLoss: Sync {
    fn value(&self, x: &DVector<f64>) -> f64;

    /// Defaults to central differences with `h = 1e-6 (1 + |x|)`.
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6 * (1.0 + x.norm());
        let mut xp = x.clone();
        DVector::from_iterator(
            x.len(),
            (0..x.len()).map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = self.value(&xp);
                xp[i] = orig - h;
                let down = self.value(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            }),
        )
    }
}

/// `|x - target|^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquaredDistance {
    pub target: DVector<f64>,
}

impl PixelLoss for SquaredDistance {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (x - &self.target).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.target) * 2.0
    }
}

impl<L: PixelLoss + ?Sized> PixelLoss for &L {
    fn value(&self, x: &DVector<f64>) -> f64 {
        (**self).value(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).gradient(x)
    }
}

#[derive(Debug, Clone)]
pub struct PostOptProblem<'a, F: VelocityField + ?Sized, L: PixelLoss> {
    field: &'a F,
    gamma: f64,
    loss: L,
    references: Vec<DVector<f64>>,
    beta: f64,
    kernel_scale: f64,
}

impl<'a, F: VelocityField + ?Sized, L: PixelLoss> PostOptProblem<'a, F, L> {
    /// Unregularized problem.
    pub fn new(field: &'a F, gamma: f64, loss: L) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            field,
            gamma,
            loss,
            references: Vec::new(),
            beta: 0.0,
            kernel_scale: 1.0,
        })
    }

    /// Adds the MMD penalty. `kernel_scale = None` uses the median
    /// heuristic, falling back to 1 when it is undefined.
    pub fn with_references(
        mut self,
        references: Vec<DVector<f64>>,
        beta: f64,
        kernel_scale: Option<f64>,
    ) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::domain(format!(
                "beta must be non-negative, got {beta}"
            )));
        }
        if references.is_empty() && beta > 0.0 {
            return Err(Error::domain("beta > 0 requires at least one reference"));
        }
        for r in &references {
            check_dim(self.field.dim(), r.len())?;
        }
        let l = kernel_scale
            .or_else(|| median_heuristic(&references))
            .unwrap_or(1.0);
        if !(l > 0.0 && l.is_finite()) {
            return Err(Error::domain(format!(
                "kernel scale must be positive, got {l}"
            )));
        }
        self.references = references;
        self.beta = beta;
        self.kernel_scale = l;
        Ok(self)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn kernel_scale(&self) -> f64 {
        self.kernel_scale
    }

    pub fn references(&self) -> &[DVector<f64>] {
        &self.references
    }

    pub fn loss(&self) -> &L {
        &self.loss
    }

    pub fn predict(&self, z: &DVector<f64>) -> DVector<f64> {
        z - self.field.eval(z, self.gamma) * self.gamma
    }

    /// The loss term alone, `L(predict(z))`.
    pub fn pixel_term(&self, z: &DVector<f64>) -> f64 {
        self.loss.value(&self.predict(z))
    }

    /// The unweighted MMD term, zero without references.
    pub fn gp_term(&self, z: &DVector<f64>) -> f64 {
        if self.references.is_empty() {
            0.0
        } else {
            gp_loss(z, &self.references, self.kernel_scale).expect("references validated")
        }
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        let reg = if self.beta > 0.0 {
            self.beta * self.gp_term(z)
        } else {
            0.0
        };
        self.pixel_term(z) + reg
    }

    /// Chain rule through `I - gamma J_v` when the field has a Jacobian,
    /// otherwise central differences with `h = 1e-4 (1 + |z|)`.
    pub fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let Some(jac) = self.field.jacobian(z, self.gamma) else {
            return self.fd_gradient(z, 1e-4 * (1.0 + z.norm()));
        };
        let d = z.len();
        let dpred = DMatrix::identity(d, d) - jac * self.gamma;
        let mut g = dpred.tr_mul(&self.loss.gradient(&self.predict(z)));
        if self.beta > 0.0 {
            let gp =
                gp_gradient(z, &self.references, self.kernel_scale).expect("references validated");
            g.axpy(self.beta, &gp, 1.0);
        }
        g
    }

    pub fn fd_gradient(&self, z: &DVector<f64>, h: f64) -> DVector<f64> {
        let mut zp = z.clone();
        DVector::from_iterator(
            z.len(),
            (0..z.len()).map(|i| {
                let orig = zp[i];
                zp[i] = orig + h;
                let up = self.objective(&zp);
                zp[i] = orig - h;
                let down = self.objective(&zp);
                zp[i] = orig;
                (up - down) / (2.0 * h)
            }),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptResult {
    pub z_opt: DVector<f64>,
    /// Objective at the initial point and after every accepted step.
    pub trace: Vec<f64>,
    /// Gradient norm at each point of `trace`.
    pub grad_norms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl OptResult {
    pub fn final_objective(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial point")
    }
}

/// Gradient descent with Armijo backtracking (`c = 1e-4`, halving from a
/// unit step). Stops when the gradient norm drops below `tol`; a step
/// shrinking under `1e-12` ends the run unconverged.
pub fn optimize<F: VelocityField + ?Sized, L: PixelLoss>(
    problem: &PostOptProblem<'_, F, L>,
    init: &DVector<f64>,
    max_iters: usize,
    tol: f64,
) -> Result<OptResult> {
    check_dim(problem.field.dim(), init.len())?;
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("optimization start point is not finite"));
    }
    let mut z = init.clone();
    let mut f = problem.objective(&z);
    let mut g = problem.gradient(&z);
    let mut result = OptResult {
        z_opt: z.clone(),
        trace: vec![f],
        grad_norms: vec![g.norm()],
        iterations: 0,
        converged: false,
    };
    if !f.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            what: "post-opt objective".into(),
        });
    }
    for it in 0..max_iters {
        let gn2 = g.norm_squared();
        if gn2.sqrt() < tol {
            result.converged = true;
            break;
        }
        let mut alpha = 1.0;
        let accepted = loop {
            let cand = &z - &g * alpha;
            let fc = problem.objective(&cand);
            if fc <= f - ARMIJO_C * alpha * gn2 {
                break Some((cand, fc));
            }
            alpha *= 0.5;
            if alpha < MIN_STEP {
                break None;
            }
        };
        let Some((cand, fc)) = accepted else {
            log::debug!("line search failed at iteration {it}");
            break;
        };
        z = cand;
        f = fc;
        g = problem.gradient(&z);
        result.trace.push(f);
        result.grad_norms.push(g.norm());
        result.iterations = it + 1;
    }
    if !result.converged && g.norm() < tol {
        result.converged = true;
    }
    result.z_opt = z;
    Ok(result)
}
