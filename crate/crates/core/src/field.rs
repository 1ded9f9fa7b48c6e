//! Velocity fields `v(x, t)`.

use nalgebra::{DMatrix, DVector};

use crate::mixture::{clamp_time, GaussianMixture};

/// A deterministic velocity field on `R^d x (0, 1)`.
///
/// `eval` must return bitwise-identical output for identical input. Inputs
/// of the wrong dimension are a caller bug and may panic.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;

    /// Exact `d v / d x` when the field can provide it.
    fn jacobian(&self, _x: &DVector<f64>, _t: f64) -> Option<DMatrix<f64>> {
        None
    }
}

/// Central-difference Jacobian of `field` in `x`.
pub fn finite_difference_jacobian<F: VelocityField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: f64,
    h: f64,
) -> DMatrix<f64> {
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut xp = x.clone();
    for c in 0..d {
        let orig = xp[c];
        xp[c] = orig + h;
        let fp = field.eval(&xp, t);
        xp[c] = orig - h;
        let fm = field.eval(&xp, t);
        xp[c] = orig;
        jac.set_column(c, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Analytic Jacobian if available, else central differences with `h = 1e-6 (1 + |x|)`.
pub fn jacobian_or_fd<F: VelocityField + ?Sized>(
    field: &F,
    x: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    field
        .jacobian(x, t)
        .unwrap_or_else(|| finite_difference_jacobian(field, x, t, 1e-6 * (1.0 + x.norm())))
}

/// Exact mixture velocity. Time is clamped into `[1e-6, 1 - 1e-6]`.
#[derive(Debug, Clone)]
pub struct MixtureField {
    mixture: GaussianMixture,
}

impl MixtureField {
    pub fn new(mixture: GaussianMixture) -> Self {
        Self { mixture }
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }
}

impl VelocityField for MixtureField {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        self.mixture.velocity_unchecked(x, clamp_time(t))
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Option<DMatrix<f64>> {
        Some(self.mixture.jacobian_unchecked(x, clamp_time(t)))
    }
}

/// `v = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl VelocityField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn jacobian(&self, _x: &DVector<f64>, _t: f64) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.dim, self.dim))
    }
}

/// `v(x, t) = slope * x`, independent of `t`.
#[derive(Debug, Clone, Copy)]
pub struct LinearField {
    pub dim: usize,
    pub slope: f64,
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        x.scale(self.slope)
    }

    fn jacobian(&self, _x: &DVector<f64>, _t: f64) -> Option<DMatrix<f64>> {
        Some(DMatrix::identity(self.dim, self.dim).scale(self.slope))
    }
}

type EvalFn = dyn Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync;
type JacFn = dyn Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync;

/// A field given by closures; used for synthetic maps.
pub struct FnField {
    dim: usize,
    eval: Box<EvalFn>,
    jacobian: Option<Box<JacFn>>,
}

impl FnField {
    pub fn new(
        dim: usize,
        eval: impl Fn(&DVector<f64>, f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            eval: Box::new(eval),
            jacobian: None,
        }
    }

    pub fn with_jacobian(
        mut self,
        jac: impl Fn(&DVector<f64>, f64) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.jacobian = Some(Box::new(jac));
        self
    }
}

impl std::fmt::Debug for FnField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FnField")
            .field("dim", &self.dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl VelocityField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (self.eval)(x, t)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Option<DMatrix<f64>> {
        self.jacobian.as_ref().map(|j| j(x, t))
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).eval(x, t)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Option<DMatrix<f64>> {
        (**self).jacobian(x, t)
    }
}

impl<F: VelocityField + ?Sized> VelocityField for Box<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        (**self).eval(x, t)
    }

    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Option<DMatrix<f64>> {
        (**self).jacobian(x, t)
    }
}
