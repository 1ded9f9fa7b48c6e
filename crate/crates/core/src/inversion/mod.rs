//! Fixed-point inversion of the one-step jump `z - gamma v(z, gamma) = y`.
//!
//! The map `f(z) = y + gamma v(z, gamma)` has the inversion solutions as its
//! fixed points. Iterating it from `z = y` either converges or, when the
//! Jacobian at the root has spectral norm above one, settles into a cycle
//! between clusters whose mean approximates the root.

mod averaging;
mod period;
mod root;
mod spectral;
mod sweep;

pub use averaging::{verify_cluster_averaging, AveragingOutcome, AveragingRecord};
pub use period::{detect_period, ClusterReport};
pub use root::{find_root, RootMethod, RootResult, ROOT_MAX_ITERS};
pub use spectral::{spectral_norm, spectral_norm_of, JacobianReport};
pub use sweep::{stability_sweep, stability_violations, SweepRow};

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;

/// `f(z; y, gamma) = y + gamma v(z, gamma)` with the identity schedule.
#[derive(Debug, Clone)]
pub struct FixedPointMap<'a, F: VelocityField + ?Sized> {
    field: &'a F,
    target: DVector<f64>,
    gamma: f64,
}

impl<'a, F: VelocityField + ?Sized> FixedPointMap<'a, F> {
    pub fn new(field: &'a F, target: DVector<f64>, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        check_dim(field.dim(), target.len())?;
        Ok(Self {
            field,
            target,
            gamma,
        })
    }

    pub fn field(&self) -> &'a F {
        self.field
    }

    pub fn target(&self) -> &DVector<f64> {
        &self.target
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn apply(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.target + self.field.eval(z, self.gamma).scale(self.gamma)
    }

    /// `z - gamma v(z, gamma)`: the clean latent reached in one jump.
    pub fn one_step_predict(&self, z: &DVector<f64>) -> DVector<f64> {
        z - self.field.eval(z, self.gamma).scale(self.gamma)
    }

    /// `|f(z) - z|`.
    pub fn residual(&self, z: &DVector<f64>) -> f64 {
        (self.apply(z) - z).norm()
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!("gamma {gamma} outside (0, 1)")))
    }
}

/// Iterates `z^(k)`, their step lengths and one-step predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct InversionTrajectory {
    /// `z^(0) .. z^(K)`.
    pub iterates: Vec<DVector<f64>>,
    /// `|z^(k+1) - z^(k)|` for `k = 0 .. K-1`.
    pub step_distances: Vec<f64>,
    /// One-step prediction of each iterate.
    pub one_step_preds: Vec<DVector<f64>>,
}

impl InversionTrajectory {
    pub fn iterations(&self) -> usize {
        self.iterates.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.iterates.first().map_or(0, |z| z.len())
    }

    pub fn last(&self) -> Option<&DVector<f64>> {
        self.iterates.last()
    }

    pub fn is_empty(&self) -> bool {
        self.iterates.is_empty()
    }

    /// `|z^(k) - z^(0)|` for every iterate.
    pub fn distances_to_start(&self) -> Vec<f64> {
        match self.iterates.first() {
            Some(z0) => self.iterates.iter().map(|z| (z - z0).norm()).collect(),
            None => Vec::new(),
        }
    }
}

/// Plain fixed-point iteration from `z^(0) = y`.
pub fn invert<F: VelocityField + ?Sized>(
    map: &FixedPointMap<'_, F>,
    iterations: usize,
) -> Result<InversionTrajectory> {
    group_invert(
        map.field,
        std::slice::from_ref(&map.target),
        map.gamma,
        iterations,
    )
}

/// Group iteration `z^(k+1) = y_(k mod m) + gamma v(z^(k), gamma)` started
/// at `y_(1 mod m)` (zero-based), so `m = 1` is exactly [`invert`].
pub fn group_invert<F: VelocityField + ?Sized>(
    field: &F,
    targets: &[DVector<f64>],
    gamma: f64,
    iterations: usize,
) -> Result<InversionTrajectory> {
    check_gamma(gamma)?;
    if targets.is_empty() {
        return Err(Error::domain("group inversion needs at least one target"));
    }
    if iterations == 0 {
        return Err(Error::domain("iteration count must be positive"));
    }
    for y in targets {
        check_dim(field.dim(), y.len())?;
    }
    let m = targets.len();
    let mut iterates = Vec::with_capacity(iterations + 1);
    let mut preds = Vec::with_capacity(iterations + 1);
    let mut dists = Vec::with_capacity(iterations);

    let mut z = targets[1 % m].clone();
    for k in 0..iterations {
        let jump = field.eval(&z, gamma).scale(gamma);
        let next = &targets[k % m] + &jump;
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                step: k + 1,
                what: "fixed-point iterate".into(),
            });
        }
        preds.push(&z - &jump);
        dists.push((&next - &z).norm());
        iterates.push(std::mem::replace(&mut z, next));
    }
    preds.push(&z - field.eval(&z, gamma).scale(gamma));
    iterates.push(z);
    Ok(InversionTrajectory {
        iterates,
        step_distances: dists,
        one_step_preds: preds,
    })
}
