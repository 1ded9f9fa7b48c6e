//! Time schedules and the Euler sampler.

use nalgebra::DVector;

use crate::error::{check_dim, Error, Result};
use crate::field::VelocityField;
use crate::mixture::clamp_time;

/// Discrete noise schedule `sigma_0 = 0 < sigma_1 < ... < sigma_T = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSchedule {
    steps: usize,
    /// `None` is the identity schedule `sigma(i) = i / T`; `Some(s)` applies
    /// the time shift `s u / (1 + (s - 1) u)` to `u = i / T`.
    shift: Option<f64>,
}

impl TimeSchedule {
    pub fn identity(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::domain("schedule needs at least one step"));
        }
        Ok(Self { steps, shift: None })
    }

    pub fn shifted(steps: usize, shift: f64) -> Result<Self> {
        if !(shift > 0.0 && shift.is_finite()) {
            return Err(Error::domain(format!("shift {shift} must be positive")));
        }
        let mut s = Self::identity(steps)?;
        s.shift = Some(shift);
        Ok(s)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sigma(&self, i: usize) -> f64 {
        assert!(
            i <= self.steps,
            "step {i} beyond schedule of {}",
            self.steps
        );
        if i == 0 {
            return 0.0;
        }
        if i == self.steps {
            return 1.0;
        }
        let u = i as f64 / self.steps as f64;
        match self.shift {
            None => u,
            Some(s) => s * u / (1.0 + (s - 1.0) * u),
        }
    }
}

/// Integrates from `z_T` down to `z_0`:
/// `z_{i-1} = z_i + (sigma_{i-1} - sigma_i) v(z_i, sigma_i)`.
///
/// Returns `[z_T, z_{T-1}, ..., z_0]`. Field times are clamped into the open
/// unit interval.
pub fn euler_sample<F: VelocityField + ?Sized>(
    field: &F,
    schedule: &TimeSchedule,
    z_start: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    check_dim(field.dim(), z_start.len())?;
    if z_start.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step: schedule.steps(),
            what: "initial noise".into(),
        });
    }
    let mut path = Vec::with_capacity(schedule.steps() + 1);
    let mut z = z_start.clone();
    path.push(z.clone());
    for i in (1..=schedule.steps()).rev() {
        let (hi, lo) = (schedule.sigma(i), schedule.sigma(i - 1));
        let v = field.eval(&z, clamp_time(hi));
        z += v.scale(lo - hi);
        if z.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                step: i - 1,
                what: format!("Euler iterate at sigma {lo}"),
            });
        }
        path.push(z.clone());
    }
    Ok(path)
}
