//! Exact rectified-flow quantities between a standard-normal source and an
//! isotropic Gaussian-mixture target.
//!
//! The interpolant is `X_t = t * X_noise + (1 - t) * X_data`. Conditioned on
//! component `k`, `X_t ~ N((1 - t) mu_k, s_k I)` with
//! `s_k = (1 - t)^2 sigma_k^2 + t^2`, and both endpoints are jointly
//! Gaussian with `X_t`, so every conditional expectation is a
//! responsibility-weighted sum of per-component linear regressions.
//!
//! Velocity convention: `v(x, t) = E[X_noise - X_data | X_t = x]`. With it
//! the Euler sampler moves toward data as time decreases and the one-step
//! prediction `x - t * v(x, t)` equals `E[X_data | X_t = x]`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::rng::{rng_from_seed, Rng};

/// Interior clamp applied to `t` before any density evaluation.
pub const TIME_EPS: f64 = 1e-6;

const WEIGHT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub sigma: f64,
}

impl Component {
    pub fn new(weight: f64, mean: impl Into<Vec<f64>>, sigma: f64) -> Self {
        Self {
            weight,
            mean: DVector::from_vec(mean.into()),
            sigma,
        }
    }
}

/// Isotropic Gaussian mixture `sum_k a_k N(mu_k, sigma_k^2 I)` in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Component>,
    dim: usize,
    log_weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::domain("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::domain("mixture dimension must be positive"));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            check_dim(dim, c.mean.len())?;
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::domain(format!(
                    "component {k}: weight {} not in (0, 1]",
                    c.weight
                )));
            }
            if !(c.sigma > 0.0 && c.sigma.is_finite()) {
                return Err(Error::domain(format!(
                    "component {k}: sigma {} must be positive",
                    c.sigma
                )));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::domain(format!("component {k}: non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::domain(format!("weights sum to {total}, not 1")));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Ok(Self {
            components,
            dim,
            log_weights,
        })
    }

    /// Builds a mixture after rescaling the weights to sum to one.
    pub fn normalized(mut components: Vec<Component>) -> Result<Self> {
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::domain("weights must have a positive finite sum"));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Self::new(components)
    }

    /// `N(mean, sigma^2 I)`.
    pub fn single(mean: impl Into<Vec<f64>>, sigma: f64) -> Result<Self> {
        Self::new(vec![Component::new(1.0, mean, sigma)])
    }

    /// `N(0, I)` in `R^d`: the data distribution equals the source.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::single(vec![0.0; dim], 1.0)
    }

    /// The four-blob toy target: means `(+-2, +-2)`, equal weights, spread 0.3.
    pub fn four_corners() -> Self {
        let comps = [(2.0, 2.0), (-2.0, 2.0), (2.0, -2.0), (-2.0, -2.0)]
            .into_iter()
            .map(|(a, b)| Component::new(0.25, vec![a, b], 0.3))
            .collect();
        Self::new(comps).expect("static mixture is valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    fn check_point(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::domain(format!("time {t} outside (0, 1)")));
        }
        Ok(clamp_time(t))
    }

    /// `log pi_t(x)` for the law of `X_t`.
    pub fn marginal_log_density(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        let t = self.check_point(x, t)?;
        Ok(self.log_terms(x, t).0)
    }

    /// Per-component log joint terms and their log-sum-exp.
    fn log_terms(&self, x: &DVector<f64>, t: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let d = self.dim as f64;
        let mut logs = Vec::with_capacity(self.len());
        let mut vars = Vec::with_capacity(self.len());
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            let s = component_variance(c.sigma, t);
            let mut sq = 0.0;
            for i in 0..self.dim {
                let dev = x[i] - (1.0 - t) * c.mean[i];
                sq += dev * dev;
            }
            logs.push(lw - 0.5 * d * (2.0 * PI * s).ln() - 0.5 * sq / s);
            vars.push(s);
        }
        (log_sum_exp(&logs), logs, vars)
    }

    pub fn conditional_stats(&self, x: &DVector<f64>, t: f64) -> Result<ConditionalStats> {
        let t = self.check_point(x, t)?;
        Ok(self.stats_unchecked(x, t))
    }

    fn stats_unchecked(&self, x: &DVector<f64>, t: f64) -> ConditionalStats {
        let (lse, logs, vars) = self.log_terms(x, t);
        let responsibilities: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let mut data = DVector::zeros(self.dim);
        let mut noise = DVector::zeros(self.dim);
        for ((c, r), s) in self.components.iter().zip(&responsibilities).zip(&vars) {
            let shrink = (1.0 - t) * c.sigma * c.sigma / s;
            for i in 0..self.dim {
                let dev = x[i] - (1.0 - t) * c.mean[i];
                data[i] += r * (c.mean[i] + shrink * dev);
                noise[i] += r * (t / s) * dev;
            }
        }
        ConditionalStats {
            responsibilities,
            cond_mean_data: data,
            cond_mean_noise: noise,
            variances: vars,
        }
    }

    /// `E[X_noise - X_data | X_t = x]`.
    pub fn velocity(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let t = self.check_point(x, t)?;
        Ok(self.velocity_unchecked(x, t))
    }

    pub(crate) fn velocity_unchecked(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let st = self.stats_unchecked(x, t);
        st.cond_mean_noise - st.cond_mean_data
    }

    /// Exact `d v / d x`, responsibility gradients included.
    pub fn jacobian(&self, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        let t = self.check_point(x, t)?;
        Ok(self.jacobian_unchecked(x, t))
    }

    pub(crate) fn jacobian_unchecked(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let d = self.dim;
        let (lse, logs, vars) = self.log_terms(x, t);
        let resp: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();

        // v_k = alpha_k * dev_k - mu_k, g_k = -dev_k / s_k = grad log N_k
        let mut devs = Vec::with_capacity(self.len());
        let mut vks = Vec::with_capacity(self.len());
        let mut gks = Vec::with_capacity(self.len());
        let mut g_bar = DVector::zeros(d);
        let mut diag = 0.0;
        for ((c, r), s) in self.components.iter().zip(&resp).zip(&vars) {
            let dev = x - c.mean.scale(1.0 - t);
            let alpha = (t - (1.0 - t) * c.sigma * c.sigma) / s;
            let vk = dev.scale(alpha) - &c.mean;
            let gk = dev.scale(-1.0 / s);
            g_bar += gk.scale(*r);
            diag += r * alpha;
            devs.push(dev);
            vks.push(vk);
            gks.push(gk);
        }
        let mut jac = DMatrix::identity(d, d).scale(diag);
        for ((vk, gk), r) in vks.iter().zip(&gks).zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            let dg = gk - &g_bar;
            jac += (vk * dg.transpose()).scale(*r);
        }
        jac
    }

    /// Draws `(x_data, x_noise)` from an explicit stream.
    pub fn sample_pair_with(&self, rng: &mut Rng) -> (DVector<f64>, DVector<f64>) {
        let k = self.sample_component(rng);
        let c = &self.components[k];
        let data = DVector::from_fn(self.dim, |i, _| {
            let z: f64 = StandardNormal.sample(rng);
            c.mean[i] + c.sigma * z
        });
        let noise = DVector::from_fn(self.dim, |_, _| StandardNormal.sample(rng));
        (data, noise)
    }

    /// One independent `(x_data, x_noise)` pair from `seed`.
    pub fn sample_pair(&self, seed: u64) -> (DVector<f64>, DVector<f64>) {
        self.sample_pair_with(&mut rng_from_seed(seed))
    }

    /// Categorical draw on the weights.
    pub fn sample_component(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding slack above the cumulative sum
        self.components
            .iter()
            .rposition(|c| c.weight > 0.0)
            .unwrap_or(0)
    }

    /// Index of the component whose mean is closest to `x`.
    pub fn nearest_component(&self, x: &DVector<f64>) -> usize {
        self.components
            .iter()
            .enumerate()
            .map(|(k, c)| (k, (x - &c.mean).norm_squared()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .unwrap_or(0)
    }
}

/// Posterior quantities of the mixture flow at one `(x, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalStats {
    pub responsibilities: Vec<f64>,
    pub cond_mean_data: DVector<f64>,
    pub cond_mean_noise: DVector<f64>,
    /// `s_k = (1 - t)^2 sigma_k^2 + t^2`.
    pub variances: Vec<f64>,
}

pub fn component_variance(sigma: f64, t: f64) -> f64 {
    let u = 1.0 - t;
    u * u * sigma * sigma + t * t
}

pub fn clamp_time(t: f64) -> f64 {
    t.clamp(TIME_EPS, 1.0 - TIME_EPS)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
