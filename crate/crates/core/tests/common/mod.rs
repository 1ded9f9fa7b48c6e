//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls the crate's own samplers or formulas.

#![allow(dead_code)]

use std::path::Path;

use nalgebra::DVector;
use oinv_core::exec::Exec;
use oinv_core::field::MixtureField;
use oinv_core::inversion::{detect_period, invert, FixedPointMap};
use oinv_core::mixture::GaussianMixture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Rejection-window Monte Carlo estimate of `E[noise - data | X_t = x]`
/// at one probe.
#[derive(Debug, Clone)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub std_err: Vec<f64>,
    pub accepted: usize,
}

struct Acc {
    n: usize,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
}

/// Draws `samples` coupled pairs and, for every probe, averages
/// `noise - data` over the draws whose `X_t` falls within `eps` (Euclidean)
/// of the probe.
pub fn mc_velocity(
    mix: &GaussianMixture,
    probes: &[Vec<f64>],
    t: f64,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Vec<McEstimate> {
    const CHUNK: usize = 250_000;
    let d = mix.dim();
    let comps = mix.components();
    let mut cum = Vec::new();
    let mut acc = 0.0;
    for c in comps {
        acc += c.weight;
        cum.push(acc);
    }
    let chunks = samples.div_ceil(CHUNK);
    let eps2 = eps * eps;
    let parts = Exec::default().map_range(chunks, |ci| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed ^ (ci as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let n = CHUNK.min(samples - ci * CHUNK);
        let mut accs: Vec<Acc> = probes
            .iter()
            .map(|_| Acc {
                n: 0,
                sum: vec![0.0; d],
                sumsq: vec![0.0; d],
            })
            .collect();
        let mut data = vec![0.0; d];
        let mut noise = vec![0.0; d];
        let mut xt = vec![0.0; d];
        for _ in 0..n {
            let u: f64 = rng.random();
            let k = cum.iter().position(|c| u < *c).unwrap_or(comps.len() - 1);
            let c = &comps[k];
            for i in 0..d {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                data[i] = c.mean[i] + c.sigma * a;
                noise[i] = b;
                xt[i] = t * noise[i] + (1.0 - t) * data[i];
            }
            for (p, a) in probes.iter().zip(accs.iter_mut()) {
                let dist2: f64 = xt.iter().zip(p).map(|(x, y)| (x - y) * (x - y)).sum();
                if dist2 < eps2 {
                    a.n += 1;
                    for i in 0..d {
                        let v = noise[i] - data[i];
                        a.sum[i] += v;
                        a.sumsq[i] += v * v;
                    }
                }
            }
        }
        accs
    });
    (0..probes.len())
        .map(|p| {
            let mut n = 0;
            let mut sum = vec![0.0; d];
            let mut sumsq = vec![0.0; d];
            for part in &parts {
                n += part[p].n;
                for i in 0..d {
                    sum[i] += part[p].sum[i];
                    sumsq[i] += part[p].sumsq[i];
                }
            }
            let nf = n as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
            let std_err = (0..d)
                .map(|i| {
                    let var = (sumsq[i] / nf - mean[i] * mean[i]) * nf / (nf - 1.0);
                    (var / nf).sqrt()
                })
                .collect();
            McEstimate {
                mean,
                std_err,
                accepted: n,
            }
        })
        .collect()
}

/// Probes inside the bulk of `X_t`: the time-scaled component means, offset
/// by half a conditional standard deviation in spread-out directions.
pub fn support_probes(mix: &GaussianMixture, t: f64, count: usize) -> Vec<Vec<f64>> {
    let comps = mix.components();
    (0..count)
        .map(|i| {
            let c = &comps[i % comps.len()];
            let sd = ((1.0 - t).powi(2) * c.sigma * c.sigma + t * t).sqrt();
            let ang = 2.0 * std::f64::consts::PI * i as f64 / count as f64 + 0.3;
            let mut p: Vec<f64> = c.mean.iter().map(|m| (1.0 - t) * m).collect();
            p[0] += 0.5 * sd * ang.cos();
            if p.len() > 1 {
                p[1] += 0.5 * sd * ang.sin();
            }
            p
        })
        .collect()
}

/// Velocity by trapezoidal quadrature of the conditional-expectation
/// integral over the data variable: with
/// `w(z) = pi_data(z) * phi((x - (1 - t) z) / t)`,
/// `E[data | x] = int z w / int w` and `v = (x - E[data | x]) / t`.
/// Two-dimensional mixtures only.
pub fn quadrature_velocity(
    mix: &GaussianMixture,
    x: [f64; 2],
    t: f64,
    half_width: f64,
    h: f64,
) -> [f64; 2] {
    let n = (2.0 * half_width / h).round() as i64;
    let mut w_sum = 0.0;
    let mut z_sum = [0.0; 2];
    for i in 0..=n {
        let z0 = -half_width + h * i as f64;
        for j in 0..=n {
            let z1 = -half_width + h * j as f64;
            let mut dens = 0.0;
            for c in mix.components() {
                let s2 = c.sigma * c.sigma;
                let r2 = (z0 - c.mean[0]).powi(2) + (z1 - c.mean[1]).powi(2);
                dens += c.weight * (-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2);
            }
            let u0 = (x[0] - (1.0 - t) * z0) / t;
            let u1 = (x[1] - (1.0 - t) * z1) / t;
            let w = dens * (-(u0 * u0 + u1 * u1) / 2.0).exp();
            // interior trapezoid weights are 1; edges carry negligible mass
            w_sum += w;
            z_sum[0] += w * z0;
            z_sum[1] += w * z1;
        }
    }
    let e = [z_sum[0] / w_sum, z_sum[1] / w_sum];
    [(x[0] - e[0]) / t, (x[1] - e[1]) / t]
}

/// Sample autocorrelation of `xs` at `lag`.
pub fn autocorrelation(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag)
        .map(|i| (xs[i] - mean) * (xs[i + lag] - mean))
        .sum();
    cov / var
}

/// Smallest lag in `1..=max_lag` whose autocorrelation is within `slack` of
/// the maximum over that range.
pub fn autocorrelation_peak(xs: &[f64], max_lag: usize, slack: f64) -> usize {
    let ac: Vec<f64> = (1..=max_lag).map(|l| autocorrelation(xs, l)).collect();
    let best = ac.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    1 + ac.iter().position(|a| *a >= best - slack).unwrap()
}

/// Parses one named column of a CSV written by the harness; blank cells are `None`.
pub fn csv_column(path: &Path, name: &str) -> Vec<Option<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == name).unwrap();
    lines
        .map(|l| {
            let cell = l.split(',').nth(col).unwrap();
            (!cell.is_empty()).then(|| cell.parse().unwrap())
        })
        .collect()
}

pub fn dv(xs: &[f64]) -> DVector<f64> {
    DVector::from_row_slice(xs)
}

/// Full-SVD largest singular value of a 2 x 2 matrix in closed form.
pub fn largest_singular_value_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let s1 = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    ((s1 + (s1 * s1 - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt()
}

/// `n` points drawn from `N(center, radius^2 I)`.
pub fn gaussian_cloud(
    center: &DVector<f64>,
    n: usize,
    radius: f64,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| center.map(|c| c + radius * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Centroid and root-mean-square distance to it.
pub fn centroid_and_rms(points: &[DVector<f64>]) -> (DVector<f64>, f64) {
    let n = points.len() as f64;
    let c = points
        .iter()
        .fold(DVector::zeros(points[0].len()), |a, p| a + p)
        / n;
    let ms = points.iter().map(|p| (p - &c).norm_squared()).sum::<f64>() / n;
    (c, ms.sqrt())
}

pub struct Scenario {
    pub field: MixtureField,
    pub init: DVector<f64>,
    pub references: Vec<DVector<f64>>,
    pub target: DVector<f64>,
}

pub const SCENARIO_GAMMA: f64 = 0.7;

/// Post-opt scenario on the oscillating default configuration. The
/// references are a tight cloud around the phase whose prediction lies
/// nearest the pixel target.
pub fn postopt_scenario() -> Scenario {
    let field = MixtureField::new(GaussianMixture::four_corners());
    let target = dv(&[1.0, 2.0]);
    let map = FixedPointMap::new(&field, dv(&[0.1, 2.0]), SCENARIO_GAMMA).unwrap();
    let traj = invert(&map, 200).unwrap();
    let c = detect_period(&traj, 50, 1e-2).unwrap();
    assert_eq!(c.period, 2);
    let phase = c
        .phase_means
        .iter()
        .min_by(|a, b| {
            let da = (map.one_step_predict(a) - &target).norm();
            let db = (map.one_step_predict(b) - &target).norm();
            da.total_cmp(&db)
        })
        .unwrap();
    Scenario {
        references: gaussian_cloud(phase, 32, 0.05, 17),
        init: c.mean_of_means.clone(),
        field,
        target,
    }
}
