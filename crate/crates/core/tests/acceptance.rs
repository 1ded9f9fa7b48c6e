//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero when any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::{
    autocorrelation_peak, centroid_and_rms, csv_column, dv, mc_velocity, postopt_scenario,
    support_probes, SCENARIO_GAMMA,
};
use nalgebra::{DMatrix, DVector};
use oinv_core::exec::Exec;
use oinv_core::field::{FnField, LinearField, MixtureField, VelocityField};
use oinv_core::harness::experiments::{
    finetune_experiment, run_averaging_batch, run_group_periodicity, train_experiment,
};
use oinv_core::harness::ExperimentConfig;
use oinv_core::inversion::{
    detect_period, find_root, group_invert, invert, spectral_norm, stability_sweep,
    stability_violations, verify_cluster_averaging, FixedPointMap,
};
use oinv_core::mixture::{Component, GaussianMixture};
use oinv_core::mlp::{batch_loss, batch_loss_and_grad, eval_batch};
use oinv_core::postopt::{gp_loss, optimize, PostOptProblem, SquaredDistance};
use oinv_core::rng::trial_rng;
use oinv_core::MlpField;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mixtures() -> Vec<(&'static str, GaussianMixture)> {
    vec![
        ("four-corners", GaussianMixture::four_corners()),
        (
            "two-asymmetric",
            GaussianMixture::new(vec![
                Component::new(0.6, vec![-1.0, 0.5], 0.5),
                Component::new(0.4, vec![1.5, -1.0], 0.25),
            ])
            .unwrap(),
        ),
        (
            "three-mixed",
            GaussianMixture::new(vec![
                Component::new(0.5, vec![0.0, 0.0], 0.4),
                Component::new(0.3, vec![3.0, -1.0], 0.7),
                Component::new(0.2, vec![-2.0, 2.5], 0.2),
            ])
            .unwrap(),
        ),
    ]
}

fn monte_carlo_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut min_accepted = usize::MAX;
    for (ci, (_, mix)) in mixtures().iter().enumerate() {
        for (ti, t) in [0.3, 0.5, 0.7].into_iter().enumerate() {
            let probes = support_probes(mix, t, 5);
            let seed = 1000 + 10 * ci as u64 + ti as u64;
            let est = mc_velocity(mix, &probes, t, 0.02, 10_000_000, seed);
            for (p, e) in probes.iter().zip(&est) {
                let v = mix.velocity(&dv(p), t).unwrap();
                min_accepted = min_accepted.min(e.accepted);
                for i in 0..2 {
                    worst = worst.max((v[i] - e.mean[i]).abs() / e.std_err[i]);
                }
            }
        }
    }
    check(
        worst <= 3.0,
        format!("max deviation {worst:.2} SE over 90 coordinates, min window count {min_accepted}"),
    )
}

fn jacobian_vs_fd() -> Outcome {
    let mixes = mixtures();
    let mut rng = trial_rng(77, 0);
    let mut worst: f64 = 0.0;
    for k in 0..100 {
        let mix = &mixes[k % mixes.len()].1;
        let x = dv(&[rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]);
        let t: f64 = rng.random_range(0.1..0.9);
        let jac = mix.jacobian(&x, t).unwrap();
        let h = 1e-5;
        let mut fd = DMatrix::zeros(2, 2);
        for c in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += h;
            xm[c] -= h;
            let col = (mix.velocity(&xp, t).unwrap() - mix.velocity(&xm, t).unwrap()) / (2.0 * h);
            fd.set_column(c, &col);
        }
        let rel = (&jac - &fd).norm() / jac.norm().max(1e-3);
        worst = worst.max(rel);
    }
    check(
        worst <= 1e-5,
        format!("max relative error {worst:.2e} over 100 probes"),
    )
}

fn instability() -> Outcome {
    let cfg = ExperimentConfig::default_config();
    let field = MixtureField::new(cfg.mixture().unwrap());
    let map = FixedPointMap::new(&field, cfg.target_vec(), cfg.gamma).unwrap();
    let c = detect_period(&invert(&map, 200).unwrap(), 50, cfg.tolerance).unwrap();
    let root = find_root(&map, &c.mean_of_means, 1e-12).unwrap();
    let norm = spectral_norm(&field, &root.z_star, cfg.gamma).spectral_norm;
    if c.period < 2 || norm <= 1.0 {
        return Err(format!("default config p = {}, norm {norm:.4}", c.period));
    }

    let single = MixtureField::new(GaussianMixture::single(vec![1.0, -0.5], 1.0).unwrap());
    let grid: Vec<f64> = (0..20).map(|i| 0.05 + 0.9 * i as f64 / 19.0).collect();
    let rows = stability_sweep(
        &single,
        &dv(&[0.4, 0.9]),
        &grid,
        1000,
        50,
        1e-2,
        Exec::default(),
    );
    let max_single = rows
        .iter()
        .filter_map(|r| r.spectral_norm)
        .fold(0.0, f64::max);
    if rows
        .iter()
        .any(|r| r.period != Some(1) || r.spectral_norm.is_none_or(|n| n > 1.0))
    {
        return Err(format!(
            "single Gaussian not stable everywhere (max norm {max_single:.4})"
        ));
    }

    let sw = &cfg.sweep;
    let rows = stability_sweep(
        &field,
        &cfg.target_vec(),
        &sw.gammas(),
        sw.iterations,
        sw.window,
        cfg.tolerance,
        Exec::default(),
    );
    let bad = stability_violations(&rows, sw.dead_band, 1e-8);
    check(
        bad.is_empty(),
        format!(
            "default p = {} norm {norm:.4}; single-Gaussian max norm {max_single:.4}; {} sweep violations",
            c.period,
            bad.len()
        ),
    )
}

fn cluster_averaging() -> Outcome {
    let cfg = ExperimentConfig::default_config();
    let field = MixtureField::new(cfg.mixture().unwrap());
    let rep = run_averaging_batch(&cfg, &field, Exec::default()).unwrap();
    let med = rep
        .median_compact_error()
        .ok_or_else(|| "no compact two-cycles".to_string())?;

    let eps = 0.01;
    let gamma = 0.5;
    let y = 0.5;
    let cubic = FnField::new(1, move |z, _| dv(&[(-z[0] + eps * z[0].powi(3)) / gamma]));
    let rec = verify_cluster_averaging(&cubic, &dv(&[y]), gamma, 200, 50, 1e-2).unwrap();
    let cubic_err = rec
        .relative_error()
        .ok_or_else(|| "cubic map is not a two-cycle".to_string())?;
    check(
        med <= 0.15 && cubic_err <= 0.1,
        format!(
            "median {med:.4} over {} compact trials ({} skipped); cubic map {cubic_err:.2e}",
            rep.compact_errors().len(),
            rep.skipped()
        ),
    )
}

fn group_inversion() -> Outcome {
    let cfg = ExperimentConfig::default_config();
    let field = MixtureField::new(cfg.mixture().unwrap());
    let y = cfg.target_vec();
    let map = FixedPointMap::new(&field, y.clone(), cfg.gamma).unwrap();
    let a = invert(&map, 200).unwrap();
    let b = group_invert(&field, &[y], cfg.gamma, 200).unwrap();
    let bitwise = a.iterates.iter().zip(&b.iterates).all(|(p, q)| {
        p.iter()
            .zip(q.iter())
            .all(|(u, v)| u.to_bits() == v.to_bits())
    });
    if !bitwise {
        return Err("m = 1 differs from plain inversion".into());
    }

    let (gamma, slope) = (0.8, -0.5);
    let bb = gamma * slope;
    let y0 = dv(&[1.0, -2.0]);
    let y1 = dv(&[0.5, 3.0]);
    let lin = LinearField { dim: 2, slope };
    let traj = group_invert(&lin, &[y0.clone(), y1.clone()], gamma, 200).unwrap();
    let even = (&y1 + &y0 * bb) / (1.0 - bb * bb);
    let affine_err = (&traj.iterates[200] - &even).norm();
    if affine_err > 1e-8 {
        return Err(format!("affine two-cycle off by {affine_err:.2e}"));
    }

    let tmp = tempfile::tempdir().unwrap();
    let (runs, _) = run_group_periodicity(&cfg, &field, Some(tmp.path())).unwrap();
    let mut summary = Vec::new();
    for run in &runs {
        let p = run.cluster.period;
        if run.m == 2 && (p == 0 || p % 2 != 0) {
            return Err(format!("m = 2 period {p}"));
        }
        let series: Vec<f64> = csv_column(
            &tmp.path().join(format!("group/m{}/distance.csv", run.m)),
            "distance_to_start",
        )
        .into_iter()
        .map(Option::unwrap)
        .collect();
        let peak = autocorrelation_peak(&series[series.len() - 50..], 25, 1e-6);
        if peak != p {
            return Err(format!(
                "m = {}: autocorrelation peak {peak}, period {p}",
                run.m
            ));
        }
        summary.push(format!("m={} p={p}", run.m));
    }
    Ok(format!(
        "bitwise m=1; affine error {affine_err:.1e}; {}",
        summary.join(", ")
    ))
}

fn learned_fidelity(cfg: &ExperimentConfig, field: &MlpField) -> Outcome {
    let mix = cfg.mixture().unwrap();
    let (mut err, mut speed2, mut n) = (0.0, 0.0, 0.0);
    for t in [0.5, 0.7, 0.9] {
        for i in 0..21 {
            for j in 0..21 {
                let x = dv(&[-4.0 + 0.4 * i as f64, -4.0 + 0.4 * j as f64]);
                let v = mix.velocity(&x, t).unwrap();
                err += (field.eval(&x, t) - &v).norm();
                speed2 += v.norm_squared();
                n += 1.0;
            }
        }
    }
    let ratio = (err / n) / (speed2 / n).sqrt();

    let batch = eval_batch(&mix, &cfg.train_config());
    let batch = &batch[..64];
    let (_, grad) = batch_loss_and_grad(field, batch, Exec::Sequential);
    let mut probe = field.clone();
    let np = probe.params().len();
    let mut grad_err: f64 = 0.0;
    for k in (0..np).step_by(np / 50) {
        let orig = probe.params()[k];
        let h = 1e-5 * (1.0 + orig.abs());
        probe.params_mut()[k] = orig + h;
        let lp = batch_loss(&probe, batch);
        probe.params_mut()[k] = orig - h;
        let lm = batch_loss(&probe, batch);
        probe.params_mut()[k] = orig;
        let fd = (lp - lm) / (2.0 * h);
        grad_err = grad_err.max((grad[k] - fd).abs() / fd.abs().max(grad[k].abs()).max(1e-6));
    }

    let map = FixedPointMap::new(field, cfg.target_vec(), cfg.gamma).unwrap();
    let p = detect_period(&invert(&map, 200).unwrap(), 50, cfg.tolerance)
        .unwrap()
        .period;
    check(
        ratio <= 0.1 && grad_err <= 1e-4 && p >= 2,
        format!("grid error ratio {ratio:.4} (limit 0.1); gradient check {grad_err:.2e}; learned p = {p}"),
    )
}

fn finetuned_inversion(cfg: &ExperimentConfig, field: &MlpField) -> Outcome {
    let out = finetune_experiment(cfg, field).unwrap();
    let loss = out.log.final_loss();
    check(
        loss < 1e-6 && out.distance_after < out.distance_before,
        format!(
            "loss {loss:.2e}; distance to component {} {:.4} -> {:.4}",
            out.component, out.distance_before, out.distance_after
        ),
    )
}

fn post_opt() -> Outcome {
    let zero = LinearField { dim: 3, slope: 0.0 };
    let c = dv(&[0.5, -1.0, 2.0]);
    let p = PostOptProblem::new(&zero, 0.5, SquaredDistance { target: c.clone() }).unwrap();
    let r = optimize(&p, &DVector::zeros(3), 100, 1e-10).unwrap();
    let quad_err = (&r.z_opt - &c).norm();
    if quad_err > 1e-10 {
        return Err(format!("quadratic case off by {quad_err:.2e}"));
    }

    let refs = [dv(&[1.0]), dv(&[-1.0])];
    let want = 1.0 - 2.0 * (-0.5f64).exp() + 0.5 * (1.0 + (-2.0f64).exp());
    let gp_err = (gp_loss(&dv(&[0.0]), &refs, 1.0).unwrap() - want).abs();
    if gp_err > 1e-12 {
        return Err(format!("gp hand value off by {gp_err:.2e}"));
    }

    let s = postopt_scenario();
    let (centroid, rms) = centroid_and_rms(&s.references);
    let loss = SquaredDistance {
        target: s.target.clone(),
    };
    let heavy = PostOptProblem::new(&s.field, SCENARIO_GAMMA, loss.clone())
        .unwrap()
        .with_references(s.references.clone(), 100.0, None)
        .unwrap();
    let rh = optimize(&heavy, &s.init, 500, 1e-10).unwrap();
    let dist = (&rh.z_opt - &centroid).norm();
    let heavy_drop = 1.0 - heavy.pixel_term(&rh.z_opt) / heavy.pixel_term(&s.init);

    let free = PostOptProblem::new(&s.field, SCENARIO_GAMMA, loss).unwrap();
    let rf = optimize(&free, &s.init, 500, 1e-10).unwrap();
    let free_drop = 1.0 - free.pixel_term(&rf.z_opt) / free.pixel_term(&s.init);
    check(
        dist <= 2.0 * rms && heavy_drop >= 0.5 && free_drop >= 0.9,
        format!(
            "beta=100: {dist:.3e} from centroid (rms {rms:.3e}), pixel loss -{:.1}%; beta=0: -{:.1}%",
            100.0 * heavy_drop,
            100.0 * free_drop
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut files = 0;
    for cmd in [
        "invert",
        "group-invert",
        "sample",
        "sweep",
        "verify",
        "optimize",
    ] {
        let mut snaps = Vec::new();
        for run in ["a", "b"] {
            let dir = tmp.path().join(cmd).join(run);
            let status = Command::new(env!("CARGO_BIN_EXE_oinv"))
                .args(["--out", dir.to_str().unwrap(), cmd])
                .env_remove("OINV_OUT_DIR")
                .status()
                .unwrap();
            if !status.success() {
                return Err(format!("`oinv {cmd}` failed"));
            }
            snaps.push(snapshot(&dir));
        }
        if snaps[0] != snaps[1] {
            return Err(format!("`oinv {cmd}` output differs between runs"));
        }
        files += snaps[0].len();
    }
    Ok(format!(
        "{files} files byte-identical across reruns of 6 commands"
    ))
}

fn run(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(msg) => {
            println!("PASS  {name}: {msg} [{secs:.1}s]");
            true
        }
        Err(msg) => {
            println!("FAIL  {name}: {msg} [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let mut results = vec![
        run("1 velocity vs Monte Carlo oracle", monte_carlo_oracle),
        run("2 Jacobian vs finite differences", jacobian_vs_fd),
        run("3 oscillation implies unstable root", instability),
        run("4 cluster-mean averaging", cluster_averaging),
        run("5 group inversion", group_inversion),
    ];

    let cfg = ExperimentConfig::default_config();
    let start = Instant::now();
    let trained = catch_unwind(|| train_experiment(&cfg, Exec::default()).unwrap().0);
    println!(
        "      (training took {:.1}s)",
        start.elapsed().as_secs_f64()
    );
    match &trained {
        Ok(field) => {
            results.push(run("6 learned field fidelity", || {
                learned_fidelity(&cfg, field)
            }));
            results.push(run("7 finetuned inversion", || {
                finetuned_inversion(&cfg, field)
            }));
        }
        Err(_) => {
            println!("FAIL  6 learned field fidelity: training failed");
            println!("FAIL  7 finetuned inversion: training failed");
            results.extend([false, false]);
        }
    }

    results.push(run("8 post-inversion optimization", post_opt));
    results.push(run("9 deterministic replay", determinism));

    let passed = results.iter().filter(|r| **r).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
