//! `oinv` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.
//! Diagnostics go to standard error; data files go to the output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use super::config::ExperimentConfig;
use super::emit::{
    eval_log_csv, finetune_log_csv, opt_trace_csv, samples_csv, sweep_csv, train_log_csv,
    trajectory_csv, write_file, write_summary,
};
use super::experiments::{
    analyze, build_field, finetune_experiment, grid_fidelity, inversion_record, load_mlp,
    postopt_experiment, run_averaging_batch, run_group_periodicity, train_experiment,
    FIDELITY_GRID, FIDELITY_HALF_WIDTH, FIDELITY_TIMES,
};
use super::report::{RunRecord, SummaryReport};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::field::VelocityField;
use crate::inversion::{
    group_invert, invert, spectral_norm, stability_sweep, stability_violations, FixedPointMap,
};
use crate::mlp::{batch_loss, save_checkpoint};
use crate::rng::trial_rng;
use crate::sampler::euler_sample;

/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "OINV_OUT_DIR";

#[derive(Debug, Parser)]
#[command(
    name = "oinv",
    version,
    about = "Oscillating fixed-point inversion of rectified-flow fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (JSON); the built-in default when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides OINV_OUT_DIR and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Record wall-clock time in summary.json.
    #[arg(long, global = true)]
    timing: bool,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Draw samples with the Euler sampler.
    Sample,
    /// Fixed-point inversion of the target.
    Invert,
    /// Group inversion over the configured targets.
    GroupInvert,
    /// Exact root of the fixed-point map.
    Root,
    /// Spectral norm of the map's Jacobian at the root.
    Jacobian,
    /// Stability sweep over gamma.
    Sweep,
    /// Train the MLP velocity field on the mixture.
    Train,
    /// Finetune a learned field toward an edited anchor.
    Finetune,
    /// Post-inversion optimization.
    Optimize,
    /// Group-inversion and cluster-averaging experiments.
    Verify,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::Invert => "invert",
            Command::GroupInvert => "group-invert",
            Command::Root => "root",
            Command::Jacobian => "jacobian",
            Command::Sweep => "sweep",
            Command::Train => "train",
            Command::Finetune => "finetune",
            Command::Optimize => "optimize",
            Command::Verify => "verify",
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(dir) => {
            log::info!(
                "{} finished; outputs in {}",
                cli.command.name(),
                dir.display()
            );
            0
        }
        Err(e) => {
            eprintln!("oinv {}: error: {e}", cli.command.name());
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let started = Instant::now();
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg.base_seed = seed;
    }
    let env_root = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from);
    let out = cfg.resolve_output_dir(cli.out.as_deref(), env_root.as_deref());
    let exec = if cli.sequential {
        Exec::Sequential
    } else {
        Exec::default()
    };
    let mut summary = SummaryReport::new(cli.command.name(), cfg.hash(), cfg.base_seed);

    match cli.command {
        Command::Sample => cmd_sample(&cfg, &out, exec, &mut summary)?,
        Command::Invert => cmd_invert(&cfg, &out, false, &mut summary)?,
        Command::GroupInvert => cmd_invert(&cfg, &out, true, &mut summary)?,
        Command::Root => {
            let field = build_field(&cfg)?;
            let a = analyze(&cfg, field.as_ref(), &cfg.target_vec())?;
            let map = FixedPointMap::new(field.as_ref(), cfg.target_vec(), cfg.gamma)?;
            let mut r = a.record("root");
            let identity = (map.one_step_predict(&a.root.z_star) - cfg.target_vec()).norm();
            r.float_metric("prediction_residual", identity);
            summary.push(r);
        }
        Command::Jacobian => {
            let field = build_field(&cfg)?;
            let a = analyze(&cfg, field.as_ref(), &cfg.target_vec())?;
            let mut r = a.record("jacobian");
            let at_target = spectral_norm(field.as_ref(), &cfg.target_vec(), cfg.gamma);
            r.float_metric("spectral_norm_at_target", at_target.spectral_norm);
            r.metric("unstable_root", a.jacobian.spectral_norm > 1.0);
            summary.push(r);
        }
        Command::Sweep => cmd_sweep(&cfg, &out, exec, &mut summary)?,
        Command::Train => cmd_train(&cfg, &out, exec, &mut summary)?,
        Command::Finetune => cmd_finetune(&cfg, &out, &mut summary)?,
        Command::Optimize => {
            let field = build_field(&cfg)?;
            let o = postopt_experiment(&cfg, field.as_ref())?;
            write_file(&out, "opt_trace.csv", opt_trace_csv(&o.result))?;
            let mut r = o.analysis.record("optimize");
            r.set_post_opt(
                &o.result,
                o.initial_pixel_loss,
                o.final_pixel_loss,
                o.beta,
                o.kernel_scale,
            );
            r.metric("references", o.references.len());
            summary.push(r);
        }
        Command::Verify => {
            let field = build_field(&cfg)?;
            let (_, records) = run_group_periodicity(&cfg, field.as_ref(), Some(&out))?;
            for r in records {
                summary.push(r);
            }
            let batch = run_averaging_batch(&cfg, field.as_ref(), exec)?;
            write_file(&out, "averaging.csv", batch.csv(cfg.mixture.dim))?;
            summary.push(batch.record());
        }
    }
    if cli.timing {
        summary.set_wall_clock(started.elapsed().as_secs_f64());
    }
    write_summary(&out, &summary)?;
    Ok(out)
}

fn cmd_sample(
    cfg: &ExperimentConfig,
    out: &Path,
    exec: Exec,
    summary: &mut SummaryReport,
) -> Result<()> {
    let field = build_field(cfg)?;
    let mix = cfg.mixture()?;
    let schedule = cfg.schedule()?;
    let d = mix.dim();
    let draws = exec.map_range(cfg.sample.count, |i| -> Result<(DVector<f64>, usize)> {
        let mut rng = trial_rng(cfg.base_seed, i as u64);
        let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
        let path = euler_sample(field.as_ref(), &schedule, &z)?;
        let x = path.last().expect("sampler returns the endpoint").clone();
        let k = mix.nearest_component(&x);
        Ok((x, k))
    });
    let draws: Vec<_> = draws.into_iter().collect::<Result<_>>()?;
    write_file(out, "samples.csv", samples_csv(&draws, d))?;

    let mut counts = vec![0usize; mix.len()];
    let mut within = 0usize;
    for (x, k) in &draws {
        counts[*k] += 1;
        let c = &mix.components()[*k];
        if (x - &c.mean).norm() <= 4.0 * c.sigma {
            within += 1;
        }
    }
    let mut r = RunRecord::new("sample");
    r.metric("count", draws.len());
    r.metric("component_counts", counts);
    r.float_metric(
        "fraction_within_4_sigma",
        within as f64 / draws.len() as f64,
    );
    r.metric("steps", schedule.steps());
    summary.push(r);
    Ok(())
}

fn cmd_invert(
    cfg: &ExperimentConfig,
    out: &Path,
    group: bool,
    summary: &mut SummaryReport,
) -> Result<()> {
    let field = build_field(cfg)?;
    let (traj, label) = if group {
        let targets = cfg.group_target_vecs();
        (
            group_invert(field.as_ref(), &targets, cfg.gamma, cfg.iterations)?,
            "group-invert",
        )
    } else {
        let map = FixedPointMap::new(field.as_ref(), cfg.target_vec(), cfg.gamma)?;
        (invert(&map, cfg.iterations)?, "invert")
    };
    write_file(out, "trajectory.csv", trajectory_csv(&traj, field.dim()))?;
    let mut r = inversion_record(cfg, &traj, label)?;
    if group {
        r.metric("group_size", cfg.group_target_vecs().len());
    }
    summary.push(r);
    Ok(())
}

fn cmd_sweep(
    cfg: &ExperimentConfig,
    out: &Path,
    exec: Exec,
    summary: &mut SummaryReport,
) -> Result<()> {
    let field = build_field(cfg)?;
    let s = &cfg.sweep;
    let rows = stability_sweep(
        field.as_ref(),
        &cfg.target_vec(),
        &s.gammas(),
        s.iterations,
        s.window,
        cfg.tolerance,
        exec,
    );
    write_file(out, "sweep.csv", sweep_csv(&rows))?;
    let violations = stability_violations(&rows, s.dead_band, 1e-8);
    let mut r = RunRecord::new("sweep");
    r.metric("rows", rows.len());
    r.metric(
        "failed_rows",
        rows.iter().filter(|r| r.error.is_some()).count(),
    );
    r.metric(
        "oscillating_rows",
        rows.iter().filter(|r| r.period != Some(1)).count(),
    );
    r.metric("consistency_violations", violations.len());
    r.metric(
        "violating_gammas",
        violations.iter().map(|v| v.gamma).collect::<Vec<_>>(),
    );
    summary.push(r);
    Ok(())
}

fn cmd_train(
    cfg: &ExperimentConfig,
    out: &Path,
    exec: Exec,
    summary: &mut SummaryReport,
) -> Result<()> {
    let (field, log) = train_experiment(cfg, exec)?;
    write_file(out, "model.ckpt", save_checkpoint(&field))?;
    write_file(out, "train_log.csv", train_log_csv(&log))?;
    write_file(out, "eval_log.csv", eval_log_csv(&log))?;
    let mix = cfg.mixture()?;
    let mut r = RunRecord::new("train");
    r.metric("steps", log.losses.len());
    r.metric("parameters", field.params().len());
    match log.final_eval_loss() {
        Some(l) => r.float_metric("final_eval_loss", l),
        None => r.null_metric("final_eval_loss", "evaluation disabled"),
    }
    if let Some(l) = log.losses.last() {
        r.float_metric("final_batch_loss", *l);
    }
    if mix.dim() == 2 {
        let fid = grid_fidelity(
            &field,
            &mix,
            FIDELITY_HALF_WIDTH,
            FIDELITY_GRID,
            &FIDELITY_TIMES,
        )?;
        r.float_metric("grid_mean_error", fid.mean_error);
        r.float_metric("grid_rms_velocity", fid.rms_velocity);
        r.float_metric("grid_error_ratio", fid.ratio());
    } else {
        r.null_metric("grid_error_ratio", "grid check is two-dimensional");
    }
    summary.push(r);
    Ok(())
}

fn cmd_finetune(cfg: &ExperimentConfig, out: &Path, summary: &mut SummaryReport) -> Result<()> {
    let super::config::FieldSpec::Learned { checkpoint } = &cfg.field else {
        return Err(Error::Config(
            "finetune needs a learned field: set field to {\"kind\": \"learned\", \"checkpoint\": ...}".into(),
        ));
    };
    let field = load_mlp(Path::new(checkpoint))?;
    let o = finetune_experiment(cfg, &field)?;
    write_file(out, "finetuned.ckpt", save_checkpoint(&o.field))?;
    write_file(out, "finetune_log.csv", finetune_log_csv(&o.log))?;
    let mut before = RunRecord::new("finetune_before");
    before.set_cluster(&o.before);
    before.float_metric("distance_to_component", o.distance_before);
    let mut after = RunRecord::new("finetune_after");
    after.set_cluster(&o.after);
    after.float_metric("distance_to_component", o.distance_after);
    after.float_metric("final_finetune_loss", o.log.final_loss());
    after.metric("component", o.component);
    after.metric("moved_closer", o.distance_after < o.distance_before);
    summary.push(before);
    summary.push(after);
    Ok(())
}

/// Loss of a saved model on the fixed evaluation batch of `cfg`.
pub fn replay_eval_loss(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<f64> {
    let field = load_mlp(checkpoint)?;
    let batch = crate::mlp::eval_batch(&cfg.mixture()?, &cfg.train_config());
    Ok(batch_loss(&field, &batch))
}
