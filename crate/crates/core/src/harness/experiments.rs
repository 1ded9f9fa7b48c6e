//! Preset experiments shared by the CLI and the acceptance suite.

use std::path::Path;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};

use super::config::{ExperimentConfig, FieldSpec, PostOptInit};
use super::emit::{distance_csv, trajectory_csv, write_file};
use super::report::{vec_of, RunRecord};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::field::{MixtureField, VelocityField};
use crate::inversion::{
    detect_period, find_root, group_invert, invert, spectral_norm, verify_cluster_averaging,
    AveragingRecord, ClusterReport, FixedPointMap, InversionTrajectory, JacobianReport, RootResult,
};
use crate::mixture::GaussianMixture;
use crate::mlp::{finetune, load_checkpoint, train, FinetuneLog, MlpField, TrainLog};
use crate::postopt::{optimize, OptResult, PostOptProblem, SquaredDistance};
use crate::rng::trial_rng;

/// Root tolerance used by every experiment.
pub const ROOT_TOL: f64 = 1e-12;

pub fn load_mlp(path: &Path) -> Result<MlpField> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// The velocity field the config selects.
pub fn build_field(cfg: &ExperimentConfig) -> Result<Box<dyn VelocityField>> {
    match &cfg.field {
        FieldSpec::Analytic => Ok(Box::new(MixtureField::new(cfg.mixture()?))),
        FieldSpec::Learned { checkpoint } => {
            let mlp = load_mlp(Path::new(checkpoint))?;
            if mlp.output_dim() != cfg.mixture.dim || mlp.input_dim() != cfg.mixture.dim + 1 {
                return Err(Error::Config(format!(
                    "checkpoint {checkpoint} has layer sizes {:?}, incompatible with dimension {}",
                    mlp.sizes(),
                    cfg.mixture.dim
                )));
            }
            Ok(Box::new(mlp))
        }
    }
}

/// Tail iterates in residue class `phase` of a detected period. With no
/// period the whole tail is returned.
pub fn phase_members(
    traj: &InversionTrajectory,
    cluster: &ClusterReport,
    phase: usize,
) -> Vec<DVector<f64>> {
    let start = traj.iterates.len() - cluster.window;
    (start..traj.iterates.len())
        .filter(|i| cluster.period == 0 || i % cluster.period == phase % cluster.period)
        .map(|i| traj.iterates[i].clone())
        .collect()
}

/// Inversion, period, root and Jacobian norm at the root for one target.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub trajectory: InversionTrajectory,
    pub cluster: ClusterReport,
    pub root: RootResult,
    pub jacobian: JacobianReport,
}

impl Analysis {
    pub fn record(&self, label: &str) -> RunRecord {
        let mut r = RunRecord::new(label);
        r.set_cluster(&self.cluster);
        r.set_root(&self.root);
        r.set_jacobian(&self.jacobian);
        r.explain("averaging_error", "only computed by `verify`");
        r.explain("relative_averaging_error", "only computed by `verify`");
        r
    }
}

/// Runs the verification-length inversion of `target` and locates the
/// root from the mean of the phase means.
pub fn analyze<F: VelocityField + ?Sized>(
    cfg: &ExperimentConfig,
    field: &F,
    target: &DVector<f64>,
) -> Result<Analysis> {
    let map = FixedPointMap::new(field, target.clone(), cfg.gamma)?;
    let trajectory = invert(&map, cfg.verify.iterations)?;
    let cluster = detect_period(&trajectory, cfg.verify.window, cfg.tolerance)?;
    let root = find_root(&map, &cluster.mean_of_means, ROOT_TOL)?;
    let jacobian = spectral_norm(field, &root.z_star, cfg.gamma);
    Ok(Analysis {
        trajectory,
        cluster,
        root,
        jacobian,
    })
}

/// Record for a plain or group inversion of `cfg.iterations` steps.
pub fn inversion_record(
    cfg: &ExperimentConfig,
    traj: &InversionTrajectory,
    label: &str,
) -> Result<RunRecord> {
    let mut r = RunRecord::new(label);
    if traj.iterations() >= 2 * cfg.window {
        r.set_cluster(&detect_period(traj, cfg.window, cfg.tolerance)?);
    } else {
        let why = format!(
            "{} iterations are fewer than twice the window {}",
            traj.iterations(),
            cfg.window
        );
        for key in ["period", "phase_means", "phase_spreads", "mean_of_means"] {
            r.explain(key, &why);
        }
    }
    if let (Some(z), Some(p)) = (traj.iterates.last(), traj.one_step_preds.last()) {
        r.metric("final_iterate", vec_of(z));
        r.metric("final_prediction", vec_of(p));
    }
    if let Some(d) = traj.step_distances.last() {
        r.float_metric("final_step_distance", *d);
    }
    r.metric("iterations", traj.iterations());
    Ok(r)
}

/// Group targets for `m` anchors: the configured list, cycled if short.
pub fn cycled_group_targets(cfg: &ExperimentConfig, m: usize) -> Vec<DVector<f64>> {
    let all = cfg.group_target_vecs();
    (0..m).map(|i| all[i % all.len()].clone()).collect()
}

#[derive(Debug, Clone)]
pub struct GroupRun {
    pub m: usize,
    pub trajectory: InversionTrajectory,
    pub cluster: ClusterReport,
}

/// Group inversion with `m = 1, 2, 3` anchors at verification length.
/// Writes `group/m{m}/trajectory.csv` and `distance.csv` when `out` is set.
pub fn run_group_periodicity<F: VelocityField + ?Sized>(
    cfg: &ExperimentConfig,
    field: &F,
    out: Option<&Path>,
) -> Result<(Vec<GroupRun>, Vec<RunRecord>)> {
    let mut runs = Vec::new();
    let mut records = Vec::new();
    for m in 1..=3 {
        let targets = cycled_group_targets(cfg, m);
        let trajectory = group_invert(field, &targets, cfg.gamma, cfg.verify.iterations)?;
        let cluster = detect_period(&trajectory, cfg.verify.window, cfg.tolerance)?;
        if let Some(dir) = out {
            let dir = dir.join("group").join(format!("m{m}"));
            write_file(
                &dir,
                "trajectory.csv",
                trajectory_csv(&trajectory, field.dim()),
            )?;
            write_file(&dir, "distance.csv", distance_csv(&trajectory))?;
        }
        let mut r = RunRecord::new(format!("group_m{m}"));
        r.set_cluster(&cluster);
        r.metric("group_size", m);
        r.metric("periodic", cluster.period >= 2);
        r.metric(
            "period_multiple_of_m",
            cluster.period > 0 && cluster.period % m == 0,
        );
        records.push(r);
        runs.push(GroupRun {
            m,
            trajectory,
            cluster,
        });
    }
    Ok((runs, records))
}

#[derive(Debug, Clone)]
pub struct AveragingTrial {
    pub index: usize,
    pub target: DVector<f64>,
    pub record: AveragingRecord,
}

#[derive(Debug, Clone)]
pub struct AveragingBatch {
    pub trials: Vec<AveragingTrial>,
}

impl AveragingBatch {
    /// Relative averaging errors of trials with compact two-cycles.
    pub fn compact_errors(&self) -> Vec<f64> {
        self.trials
            .iter()
            .filter(|t| t.record.is_compact_two_cycle())
            .filter_map(|t| t.record.relative_error())
            .collect()
    }

    /// Trials whose period was not 2.
    pub fn skipped(&self) -> usize {
        self.trials
            .iter()
            .filter(|t| t.record.relative_error().is_none())
            .count()
    }

    pub fn median_compact_error(&self) -> Option<f64> {
        median(self.compact_errors())
    }

    pub fn record(&self) -> RunRecord {
        let mut r = RunRecord::new("averaging");
        let n = self.trials.len();
        let skipped = self.skipped();
        let compact = self.compact_errors();
        r.metric("trials", n);
        r.metric("skipped_period_not_2", skipped);
        r.metric("two_cycles_not_compact", n - skipped - compact.len());
        r.metric("compact_two_cycles", compact.len());
        r.metric(
            "verdict",
            if skipped == n {
                "inapplicable: no trial produced a two-cycle"
            } else {
                "checked"
            },
        );
        match median(compact.clone()) {
            Some(m) => r.float_metric("median_relative_error", m),
            None => r.null_metric("median_relative_error", "no compact two-cycles"),
        }
        match compact.iter().copied().reduce(f64::max) {
            Some(m) => r.float_metric("max_relative_error", m),
            None => r.null_metric("max_relative_error", "no compact two-cycles"),
        }
        r
    }

    /// `trial, y_0.., period, compact, relative_error, averaging_error, root_residual`.
    pub fn csv(&self, dim: usize) -> String {
        use super::emit::fmt_float;
        use crate::inversion::AveragingOutcome;
        let mut out = String::from("trial");
        for i in 0..dim {
            out.push_str(&format!(",y_{i}"));
        }
        out.push_str(",period,compact,relative_error,averaging_error,root_residual\n");
        for t in &self.trials {
            let mut line = t.index.to_string();
            for x in t.target.iter() {
                line.push(',');
                line.push_str(&fmt_float(*x));
            }
            line.push_str(&format!(",{}", t.record.cluster.period));
            match &t.record.outcome {
                AveragingOutcome::Inapplicable { .. } => line.push_str(",false,,,"),
                AveragingOutcome::Checked {
                    root,
                    averaging_error,
                    relative_error,
                    compact,
                } => line.push_str(&format!(
                    ",{compact},{},{},{}",
                    fmt_float(*relative_error),
                    fmt_float(*averaging_error),
                    fmt_float(root.residual)
                )),
            }
            out.push_str(&line);
            out.push('\n');
        }
        out
    }
}

pub fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    Some(if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    })
}

/// Target for trial `index`: an anchor (cycled) plus isotropic jitter from
/// the trial's own stream.
pub fn averaging_target(cfg: &ExperimentConfig, index: usize) -> DVector<f64> {
    let anchors = &cfg.verify.anchors;
    let anchor = &anchors[index % anchors.len()];
    let mut rng = trial_rng(cfg.base_seed, index as u64);
    DVector::from_iterator(
        anchor.len(),
        anchor.iter().map(|a| {
            let e: f64 = StandardNormal.sample(&mut rng);
            a + cfg.verify.jitter * e
        }),
    )
}

/// Cluster-mean averaging check over `cfg.verify.trials` random targets.
pub fn run_averaging_batch<F: VelocityField + ?Sized>(
    cfg: &ExperimentConfig,
    field: &F,
    exec: Exec,
) -> Result<AveragingBatch> {
    let results = exec.map_range(cfg.verify.trials, |i| {
        let target = averaging_target(cfg, i);
        verify_cluster_averaging(
            field,
            &target,
            cfg.gamma,
            cfg.verify.iterations,
            cfg.verify.window,
            cfg.tolerance,
        )
        .map(|record| AveragingTrial {
            index: i,
            target,
            record,
        })
    });
    Ok(AveragingBatch {
        trials: results.into_iter().collect::<Result<_>>()?,
    })
}

/// Learned-vs-analytic agreement on a square grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fidelity {
    /// Mean over grid points and times of `|v_learned - v_exact|`.
    pub mean_error: f64,
    /// RMS of `|v_exact|` over the same points.
    pub rms_velocity: f64,
}

impl Fidelity {
    pub fn ratio(&self) -> f64 {
        self.mean_error / self.rms_velocity
    }
}

/// Compares `learned` with the exact mixture field on an `n x n` grid over
/// `[-half_width, half_width]^2` at each of `times`. Two-dimensional only.
pub fn grid_fidelity<F: VelocityField + ?Sized>(
    learned: &F,
    mix: &GaussianMixture,
    half_width: f64,
    n: usize,
    times: &[f64],
) -> Result<Fidelity> {
    crate::error::check_dim(2, mix.dim())?;
    let mut err = 0.0;
    let mut sq = 0.0;
    let mut count = 0.0;
    let step = 2.0 * half_width / (n - 1) as f64;
    for &t in times {
        for i in 0..n {
            for j in 0..n {
                let x = DVector::from_row_slice(&[
                    -half_width + step * i as f64,
                    -half_width + step * j as f64,
                ]);
                let exact = mix.velocity(&x, t)?;
                err += (learned.eval(&x, t) - &exact).norm();
                sq += exact.norm_squared();
                count += 1.0;
            }
        }
    }
    Ok(Fidelity {
        mean_error: err / count,
        rms_velocity: (sq / count).sqrt(),
    })
}

/// Grid used for the learned-field check: 21 x 21 over `[-4, 4]^2`.
pub const FIDELITY_HALF_WIDTH: f64 = 4.0;
pub const FIDELITY_GRID: usize = 21;
pub const FIDELITY_TIMES: [f64; 3] = [0.5, 0.7, 0.9];

/// Trains the default-architecture MLP on the configured mixture.
pub fn train_experiment(cfg: &ExperimentConfig, exec: Exec) -> Result<(MlpField, TrainLog)> {
    let mix = cfg.mixture()?;
    let spec = cfg.train_spec();
    let mut field = MlpField::with_default_arch(mix.dim(), spec.init_seed)?;
    let log = train(&mut field, &mix, &cfg.train_config(), exec)?;
    Ok((field, log))
}

/// Mean distance of the phase means (the tail mean when aperiodic) to `point`.
pub fn phase_distance(cluster: &ClusterReport, point: &DVector<f64>) -> f64 {
    if cluster.phase_means.is_empty() {
        return (&cluster.mean_of_means - point).norm();
    }
    let total: f64 = cluster.phase_means.iter().map(|m| (m - point).norm()).sum();
    total / cluster.phase_means.len() as f64
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub field: MlpField,
    pub log: FinetuneLog,
    pub component: usize,
    pub before: ClusterReport,
    pub after: ClusterReport,
    pub distance_before: f64,
    pub distance_after: f64,
}

/// Finetunes `field` per the config and compares where the inversion of
/// the anchor settles before and after.
pub fn finetune_experiment(cfg: &ExperimentConfig, field: &MlpField) -> Result<FinetuneOutcome> {
    let section = cfg
        .finetune
        .as_ref()
        .ok_or_else(|| Error::Config("config has no finetune section".into()))?;
    let spec = section.to_spec();
    let mix = cfg.mixture()?;
    let component = section
        .toward_component
        .unwrap_or_else(|| mix.nearest_component(&spec.edited_anchor));
    let mu = mix.components()[component].mean.clone();

    let cluster_of = |f: &MlpField| -> Result<ClusterReport> {
        let map = FixedPointMap::new(f, spec.anchor.clone(), cfg.gamma)?;
        let traj = invert(&map, cfg.verify.iterations)?;
        detect_period(&traj, cfg.verify.window, cfg.tolerance)
    };
    let before = cluster_of(field)?;
    let mut tuned = field.clone();
    let log = finetune(&mut tuned, &spec, section.learning_rate)?;
    let after = cluster_of(&tuned)?;
    Ok(FinetuneOutcome {
        distance_before: phase_distance(&before, &mu),
        distance_after: phase_distance(&after, &mu),
        field: tuned,
        log,
        component,
        before,
        after,
    })
}

#[derive(Debug, Clone)]
pub struct PostOptOutcome {
    pub analysis: Analysis,
    pub references: Vec<DVector<f64>>,
    pub result: OptResult,
    pub initial_pixel_loss: f64,
    pub final_pixel_loss: f64,
    pub beta: f64,
    pub kernel_scale: f64,
}

/// Inverts the target, then refines the latent with the configured
/// post-optimization problem.
pub fn postopt_experiment<F: VelocityField + ?Sized>(
    cfg: &ExperimentConfig,
    field: &F,
) -> Result<PostOptOutcome> {
    let spec = cfg
        .postopt
        .as_ref()
        .ok_or_else(|| Error::Config("config has no postopt section".into()))?;
    let analysis = analyze(cfg, field, &cfg.target_vec())?;
    let references = phase_members(
        &analysis.trajectory,
        &analysis.cluster,
        spec.reference_phase,
    );
    let init = match spec.init {
        PostOptInit::MeanOfMeans => analysis.cluster.mean_of_means.clone(),
        PostOptInit::Phase => {
            let c = &analysis.cluster;
            if c.period == 0 {
                c.mean_of_means.clone()
            } else {
                c.phase_means[spec.reference_phase % c.period].clone()
            }
        }
    };
    let loss = SquaredDistance {
        target: DVector::from_vec(spec.pixel_target.clone()),
    };
    let problem = PostOptProblem::new(field, cfg.gamma, loss)?.with_references(
        references.clone(),
        spec.beta,
        spec.kernel_scale,
    )?;
    let result = optimize(&problem, &init, spec.max_iters, spec.tol)?;
    Ok(PostOptOutcome {
        initial_pixel_loss: problem.pixel_term(&init),
        final_pixel_loss: problem.pixel_term(&result.z_opt),
        beta: problem.beta(),
        kernel_scale: problem.kernel_scale(),
        analysis,
        references,
        result,
    })
}
