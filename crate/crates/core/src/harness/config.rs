//! The JSON experiment configuration.
//!
//! One document describes a run completely. Unknown keys are rejected and
//! every numeric range is checked at load time, so a config that parses is
//! a config every subcommand can run.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mixture::{Component, GaussianMixture};
use crate::mlp::{FinetuneSpec, LrSchedule, TrainConfig, TrainableSubset};
use crate::sampler::TimeSchedule;

/// The committed default configuration.
pub const DEFAULT_CONFIG_JSON: &str = include_str!("../../../../configs/default.json");

/// Weight sums further than this from one are rejected; closer sums are
/// renormalized.
const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mixture: MixtureSpec,
    pub schedule: ScheduleSpec,
    pub gamma: f64,
    /// Fixed-point iterations for `invert` and `group-invert`.
    pub iterations: usize,
    /// Tail window for period detection.
    pub window: usize,
    /// Period tolerance, relative to the tail scale.
    pub tolerance: f64,
    /// The inversion target `y`.
    pub target: Vec<f64>,
    #[serde(default)]
    pub group_targets: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub field: FieldSpec,
    #[serde(default)]
    pub sample: SampleSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub finetune: Option<FinetuneSection>,
    #[serde(default)]
    pub postopt: Option<PostOptSpec>,
    pub base_seed: u64,
    pub output_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub dim: usize,
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub identity: bool,
    /// Time shift, required when `identity` is false.
    #[serde(default)]
    pub shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    #[default]
    Analytic,
    Learned {
        checkpoint: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleSpec {
    pub count: usize,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self { count: 2000 }
    }
}

/// Settings for verification runs (root, jacobian, verify, optimize,
/// finetune), which need a tail long enough for period detection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub iterations: usize,
    pub window: usize,
    /// Number of random targets in the cluster-averaging batch.
    pub trials: usize,
    /// Batch targets are drawn around these points.
    pub anchors: Vec<Vec<f64>>,
    /// Standard deviation of the isotropic jitter around each anchor.
    pub jitter: f64,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            iterations: 200,
            window: 50,
            trials: 50,
            anchors: vec![
                vec![0.0, 2.0],
                vec![2.0, 0.0],
                vec![0.0, -2.0],
                vec![-2.0, 0.0],
            ],
            jitter: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub points: usize,
    pub iterations: usize,
    pub window: usize,
    pub dead_band: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            gamma_min: 0.05,
            gamma_max: 0.95,
            points: 20,
            iterations: 1000,
            window: 50,
            dead_band: 0.05,
        }
    }
}

impl SweepSpec {
    pub fn gammas(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![self.gamma_min];
        }
        let step = (self.gamma_max - self.gamma_min) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| self.gamma_min + step * i as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub cosine_decay: bool,
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Seed for the weight initialization; the data stream uses the run seed.
    pub init_seed: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            steps: d.steps,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            adam_beta1: d.adam_beta1,
            adam_beta2: d.adam_beta2,
            adam_eps: d.adam_eps,
            cosine_decay: d.schedule == LrSchedule::Cosine,
            eval_every: d.eval_every,
            eval_batch: d.eval_batch,
            init_seed: 0,
        }
    }
}

impl TrainSpec {
    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            schedule: if self.cosine_decay {
                LrSchedule::Cosine
            } else {
                LrSchedule::Constant
            },
            seed,
            eval_every: self.eval_every,
            eval_batch: self.eval_batch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneSection {
    pub anchor: Vec<f64>,
    pub edited_anchor: Vec<f64>,
    pub times: Vec<f64>,
    pub steps: usize,
    #[serde(default)]
    pub trainable: TrainableSpec,
    pub learning_rate: f64,
    /// Component whose mean the edit aims at; reported distances refer to it.
    #[serde(default)]
    pub toward_component: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableSpec {
    #[default]
    LastLayer,
    All,
}

impl FinetuneSection {
    pub fn to_spec(&self) -> FinetuneSpec {
        FinetuneSpec {
            anchor: DVector::from_vec(self.anchor.clone()),
            edited_anchor: DVector::from_vec(self.edited_anchor.clone()),
            times: self.times.clone(),
            steps: self.steps,
            trainable: match self.trainable {
                TrainableSpec::LastLayer => TrainableSubset::LastLayer,
                TrainableSpec::All => TrainableSubset::All,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostOptSpec {
    /// Point the one-step prediction should reach.
    pub pixel_target: Vec<f64>,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Kernel length scale; the median heuristic when absent.
    #[serde(default)]
    pub kernel_scale: Option<f64>,
    /// Which phase's tail iterates serve as references.
    #[serde(default)]
    pub reference_phase: usize,
    #[serde(default)]
    pub init: PostOptInit,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_opt_tol")]
    pub tol: f64,
}

fn default_beta() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    500
}

fn default_opt_tol() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostOptInit {
    /// Average of the phase means.
    #[default]
    MeanOfMeans,
    /// The mean of the reference phase.
    Phase,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn check_point(name: &str, v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(bad(format!(
            "{name} has length {}, expected {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad(format!("{name} has non-finite entries")));
    }
    Ok(())
}

fn check_unit_open(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(bad(format!("{name} = {x} must lie in (0, 1)")))
    }
}

fn check_positive(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(bad(format!("{name} = {x} must be positive")))
    }
}

impl ExperimentConfig {
    pub fn default_config() -> Self {
        Self::from_json(DEFAULT_CONFIG_JSON).expect("committed default config is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut cfg: Self =
            serde_json::from_str(text).map_err(|e| bad(format!("invalid config: {e}")))?;
        cfg.validate()?;
        cfg.normalize_weights();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => bad(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn normalize_weights(&mut self) {
        let total: f64 = self.mixture.components.iter().map(|c| c.weight).sum();
        for c in &mut self.mixture.components {
            c.weight /= total;
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mixture.dim;
        if d == 0 {
            return Err(bad("mixture.dim must be positive"));
        }
        if self.mixture.components.is_empty() {
            return Err(bad("mixture needs at least one component"));
        }
        let mut total = 0.0;
        for (k, c) in self.mixture.components.iter().enumerate() {
            check_point(&format!("mixture.components[{k}].mean"), &c.mean, d)?;
            check_positive(&format!("mixture.components[{k}].sigma"), c.sigma)?;
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(bad(format!(
                    "mixture.components[{k}].weight = {} must lie in (0, 1]",
                    c.weight
                )));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(bad(format!("mixture weights sum to {total}, not 1")));
        }

        if self.schedule.steps == 0 {
            return Err(bad("schedule.steps must be positive"));
        }
        match (self.schedule.identity, self.schedule.shift) {
            (true, Some(_)) => {
                return Err(bad("schedule.shift must be absent when identity is true"))
            }
            (false, None) => return Err(bad("schedule.shift is required when identity is false")),
            (false, Some(s)) => check_positive("schedule.shift", s)?,
            (true, None) => {}
        }

        check_unit_open("gamma", self.gamma)?;
        if self.iterations == 0 {
            return Err(bad("iterations must be positive"));
        }
        if self.window < 2 {
            return Err(bad("window must be at least 2"));
        }
        check_positive("tolerance", self.tolerance)?;
        check_point("target", &self.target, d)?;
        if let Some(group) = &self.group_targets {
            if group.is_empty() {
                return Err(bad("group_targets must not be empty"));
            }
            for (i, y) in group.iter().enumerate() {
                check_point(&format!("group_targets[{i}]"), y, d)?;
            }
        }
        if self.sample.count == 0 {
            return Err(bad("sample.count must be positive"));
        }

        let v = &self.verify;
        if v.window < 2 {
            return Err(bad("verify.window must be at least 2"));
        }
        if v.iterations < 2 * v.window {
            return Err(bad(format!(
                "verify.iterations = {} is below twice verify.window = {}",
                v.iterations, v.window
            )));
        }
        if v.trials > 0 && v.anchors.is_empty() {
            return Err(bad("verify.anchors must not be empty"));
        }
        for (i, a) in v.anchors.iter().enumerate() {
            check_point(&format!("verify.anchors[{i}]"), a, d)?;
        }
        if !(v.jitter >= 0.0 && v.jitter.is_finite()) {
            return Err(bad("verify.jitter must be non-negative"));
        }

        let s = &self.sweep;
        check_unit_open("sweep.gamma_min", s.gamma_min)?;
        check_unit_open("sweep.gamma_max", s.gamma_max)?;
        if s.points == 0 || s.gamma_min > s.gamma_max {
            return Err(bad(
                "sweep needs at least one point and gamma_min <= gamma_max",
            ));
        }
        if s.window < 2 || s.iterations < 2 * s.window {
            return Err(bad(
                "sweep.iterations must be at least twice sweep.window (>= 2)",
            ));
        }
        if !(s.dead_band >= 0.0) {
            return Err(bad("sweep.dead_band must be non-negative"));
        }

        if let Some(t) = &self.train {
            self.train_config_for(t)
                .validate()
                .map_err(|e| bad(format!("train: {e}")))?;
            if t.learning_rate <= 0.0 {
                return Err(bad("train.learning_rate must be positive"));
            }
        }
        if let Some(f) = &self.finetune {
            f.to_spec()
                .validate(d)
                .map_err(|e| bad(format!("finetune: {e}")))?;
            check_positive("finetune.learning_rate", f.learning_rate)?;
            if let Some(k) = f.toward_component {
                if k >= self.mixture.components.len() {
                    return Err(bad(format!(
                        "finetune.toward_component = {k} is out of range"
                    )));
                }
            }
        }
        if let Some(p) = &self.postopt {
            check_point("postopt.pixel_target", &p.pixel_target, d)?;
            if !(p.beta >= 0.0 && p.beta.is_finite()) {
                return Err(bad("postopt.beta must be non-negative"));
            }
            if let Some(l) = p.kernel_scale {
                check_positive("postopt.kernel_scale", l)?;
            }
            check_positive("postopt.tol", p.tol)?;
        }
        if self.output_dir.is_empty() {
            return Err(bad("output_dir must not be empty"));
        }
        Ok(())
    }

    fn train_config_for(&self, t: &TrainSpec) -> TrainConfig {
        t.to_train_config(self.base_seed)
    }

    pub fn mixture(&self) -> Result<GaussianMixture> {
        let comps = self
            .mixture
            .components
            .iter()
            .map(|c| Component::new(c.weight, c.mean.clone(), c.sigma))
            .collect();
        GaussianMixture::normalized(comps)
    }

    pub fn schedule(&self) -> Result<TimeSchedule> {
        match self.schedule.shift {
            Some(s) if !self.schedule.identity => TimeSchedule::shifted(self.schedule.steps, s),
            _ => TimeSchedule::identity(self.schedule.steps),
        }
    }

    pub fn target_vec(&self) -> DVector<f64> {
        DVector::from_vec(self.target.clone())
    }

    /// Group targets, or the single target when none are configured.
    pub fn group_target_vecs(&self) -> Vec<DVector<f64>> {
        match &self.group_targets {
            Some(g) => g.iter().map(|y| DVector::from_vec(y.clone())).collect(),
            None => vec![self.target_vec()],
        }
    }

    pub fn train_spec(&self) -> TrainSpec {
        self.train.clone().unwrap_or_default()
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train_config_for(&self.train_spec())
    }

    /// SHA-256 of the canonical serialization, after overrides.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Output directory: an explicit override wins, then `OINV_OUT_DIR`
    /// joined with `output_dir`, then `output_dir` itself.
    pub fn resolve_output_dir(&self, flag: Option<&Path>, env_root: Option<&Path>) -> PathBuf {
        match (flag, env_root) {
            (Some(dir), _) => dir.to_path_buf(),
            (None, Some(root)) => root.join(&self.output_dir),
            (None, None) => PathBuf::from(&self.output_dir),
        }
    }
}
