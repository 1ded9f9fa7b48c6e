//! The summary document written as `summary.json`.
//!
//! Every numeric slot is either a finite number or `null` with an entry in
//! `null_reasons` explaining why. Keys serialize in a fixed order (struct
//! order, maps sorted).

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::inversion::{
    AveragingOutcome, AveragingRecord, ClusterReport, JacobianReport, RootResult,
};
use crate::postopt::OptResult;

pub const TOOL_NAME: &str = "oinv";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostOptSummary {
    pub z_opt: Vec<f64>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_pixel_loss: f64,
    pub final_pixel_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub beta: f64,
    pub kernel_scale: f64,
}

/// One run inside a summary (an inversion, a trial, a training job, ...).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub period: Option<usize>,
    pub phase_means: Option<Vec<Vec<f64>>>,
    pub phase_spreads: Option<Vec<f64>>,
    pub mean_of_means: Option<Vec<f64>>,
    pub z_star: Option<Vec<f64>>,
    pub root_residual: Option<f64>,
    pub root_method: Option<String>,
    pub spectral_norm: Option<f64>,
    pub averaging_error: Option<f64>,
    pub relative_averaging_error: Option<f64>,
    pub post_opt: Option<PostOptSummary>,
    /// Command-specific scalars and vectors.
    pub metrics: BTreeMap<String, Value>,
    pub null_reasons: BTreeMap<String, String>,
}

impl RunRecord {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }

    /// Records why `key` is null. The first reason given wins.
    pub fn explain(&mut self, key: &str, reason: impl Into<String>) {
        self.null_reasons
            .entry(key.to_string())
            .or_insert_with(|| reason.into());
    }

    pub fn set_cluster(&mut self, c: &ClusterReport) {
        self.period = Some(c.period);
        if c.period == 0 {
            self.explain("phase_means", "no period detected");
            self.explain("phase_spreads", "no period detected");
        } else {
            self.phase_means = Some(c.phase_means.iter().map(vec_of).collect());
            self.phase_spreads = Some(c.phase_spreads.clone());
        }
        self.mean_of_means = Some(vec_of(&c.mean_of_means));
    }

    pub fn set_root(&mut self, r: &RootResult) {
        self.z_star = Some(vec_of(&r.z_star));
        self.root_residual = Some(r.residual);
        self.root_method = Some(r.method.as_str().to_string());
        self.metric("root_converged", r.converged);
        self.metric("root_iterations", r.iterations);
    }

    pub fn set_jacobian(&mut self, j: &JacobianReport) {
        self.spectral_norm = Some(j.spectral_norm);
        self.metric("top_singular_vector", vec_of(&j.top_singular_vector));
    }

    pub fn set_averaging(&mut self, rec: &AveragingRecord) {
        self.set_cluster(&rec.cluster);
        match &rec.outcome {
            AveragingOutcome::Inapplicable { period } => {
                let why = format!("inapplicable: detected period {period}, not 2");
                self.explain("z_star", &why);
                self.explain("root_residual", &why);
                self.explain("root_method", &why);
                self.explain("averaging_error", &why);
                self.explain("relative_averaging_error", &why);
                self.metric("compact", false);
            }
            AveragingOutcome::Checked {
                root,
                averaging_error,
                relative_error,
                compact,
            } => {
                self.set_root(root);
                self.averaging_error = Some(*averaging_error);
                self.relative_averaging_error = Some(*relative_error);
                self.metric("compact", *compact);
            }
        }
    }

    pub fn set_post_opt(
        &mut self,
        r: &OptResult,
        initial_pixel_loss: f64,
        final_pixel_loss: f64,
        beta: f64,
        kernel_scale: f64,
    ) {
        self.post_opt = Some(PostOptSummary {
            z_opt: vec_of(&r.z_opt),
            initial_objective: r.trace[0],
            final_objective: r.final_objective(),
            initial_pixel_loss,
            final_pixel_loss,
            iterations: r.iterations,
            converged: r.converged,
            beta,
            kernel_scale,
        });
    }

    /// Adds a metric; non-finite floats become `null` with a reason.
    pub fn metric(&mut self, key: &str, value: impl Into<Value>) {
        let value = value.into();
        if value.is_null() {
            self.explain(key, "non-finite value");
        }
        self.metrics.insert(key.to_string(), value);
    }

    pub fn float_metric(&mut self, key: &str, value: f64) {
        if value.is_finite() {
            self.metrics.insert(key.to_string(), Value::from(value));
        } else {
            self.metrics.insert(key.to_string(), Value::Null);
            self.explain(key, format!("non-finite value ({value})"));
        }
    }

    pub fn null_metric(&mut self, key: &str, reason: impl Into<String>) {
        self.metrics.insert(key.to_string(), Value::Null);
        self.explain(key, reason);
    }

    /// Nulls non-finite values and gives every remaining null a reason.
    pub fn finalize(&mut self, default_reason: &str) {
        let scrub = |slot: &mut Option<f64>| {
            if slot.is_some_and(|v| !v.is_finite()) {
                *slot = None;
                true
            } else {
                false
            }
        };
        for (key, slot) in [
            ("root_residual", &mut self.root_residual),
            ("spectral_norm", &mut self.spectral_norm),
            ("averaging_error", &mut self.averaging_error),
            (
                "relative_averaging_error",
                &mut self.relative_averaging_error,
            ),
        ] {
            if scrub(slot) {
                self.null_reasons
                    .insert(key.to_string(), "non-finite value".to_string());
            }
        }
        let vec_bad =
            |v: &Option<Vec<f64>>| v.as_ref().is_some_and(|v| v.iter().any(|x| !x.is_finite()));
        for (key, slot) in [
            ("mean_of_means", &mut self.mean_of_means),
            ("z_star", &mut self.z_star),
            ("phase_spreads", &mut self.phase_spreads),
        ] {
            if vec_bad(slot) {
                *slot = None;
                self.null_reasons
                    .insert(key.to_string(), "non-finite value".to_string());
            }
        }
        let missing: Vec<&str> = [
            ("period", self.period.is_none()),
            ("phase_means", self.phase_means.is_none()),
            ("phase_spreads", self.phase_spreads.is_none()),
            ("mean_of_means", self.mean_of_means.is_none()),
            ("z_star", self.z_star.is_none()),
            ("root_residual", self.root_residual.is_none()),
            ("root_method", self.root_method.is_none()),
            ("spectral_norm", self.spectral_norm.is_none()),
            ("averaging_error", self.averaging_error.is_none()),
            (
                "relative_averaging_error",
                self.relative_averaging_error.is_none(),
            ),
            ("post_opt", self.post_opt.is_none()),
        ]
        .into_iter()
        .filter_map(|(k, none)| none.then_some(k))
        .collect();
        for key in missing {
            self.explain(key, default_reason);
        }
        for (key, value) in &self.metrics {
            if value.is_null() && !self.null_reasons.contains_key(key) {
                self.null_reasons
                    .insert(key.clone(), default_reason.to_string());
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub wall_clock_seconds: Option<f64>,
    pub records: Vec<RunRecord>,
    pub null_reasons: BTreeMap<String, String>,
}

impl SummaryReport {
    pub fn new(command: &str, config_hash: String, base_seed: u64) -> Self {
        let mut null_reasons = BTreeMap::new();
        null_reasons.insert(
            "wall_clock_seconds".to_string(),
            "timing disabled; pass --timing to record it (it breaks byte-identical replays)"
                .to_string(),
        );
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config_hash,
            base_seed,
            wall_clock_seconds: None,
            records: Vec::new(),
            null_reasons,
        }
    }

    pub fn set_wall_clock(&mut self, seconds: f64) {
        self.wall_clock_seconds = Some(seconds);
        self.null_reasons.remove("wall_clock_seconds");
    }

    pub fn push(&mut self, mut record: RunRecord) {
        record.finalize(&format!("not computed by `{}`", self.command));
        self.records.push(record);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}
