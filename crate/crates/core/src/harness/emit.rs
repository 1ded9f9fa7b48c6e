//! CSV and JSON writers. Floats use the shortest representation that
//! parses back to the same bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use super::report::SummaryReport;
use crate::error::{Error, Result};
use crate::inversion::{InversionTrajectory, SweepRow};
use crate::mlp::{FinetuneLog, TrainLog};
use crate::postopt::OptResult;

pub fn fmt_float(x: f64) -> String {
    match serde_json::Number::from_f64(x) {
        Some(n) => n.to_string(),
        None => format!("{x}"),
    }
}

fn push_vec(line: &mut String, v: &DVector<f64>) {
    for x in v.iter() {
        line.push(',');
        line.push_str(&fmt_float(*x));
    }
}

/// `iter, z_0.., step_distance, pred_0..`; `step_distance` is blank on row 0.
pub fn trajectory_csv(traj: &InversionTrajectory, dim: usize) -> String {
    let mut out = String::from("iter");
    for i in 0..dim {
        write!(out, ",z_{i}").unwrap();
    }
    out.push_str(",step_distance");
    for i in 0..dim {
        write!(out, ",pred_{i}").unwrap();
    }
    out.push('\n');
    for (k, (z, pred)) in traj.iterates.iter().zip(&traj.one_step_preds).enumerate() {
        let mut line = k.to_string();
        push_vec(&mut line, z);
        line.push(',');
        if k > 0 {
            line.push_str(&fmt_float(traj.step_distances[k - 1]));
        }
        push_vec(&mut line, pred);
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// `iter, step_distance, distance_to_start`.
pub fn distance_csv(traj: &InversionTrajectory) -> String {
    let mut out = String::from("iter,step_distance,distance_to_start\n");
    for (k, d0) in traj.distances_to_start().iter().enumerate() {
        let step = if k > 0 {
            fmt_float(traj.step_distances[k - 1])
        } else {
            String::new()
        };
        writeln!(out, "{k},{step},{}", fmt_float(*d0)).unwrap();
    }
    out
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,period,spectral_norm,root_residual,converged,error\n");
    for r in rows {
        let err = r
            .error
            .as_deref()
            .map(|e| format!("\"{}\"", e.replace('"', "\"\"")))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_float(r.gamma),
            r.period.map(|p| p.to_string()).unwrap_or_default(),
            opt_cell(r.spectral_norm),
            opt_cell(r.root_residual),
            r.converged,
            err
        )
        .unwrap();
    }
    out
}

/// `step, loss` per minibatch.
pub fn train_log_csv(log: &TrainLog) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        writeln!(out, "{i},{}", fmt_float(*l)).unwrap();
    }
    out
}

/// `step, loss` on the fixed evaluation batch.
pub fn eval_log_csv(log: &TrainLog) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in &log.eval {
        writeln!(out, "{i},{}", fmt_float(*l)).unwrap();
    }
    out
}

pub fn finetune_log_csv(log: &FinetuneLog) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in log.losses.iter().enumerate() {
        writeln!(out, "{i},{}", fmt_float(*l)).unwrap();
    }
    out
}

/// `iter, objective, grad_norm`.
pub fn opt_trace_csv(r: &OptResult) -> String {
    let mut out = String::from("iter,objective,grad_norm\n");
    for (i, (f, g)) in r.trace.iter().zip(&r.grad_norms).enumerate() {
        writeln!(out, "{i},{},{}", fmt_float(*f), fmt_float(*g)).unwrap();
    }
    out
}

/// `index, x_0.., nearest_component`.
pub fn samples_csv(samples: &[(DVector<f64>, usize)], dim: usize) -> String {
    let mut out = String::from("index");
    for i in 0..dim {
        write!(out, ",x_{i}").unwrap();
    }
    out.push_str(",nearest_component\n");
    for (n, (x, k)) in samples.iter().enumerate() {
        let mut line = n.to_string();
        push_vec(&mut line, x);
        writeln!(out, "{line},{k}").unwrap();
    }
    out
}

pub fn write_file(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn write_summary(dir: &Path, report: &SummaryReport) -> Result<PathBuf> {
    write_file(dir, "summary.json", report.to_json())
}
