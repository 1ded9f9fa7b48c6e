use nalgebra::DVector;

use super::MlpField;
use crate::error::{Error, Result};
use crate::field::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainableSubset {
    #[default]
    LastLayer,
    All,
}

/// Edit the field so that `v(anchor, t)` matches the frozen field's
/// `v(edited_anchor, t)` at each listed time.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSpec {
    pub anchor: DVector<f64>,
    pub edited_anchor: DVector<f64>,
    pub times: Vec<f64>,
    pub steps: usize,
    pub trainable: TrainableSubset,
}

impl FinetuneSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        crate::error::check_dim(dim, self.anchor.len())?;
        crate::error::check_dim(dim, self.edited_anchor.len())?;
        if self.times.is_empty() {
            return Err(Error::domain("finetune needs at least one time"));
        }
        if let Some(t) = self.times.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::domain(format!("finetune time {t} is not in (0, 1)")));
        }
        if self.steps == 0 {
            return Err(Error::domain("finetune steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FinetuneLog {
    /// Loss before each step, then the final loss.
    pub losses: Vec<f64>,
}

impl FinetuneLog {
    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }
}

/// Plain gradient descent on `mean_t |v(anchor, t) - v_frozen(edited, t)|^2`.
pub fn finetune(field: &mut MlpField, spec: &FinetuneSpec, lr: f64) -> Result<FinetuneLog> {
    spec.validate(field.output_dim())?;
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::domain("finetune learning rate must be positive"));
    }
    let targets: Vec<Vec<f64>> = spec
        .times
        .iter()
        .map(|&t| field.eval(&spec.edited_anchor, t).iter().copied().collect())
        .collect();
    let inputs: Vec<Vec<f64>> = spec
        .times
        .iter()
        .map(|&t| field.input_of(&spec.anchor, t))
        .collect();
    let trainable = match spec.trainable {
        TrainableSubset::LastLayer => field.output_layer_range(),
        TrainableSubset::All => 0..field.params().len(),
    };
    let scale = 1.0 / spec.times.len() as f64;

    let mut log = FinetuneLog::default();
    let mut acts = Vec::new();
    let mut grads = vec![0.0; field.params().len()];
    for step in 0..=spec.steps {
        grads.fill(0.0);
        let mut loss = 0.0;
        for (input, target) in inputs.iter().zip(&targets) {
            field.forward_cached(input, &mut acts);
            let grad_out: Vec<f64> = acts
                .last()
                .unwrap()
                .iter()
                .zip(target)
                .map(|(o, y)| {
                    loss += (o - y).powi(2);
                    2.0 * (o - y) * scale
                })
                .collect();
            field.backward(&acts, &grad_out, &mut grads);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: "finetune loss".into(),
            });
        }
        log.losses.push(loss);
        if step == spec.steps || loss == 0.0 {
            break;
        }
        let range = trainable.clone();
        for (p, g) in field.params_mut()[range.clone()]
            .iter_mut()
            .zip(&grads[range])
        {
            *p -= lr * g;
        }
    }
    Ok(log)
}
