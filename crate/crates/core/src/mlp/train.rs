use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use super::MlpField;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::mixture::GaussianMixture;
use crate::rng::{rng_from_seed, trial_rng, Rng};

/// Minibatch size handled by one task when gradients run in parallel.
const GRAD_CHUNK: usize = 32;
const DIVERGENCE_LOSS: f64 = 1e6;
/// Stream index reserved for the fixed evaluation batch.
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Steps between evaluations on the fixed batch (0 disables).
    pub eval_every: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: LrSchedule::Cosine,
            seed: 0,
            eval_every: 1000,
            eval_batch: 4096,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::domain("steps and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(
                "learning rate must be finite and non-negative",
            ));
        }
        if !beta_ok(self.adam_beta1) || !beta_ok(self.adam_beta2) {
            return Err(Error::domain("Adam betas must lie in (0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::domain("Adam epsilon must be positive"));
        }
        Ok(())
    }

    fn rate_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = step as f64 / self.steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// One regression example: input `[x_t; t]`, target `x_noise - x_data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Draws a minibatch of the rectified-flow regression problem.
pub fn sample_batch(mix: &GaussianMixture, n: usize, rng: &mut Rng) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let (data, noise) = mix.sample_pair_with(rng);
            let t: f64 = rng.random();
            let mut input: Vec<f64> = data
                .iter()
                .zip(noise.iter())
                .map(|(d, z)| t * z + (1.0 - t) * d)
                .collect();
            input.push(t);
            let target = noise.iter().zip(data.iter()).map(|(z, d)| z - d).collect();
            Sample { input, target }
        })
        .collect()
}

/// Mean over the batch of `|v(x_t, t) - target|^2`.
pub fn batch_loss(field: &MlpField, batch: &[Sample]) -> f64 {
    let total: f64 = batch
        .iter()
        .map(|s| {
            let out = field.forward(&s.input);
            out.iter()
                .zip(&s.target)
                .map(|(o, y)| (o - y).powi(2))
                .sum::<f64>()
        })
        .sum();
    total / batch.len() as f64
}

/// Batch loss and its parameter gradient by backpropagation.
///
/// Chunks are reduced in a fixed order, so the result is independent of
/// the execution policy.
pub fn batch_loss_and_grad(field: &MlpField, batch: &[Sample], exec: Exec) -> (f64, Vec<f64>) {
    let n = field.params().len();
    let parts = exec.map_chunks(batch, GRAD_CHUNK, |chunk| {
        let mut grads = vec![0.0; n];
        let mut loss = 0.0;
        let mut acts = Vec::new();
        let mut grad_out = Vec::new();
        for s in chunk {
            field.forward_cached(&s.input, &mut acts);
            let out = acts.last().unwrap();
            grad_out.clear();
            for (o, y) in out.iter().zip(&s.target) {
                loss += (o - y).powi(2);
                grad_out.push(2.0 * (o - y));
            }
            field.backward(&acts, &grad_out, &mut grads);
        }
        (loss, grads)
    });
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grads = vec![0.0; n];
    for (l, g) in parts {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    grads.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grads)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    /// Minibatch loss before each update, indexed by step.
    pub losses: Vec<f64>,
    /// `(step, loss)` on the fixed evaluation batch; the last entry is the
    /// final model.
    pub eval: Vec<(usize, f64)>,
}

impl TrainLog {
    pub fn final_eval_loss(&self) -> Option<f64> {
        self.eval.last().map(|e| e.1)
    }
}

/// The fixed evaluation batch for a training seed.
pub fn eval_batch(mix: &GaussianMixture, cfg: &TrainConfig) -> Vec<Sample> {
    sample_batch(mix, cfg.eval_batch, &mut trial_rng(cfg.seed, EVAL_STREAM))
}

/// Adam on the rectified-flow regression loss with `t ~ U(0, 1)`.
pub fn train(
    field: &mut MlpField,
    mix: &GaussianMixture,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<TrainLog> {
    cfg.validate()?;
    if field.output_dim() != mix.dim() {
        return Err(Error::Dimension {
            expected: mix.dim(),
            got: field.output_dim(),
        });
    }
    let eval = if cfg.eval_every > 0 && cfg.eval_batch > 0 {
        eval_batch(mix, cfg)
    } else {
        Vec::new()
    };
    let mut rng = rng_from_seed(cfg.seed);
    let n = field.params().len();
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut log = TrainLog::default();

    for step in 0..cfg.steps {
        if !eval.is_empty() && step % cfg.eval_every == 0 {
            log.eval.push((step, batch_loss(field, &eval)));
        }
        let batch = sample_batch(mix, cfg.batch_size, &mut rng);
        let (loss, grads) = batch_loss_and_grad(field, &batch, exec);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Diverged {
                step,
                loss,
                log: Box::new(log),
            });
        }
        log.losses.push(loss);

        let lr = cfg.rate_at(step);
        let k = (step + 1) as i32;
        let c1 = 1.0 - cfg.adam_beta1.powi(k);
        let c2 = 1.0 - cfg.adam_beta2.powi(k);
        for (((p, g), mi), vi) in field
            .params_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut m)
            .zip(&mut v)
        {
            *mi = cfg.adam_beta1 * *mi + (1.0 - cfg.adam_beta1) * g;
            *vi = cfg.adam_beta2 * *vi + (1.0 - cfg.adam_beta2) * g * g;
            *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + cfg.adam_eps);
        }
        if step > 0 && step % 1000 == 0 {
            log::debug!("train step {step}: loss {loss:.5}");
        }
    }
    if !eval.is_empty() {
        log.eval.push((cfg.steps, batch_loss(field, &eval)));
    }
    Ok(log)
}

/// Worst relative disagreement between backprop and central differences
/// (`h = 1e-5`) on `probes` randomly chosen parameters.
pub fn gradient_check(field: &MlpField, batch: &[Sample], probes: usize, seed: u64) -> f64 {
    gradient_check_with_step(field, batch, probes, seed, 1e-5)
}

pub fn gradient_check_with_step(
    field: &MlpField,
    batch: &[Sample],
    probes: usize,
    seed: u64,
    h: f64,
) -> f64 {
    let (_, grads) = batch_loss_and_grad(field, batch, Exec::Sequential);
    let n = grads.len();
    let mut rng = rng_from_seed(seed);
    let picks = sample_indices(&mut rng, n, probes.min(n));
    let mut probe = field.clone();
    let mut worst: f64 = 0.0;
    for i in picks.iter() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = batch_loss(&probe, batch);
        probe.params_mut()[i] = orig - h;
        let down = batch_loss(&probe, batch);
        probe.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let exact = grads[i];
        let denom = exact.abs().max(numeric.abs());
        let rel = if denom == 0.0 {
            0.0
        } else {
            (exact - numeric).abs() / denom.max(1e-8)
        };
        worst = worst.max(rel);
    }
    worst
}
