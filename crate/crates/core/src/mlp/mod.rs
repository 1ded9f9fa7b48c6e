//! A small tanh MLP velocity field with hand-written reverse mode.
//!
//! Parameters live in one flat vector, layer by layer, each layer's weights
//! (row-major, `out x in`) followed by its biases. The checkpoint format
//! and the optimizers all work on that vector directly.

mod checkpoint;
mod finetune;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use finetune::{finetune, FinetuneLog, FinetuneSpec, TrainableSubset};
pub use train::{
    batch_loss, batch_loss_and_grad, eval_batch, gradient_check, gradient_check_with_step,
    sample_batch, train, LrSchedule, Sample, TrainConfig, TrainLog,
};

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::rng::rng_from_seed;

pub const DEFAULT_HIDDEN: [usize; 3] = [64, 64, 64];

#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

impl MlpField {
    /// Random init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for weights and biases.
    pub fn new(sizes: Vec<usize>, seed: u64) -> Result<Self> {
        let mut field = Self::zeros(sizes)?;
        let mut rng = rng_from_seed(seed);
        for l in 0..field.layers() {
            let bound = 1.0 / (field.sizes[l] as f64).sqrt();
            let (w, b) = field.layer_ranges(l);
            for i in w.start..b.end {
                field.params[i] = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
        Ok(field)
    }

    /// `[d + 1, 64, 64, 64, d]`.
    pub fn with_default_arch(dim: usize, seed: u64) -> Result<Self> {
        let mut sizes = vec![dim + 1];
        sizes.extend(DEFAULT_HIDDEN);
        sizes.push(dim);
        Self::new(sizes, seed)
    }

    pub fn zeros(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::domain(
                "an MLP needs at least an input and output layer",
            ));
        }
        if sizes.contains(&0) {
            return Err(Error::domain("layer sizes must be positive"));
        }
        let out = *sizes.last().unwrap();
        if sizes[0] != out + 1 {
            return Err(Error::domain(format!(
                "input width {} must be output width {out} plus one (time)",
                sizes[0]
            )));
        }
        let n = param_count(&sizes);
        Ok(Self {
            sizes,
            params: vec![0.0; n],
        })
    }

    pub(crate) fn from_parts(sizes: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        let mut f = Self::zeros(sizes)?;
        if params.len() != f.params.len() {
            return Err(Error::domain("parameter count does not match layer sizes"));
        }
        f.params = params;
        Ok(f)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Weight and bias index ranges of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (Range<usize>, Range<usize>) {
        let start: usize = (0..l)
            .map(|i| self.sizes[i] * self.sizes[i + 1] + self.sizes[i + 1])
            .sum();
        let w_end = start + self.sizes[l] * self.sizes[l + 1];
        (start..w_end, w_end..w_end + self.sizes[l + 1])
    }

    pub fn output_layer_range(&self) -> Range<usize> {
        let (w, b) = self.layer_ranges(self.layers() - 1);
        w.start..b.end
    }

    pub fn zero_output_layer(&mut self) {
        let r = self.output_layer_range();
        self.params[r].fill(0.0);
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Forward pass on the raw input `[x; t]`.
    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward_cached(input, &mut acts);
        acts.pop().unwrap()
    }

    /// Fills `acts` with the input and every layer's post-activation output.
    fn forward_cached(&self, input: &[f64], acts: &mut Vec<Vec<f64>>) {
        assert_eq!(input.len(), self.sizes[0], "MLP input width");
        acts.clear();
        acts.push(input.to_vec());
        let last = self.layers() - 1;
        for l in 0..self.layers() {
            let (wr, br) = self.layer_ranges(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.params[wr];
            let b = &self.params[br];
            let a = &acts[l];
            let mut out = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let mut s = b[o];
                for (wi, ai) in row.iter().zip(a) {
                    s += wi * ai;
                }
                out.push(if l == last { s } else { s.tanh() });
            }
            acts.push(out);
        }
    }

    /// Adds `d loss / d params` to `grads` given `d loss / d output`.
    /// `acts` must come from [`Self::forward_cached`] on the same input.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grads: &mut [f64]) {
        let last = self.layers() - 1;
        let mut delta = grad_out.to_vec();
        for l in (0..self.layers()).rev() {
            if l != last {
                // tanh' = 1 - a^2
                for (d, a) in delta.iter_mut().zip(&acts[l + 1]) {
                    *d *= 1.0 - a * a;
                }
            }
            let (wr, br) = self.layer_ranges(l);
            let n_in = self.sizes[l];
            let a_in = &acts[l];
            for (o, d) in delta.iter().enumerate() {
                grads[br.start + o] += d;
                let row = &mut grads[wr.start + o * n_in..wr.start + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(a_in) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &self.params[wr];
                let mut prev = vec![0.0; n_in];
                for (o, d) in delta.iter().enumerate() {
                    for (p, wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wi;
                    }
                }
                delta = prev;
            }
        }
    }

    fn input_of(&self, x: &DVector<f64>, t: f64) -> Vec<f64> {
        let mut input = Vec::with_capacity(x.len() + 1);
        input.extend(x.iter());
        input.push(t);
        input
    }
}

pub(crate) fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl VelocityField for MlpField {
    fn dim(&self) -> usize {
        self.output_dim()
    }

    fn eval(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        DVector::from_vec(self.forward(&self.input_of(x, t)))
    }

    /// Chain rule through the layers, keeping only the `x` columns of the input.
    fn jacobian(&self, x: &DVector<f64>, t: f64) -> Option<DMatrix<f64>> {
        let mut acts = Vec::new();
        self.forward_cached(&self.input_of(x, t), &mut acts);
        let d = x.len();
        let last = self.layers() - 1;
        // rows: current layer units, cols: x coordinates
        let mut jac = DMatrix::<f64>::zeros(0, d);
        for l in 0..self.layers() {
            let (wr, _) = self.layer_ranges(l);
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = DMatrix::from_row_slice(n_out, n_in, &self.params[wr]);
            let mut next = if l == 0 {
                w.columns(0, d).into_owned()
            } else {
                w * &jac
            };
            if l != last {
                for (r, a) in acts[l + 1].iter().enumerate() {
                    next.row_mut(r).scale_mut(1.0 - a * a);
                }
            }
            jac = next;
        }
        Some(jac)
    }
}
