//! Fully connected rectifier networks and an Adam trainer.
//!
//! Batches are stored column-per-sample (`dim x batch`), so a block of row-major
//! samples maps onto a column-major matrix without copying element by element.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One affine layer, `w` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Affine layers with ReLU between them and an identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

impl MlpModel {
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::InvalidArgument(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    k + 1,
                    pair[1].input_dim()
                )));
            }
        }
        for l in &layers {
            if l.b.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    got: l.b.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// All-zero parameters with the given `(input, hidden.., output)` sizes.
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least input and output sizes".into()));
        }
        Self::from_layers(
            dims.windows(2)
                .map(|d| Layer {
                    w: DMatrix::zeros(d[1], d[0]),
                    b: DVector::zeros(d[1]),
                })
                .collect(),
        )
    }

    /// Uniform initialization on `+-1/sqrt(fan_in)` for weights and biases.
    pub fn random(dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut rng = rng_from_seed(seed);
        for l in &mut model.layers {
            let bound = 1.0 / (l.input_dim() as f64).sqrt();
            for v in l.w.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
            for v in l.b.iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Layer::output_dim));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("nonempty").output_dim()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(x, 1)?.iter().copied().collect())
    }

    /// `rows` samples stored row-major in `x`; the result is `output_dim x rows`.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<DMatrix<f64>> {
        let input = self.input_dim();
        if x.len() != input * rows {
            return Err(Error::DimensionMismatch {
                expected: input * rows,
                got: x.len(),
            });
        }
        let mut a = DMatrix::from_column_slice(input, rows, x);
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut z = &l.w * &a;
            for mut col in z.column_iter_mut() {
                col += &l.b;
            }
            if k < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        Ok(a)
    }

    /// Applies `x -> (x - shift) / scale` to the inputs and `y -> y * out_scale + out_shift`
    /// to the outputs, folded into the first and last layers.
    fn fold_standardization(&mut self, input: &Standardizer, output: &Standardizer) {
        let first = &mut self.layers[0];
        for j in 0..first.w.ncols() {
            let s = input.scale[j];
            let mut col = first.w.column_mut(j);
            col /= s;
        }
        let shift = DVector::from_column_slice(&input.shift);
        first.b -= &first.w * shift;
        let last = self.layers.last_mut().expect("nonempty");
        for i in 0..last.w.nrows() {
            let s = output.scale[i];
            let mut row = last.w.row_mut(i);
            row *= s;
            last.b[i] = last.b[i] * s + output.shift[i];
        }
    }
}

/// Per-column affine standardization.
#[derive(Debug, Clone)]
struct Standardizer {
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(data: &[f64], dim: usize, rows: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut shift = vec![0.0; dim];
        for &r in rows {
            for j in 0..dim {
                shift[j] += data[r * dim + j];
            }
        }
        shift.iter_mut().for_each(|v| *v /= n);
        let mut var = vec![0.0; dim];
        for &r in rows {
            for j in 0..dim {
                let d = data[r * dim + j] - shift[j];
                var[j] += d * d;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { shift, scale }
    }

    fn identity(dim: usize) -> Self {
        Self {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    fn apply(&self, data: &[f64], dim: usize) -> Vec<f64> {
        data.chunks_exact(dim)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - self.shift[j]) / self.scale[j])
            })
            .collect()
    }
}

/// Gradient of the loss with respect to every layer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

/// Mean squared error over all outputs of a batch, `mean_{rows, outputs} (f(x) - y)^2`,
/// and its gradient by backpropagation.
pub fn mse_and_gradient(
    model: &MlpModel,
    x: &[f64],
    y: &[f64],
    rows: usize,
) -> Result<(f64, Vec<LayerGrad>)> {
    let input = model.input_dim();
    let output = model.output_dim();
    if x.len() != input * rows {
        return Err(Error::DimensionMismatch {
            expected: input * rows,
            got: x.len(),
        });
    }
    if y.len() != output * rows {
        return Err(Error::DimensionMismatch {
            expected: output * rows,
            got: y.len(),
        });
    }
    let last = model.layers.len() - 1;
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    acts.push(DMatrix::from_column_slice(input, rows, x));
    for (k, l) in model.layers.iter().enumerate() {
        let mut z = &l.w * acts.last().expect("nonempty");
        for mut col in z.column_iter_mut() {
            col += &l.b;
        }
        if k < last {
            z.apply(|v| *v = v.max(0.0));
        }
        acts.push(z);
    }
    let target = DMatrix::from_column_slice(output, rows, y);
    let diff = acts.pop().expect("output") - target;
    let count = (output * rows) as f64;
    let loss = diff.norm_squared() / count;
    let mut delta = diff * (2.0 / count);
    let mut grads = Vec::with_capacity(model.layers.len());
    for k in (0..model.layers.len()).rev() {
        let a_prev = acts.pop().expect("activation");
        let gw = &delta * a_prev.transpose();
        let gb = delta.column_sum();
        grads.push(LayerGrad { w: gw, b: gb });
        if k > 0 {
            let mut next = model.layers[k].w.transpose() * &delta;
            // a_prev holds ReLU outputs; their derivative is 1 where positive
            next.zip_apply(&a_prev, |d, a| {
                if a <= 0.0 {
                    *d = 0.0
                }
            });
            delta = next;
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Share of rows held out for the reported validation loss.
    pub validation_fraction: f64,
    /// Train on standardized inputs and targets; the scaling is folded into the
    /// returned model.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 500,
            epochs: 25,
            validation_fraction: 0.1,
            standardize: true,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Regression rows: `inputs` is `rows x input_dim`, `targets` is `rows x output_dim`,
/// both row-major.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Dataset<'_> {
    pub fn rows(&self) -> usize {
        self.inputs.len() / self.input_dim.max(1)
    }

    fn validate(&self) -> Result<()> {
        let rows = self.rows();
        if rows == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if self.inputs.len() != rows * self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: rows * self.input_dim,
                got: self.inputs.len(),
            });
        }
        if self.targets.len() != rows * self.output_dim {
            return Err(Error::DimensionMismatch {
                expected: rows * self.output_dim,
                got: self.targets.len(),
            });
        }
        if self.targets.iter().chain(self.inputs).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("training data contains non-finite values".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: MlpModel,
    /// MSE on the training rows, original target units.
    pub train_loss: f64,
    /// MSE on the held-out rows; equals `train_loss` when nothing is held out.
    pub validation_loss: f64,
}

/// Adam on shuffled mini-batches. `dims` lists every layer size including input and
/// output, which must agree with the dataset.
pub fn train(data: &Dataset, dims: &[usize], config: &TrainConfig, seed: u64) -> Result<TrainedModel> {
    data.validate()?;
    if dims.first() != Some(&data.input_dim) {
        return Err(Error::DimensionMismatch {
            expected: data.input_dim,
            got: dims.first().copied().unwrap_or(0),
        });
    }
    if dims.last() != Some(&data.output_dim) {
        return Err(Error::DimensionMismatch {
            expected: data.output_dim,
            got: dims.last().copied().unwrap_or(0),
        });
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidArgument("validation fraction must lie in [0, 1)".into()));
    }
    let (din, dout) = (data.input_dim, data.output_dim);
    let rows = data.rows();
    let mut rng = rng_from_seed(seed);
    let mut all: Vec<usize> = (0..rows).collect();
    all.shuffle(&mut rng);
    let n_val = ((rows as f64) * config.validation_fraction).floor() as usize;
    let n_val = n_val.min(rows - 1);
    let (val_rows, train_rows) = all.split_at(n_val);
    let mut train_rows = train_rows.to_vec();

    let (sx, sy) = if config.standardize {
        (
            Standardizer::fit(data.inputs, din, &train_rows),
            Standardizer::fit(data.targets, dout, &train_rows),
        )
    } else {
        (Standardizer::identity(din), Standardizer::identity(dout))
    };
    let xs = sx.apply(data.inputs, din);
    let ys = sy.apply(data.targets, dout);

    let mut model = MlpModel::random(dims, rng.random())?;
    let mut m1: Vec<LayerGrad> = model
        .layers
        .iter()
        .map(|l| LayerGrad {
            w: DMatrix::zeros(l.w.nrows(), l.w.ncols()),
            b: DVector::zeros(l.b.len()),
        })
        .collect();
    let mut m2 = m1.clone();
    let mut step = 0i32;
    let mut bx = Vec::with_capacity(config.batch_size * din);
    let mut by = Vec::with_capacity(config.batch_size * dout);
    for epoch in 0..config.epochs {
        train_rows.shuffle(&mut rng);
        for chunk in train_rows.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            for &r in chunk {
                bx.extend_from_slice(&xs[r * din..(r + 1) * din]);
                by.extend_from_slice(&ys[r * dout..(r + 1) * dout]);
            }
            let (loss, grads) = mse_and_gradient(&model, &bx, &by, chunk.len())?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(step);
            let c2 = 1.0 - ADAM_BETA2.powi(step);
            let lr = config.learning_rate;
            for ((layer, g), (a, b)) in model
                .layers
                .iter_mut()
                .zip(&grads)
                .zip(m1.iter_mut().zip(m2.iter_mut()))
            {
                adam_update(layer.w.as_mut_slice(), g.w.as_slice(), a.w.as_mut_slice(), b.w.as_mut_slice(), lr, c1, c2);
                adam_update(layer.b.as_mut_slice(), g.b.as_slice(), a.b.as_mut_slice(), b.b.as_mut_slice(), lr, c1, c2);
            }
        }
    }
    model.fold_standardization(&sx, &sy);
    let train_loss = mse_on(&model, data, &train_rows)?;
    let validation_loss = if val_rows.is_empty() {
        train_loss
    } else {
        mse_on(&model, data, val_rows)?
    };
    if !train_loss.is_finite() || !validation_loss.is_finite() {
        return Err(Error::TrainingDiverged { epoch: config.epochs });
    }
    Ok(TrainedModel {
        model,
        train_loss,
        validation_loss,
    })
}

fn adam_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, c1: f64, c2: f64) {
    for i in 0..p.len() {
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
    }
}

/// Mean squared error of `model` over the listed rows.
fn mse_on(model: &MlpModel, data: &Dataset, rows: &[usize]) -> Result<f64> {
    let (din, dout) = (data.input_dim, data.output_dim);
    let mut sum = 0.0;
    for chunk in rows.chunks(2048) {
        let x: Vec<f64> = chunk
            .iter()
            .flat_map(|&r| data.inputs[r * din..(r + 1) * din].iter().copied())
            .collect();
        let out = model.forward_batch(&x, chunk.len())?;
        for (c, &r) in chunk.iter().enumerate() {
            for j in 0..dout {
                let d = out[(j, c)] - data.targets[r * dout + j];
                sum += d * d;
            }
        }
    }
    Ok(sum / (rows.len() * dout) as f64)
}
