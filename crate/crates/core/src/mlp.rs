//! One-hidden-layer perceptron with saturating linear units, trained on the
//! mean squared error by scaled conjugate gradient.

use std::io::Write;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Saturating linear transfer `min(max(z, 0), 1)`.
pub fn satlin(z: f64) -> f64 {
    z.clamp(0.0, 1.0)
}

/// Sub-derivative of [`satlin`]: 1 strictly inside (0, 1), 0 elsewhere.
pub fn satlin_derivative(z: f64) -> f64 {
    if z > 0.0 && z < 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Weight matrices carry the bias in column 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    hidden: Array2<f64>,
    output: Array2<f64>,
}

pub fn weight_count(d: usize, h: usize, k: usize) -> usize {
    h * (d + 1) + k * (h + 1)
}

/// Uniform initialization in `[-1/√fan_in, 1/√fan_in]` per layer.
pub fn init_mlp(d: usize, h: usize, k: usize, seed: u64) -> Result<MlpModel> {
    if d == 0 || h == 0 || k == 0 {
        return Err(Error::InvalidParameter(format!("layer sizes must be positive, got {d}-{h}-{k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = |rows: usize, fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Array2::from_shape_simple_fn((rows, fan_in + 1), || rng.random_range(-bound..=bound))
    };
    let hidden = layer(h, d);
    let output = layer(k, h);
    MlpModel::new(hidden, output)
}

impl MlpModel {
    pub fn new(hidden: Array2<f64>, output: Array2<f64>) -> Result<Self> {
        if hidden.nrows() == 0 || hidden.ncols() < 2 || output.nrows() == 0 {
            return Err(Error::InvalidParameter("empty layer".into()));
        }
        if output.ncols() != hidden.nrows() + 1 {
            return Err(Error::DimensionMismatch(format!(
                "output layer expects {} inputs, hidden layer has {} units",
                output.ncols() - 1,
                hidden.nrows()
            )));
        }
        if hidden.iter().chain(output.iter()).any(|w| !w.is_finite()) {
            return Err(Error::InvalidParameter("non-finite weight".into()));
        }
        Ok(Self { hidden, output })
    }

    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn inputs(&self) -> usize {
        self.hidden.ncols() - 1
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.output.nrows()
    }

    /// `MLP-d-h-k`.
    pub fn architecture(&self) -> String {
        format!("MLP-{}-{}-{}", self.inputs(), self.hidden_units(), self.outputs())
    }

    pub fn weight_count(&self) -> usize {
        self.hidden.len() + self.output.len()
    }

    /// Hidden weights then output weights, each row by row.
    pub fn parameters(&self) -> Vec<f64> {
        self.hidden.iter().chain(self.output.iter()).copied().collect()
    }

    pub fn set_parameters(&mut self, w: &[f64]) {
        assert_eq!(w.len(), self.weight_count(), "parameter vector length");
        let (a, b) = w.split_at(self.hidden.len());
        self.hidden.iter_mut().zip(a).for_each(|(d, s)| *d = *s);
        self.output.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
    }

    fn with_parameters(&self, w: &[f64]) -> Self {
        let mut m = self.clone();
        m.set_parameters(w);
        m
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.inputs(), "input dimension");
        let hidden: Vec<f64> = self
            .hidden
            .rows()
            .into_iter()
            .map(|w| satlin(w[0] + w.iter().skip(1).zip(x).map(|(a, b)| a * b).sum::<f64>()))
            .collect();
        self.output
            .rows()
            .into_iter()
            .map(|w| satlin(w[0] + w.iter().skip(1).zip(&hidden).map(|(a, b)| a * b).sum::<f64>()))
            .collect()
    }

    /// Net inputs and activations of both layers for the columns of `x`.
    fn propagate(&self, x: ArrayView2<'_, f64>) -> Activations {
        let z1 = affine(&self.hidden, x);
        let y1 = z1.mapv(satlin);
        let z2 = affine(&self.output, y1.view());
        let y2 = z2.mapv(satlin);
        Activations { z1, y1, z2, y2 }
    }

    /// k×n outputs for the d×n input matrix.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.inputs(), "input dimension");
        self.propagate(x).y2
    }

    /// Argmax of the outputs per column, smallest index on ties.
    pub fn predict(&self, x: ArrayView2<'_, f64>) -> Vec<usize> {
        self.forward_batch(x).columns().into_iter().map(|c| argmax(c.iter().copied())).collect()
    }

    /// Loss `Σ‖y − t‖² / (n·k)` and its gradient, ordered as [`Self::parameters`].
    pub fn mse_and_gradient(&self, x: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> (f64, Vec<f64>) {
        let n = x.ncols();
        let k = self.outputs();
        let Activations { z1, y1, z2, y2 } = self.propagate(x);
        let diff = &y2 - &t;
        let scale = 1.0 / (n * k) as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;

        let mut d2 = diff * (2.0 * scale);
        Zip::from(&mut d2).and(&z2).for_each(|d, &z| *d *= satlin_derivative(z));
        let g2 = outer_with_bias(&d2, y1.view());

        let mut d1 = self.output.slice(s![.., 1..]).t().dot(&d2);
        Zip::from(&mut d1).and(&z1).for_each(|d, &z| *d *= satlin_derivative(z));
        let g1 = outer_with_bias(&d1, x);

        (loss, g1.iter().chain(g2.iter()).copied().collect())
    }

    pub fn mse(&self, x: ArrayView2<'_, f64>, t: ArrayView2<'_, f64>) -> f64 {
        let y = self.forward_batch(x);
        let n = (y.len()) as f64;
        y.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
    }
}

struct Activations {
    z1: Array2<f64>,
    y1: Array2<f64>,
    z2: Array2<f64>,
    y2: Array2<f64>,
}

/// `W[:, 1..] · x + W[:, 0]` for every column of `x`.
fn affine(w: &Array2<f64>, x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut z = w.slice(s![.., 1..]).dot(&x);
    let bias = w.column(0);
    for mut col in z.columns_mut() {
        col += &bias;
    }
    z
}

/// `delta · [1; input]ᵀ`.
fn outer_with_bias(delta: &Array2<f64>, input: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut g = Array2::zeros((delta.nrows(), input.nrows() + 1));
    g.column_mut(0).assign(&delta.sum_axis(Axis(1)));
    g.slice_mut(s![.., 1..]).assign(&delta.dot(&input.t()));
    g
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// k×n one-hot targets.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut t = Array2::zeros((classes, labels.len()));
    for (i, &l) in labels.iter().enumerate() {
        t[[l, i]] = 1.0;
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Training stops once an epoch changes the loss by less than this.
    pub tolerance: f64,
    /// Initial trust-region scale λ.
    pub lambda: f64,
    /// Finite-difference step σ for curvature estimates.
    pub sigma: f64,
    /// Consecutive rejected steps before giving up.
    pub max_rejections: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            tolerance: 1e-6,
            lambda: 1e-6,
            sigma: 1e-4,
            max_rejections: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || !(self.lambda > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance {}, lambda {} and sigma {} must be positive",
                self.tolerance, self.lambda, self.sigma
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxEpochs,
    Tolerance,
    ZeroGradient,
    Stalled,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: MlpModel,
    /// Loss before training followed by the loss after every epoch.
    pub losses: Vec<f64>,
    pub stop: StopReason,
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(w: &[f64], alpha: f64, p: &[f64]) -> Vec<f64> {
    w.iter().zip(p).map(|(a, b)| a + alpha * b).collect()
}

/// Møller's scaled conjugate gradient. An epoch is one accepted step; a step
/// is accepted only if it does not increase the loss.
pub fn scg_train(
    model: &MlpModel,
    x: ArrayView2<'_, f64>,
    t: ArrayView2<'_, f64>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    if x.nrows() != model.inputs() || t.nrows() != model.outputs() || x.ncols() != t.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} expects {}×n inputs and {}×n targets, got {:?} and {:?}",
            model.architecture(),
            model.inputs(),
            model.outputs(),
            x.dim(),
            t.dim()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let eval = |w: &[f64], epoch: usize| -> Result<(f64, Vec<f64>)> {
        let (e, g) = model.with_parameters(w).mse_and_gradient(x, t);
        if !e.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                epoch,
                detail: format!("loss {e}"),
            });
        }
        Ok((e, g))
    };

    let nw = model.weight_count();
    let mut w = model.parameters();
    let (mut loss, g) = eval(&w, 0)?;
    let mut r: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut p = r.clone();
    let mut losses = vec![loss];
    let mut lambda = config.lambda;
    let mut lambda_bar = 0.0;
    let mut success = true;
    let mut delta = 0.0;
    let mut rejections = 0;
    let mut steps = 0usize;

    let stop = loop {
        let epoch = losses.len();
        if epoch > config.max_epochs {
            break StopReason::MaxEpochs;
        }
        let p2 = dotv(&p, &p);
        if p2 == 0.0 || dotv(&r, &r) == 0.0 {
            break StopReason::ZeroGradient;
        }
        if success {
            let sig = config.sigma / p2.sqrt();
            let (_, g_shift) = eval(&axpy(&w, sig, &p), epoch)?;
            let s: Vec<f64> = g_shift.iter().zip(&r).map(|(a, b)| (a + b) / sig).collect();
            delta = dotv(&p, &s);
        }
        delta += (lambda - lambda_bar) * p2;
        if delta <= 0.0 {
            lambda_bar = 2.0 * (lambda - delta / p2);
            delta = -delta + lambda * p2;
            lambda = lambda_bar;
        }
        let mu = dotv(&p, &r);
        let alpha = mu / delta;
        let w_new = axpy(&w, alpha, &p);
        let (loss_new, g_new) = eval(&w_new, epoch)?;
        let comparison = 2.0 * delta * (loss - loss_new) / (mu * mu);

        if comparison >= 0.0 && loss_new <= loss {
            w = w_new;
            let r_new: Vec<f64> = g_new.iter().map(|v| -v).collect();
            lambda_bar = 0.0;
            success = true;
            rejections = 0;
            steps += 1;
            if steps % nw == 0 {
                p = r_new.clone();
            } else {
                let beta = (dotv(&r_new, &r_new) - dotv(&r_new, &r)) / mu;
                p = r_new.iter().zip(&p).map(|(a, b)| a + beta * b).collect();
            }
            r = r_new;
            if comparison >= 0.75 {
                lambda *= 0.25;
            }
            let change = loss - loss_new;
            loss = loss_new;
            losses.push(loss);
            log::debug!("epoch {epoch}: mse {loss:.6e}");
            if change.abs() < config.tolerance {
                break StopReason::Tolerance;
            }
        } else {
            lambda_bar = lambda;
            success = false;
            rejections += 1;
            if rejections > config.max_rejections {
                break StopReason::Stalled;
            }
        }
        if comparison < 0.25 {
            lambda += delta * (1.0 - comparison) / p2;
        }
        if !lambda.is_finite() {
            break StopReason::Stalled;
        }
    };

    Ok(TrainOutput {
        model: model.with_parameters(&w),
        losses,
        stop,
    })
}

/// `epoch,mse` rows, epoch 0 being the untrained model.
pub fn write_loss_csv<W: Write>(writer: W, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "mse"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}
