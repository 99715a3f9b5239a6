use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FeatureScaler;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::models::Generator;

/// Rows per block when accumulating the loss gradient.
const LOSS_BLOCK: usize = 1024;

/// A network `x -> shift + scale * (W2^T relu(W1^T s(x) + b1) + b2)` where
/// `s` is the feature standardisation and `(shift, scale)` a fixed output
/// affine set before training.
///
/// Parameters live in one flat vector laid out as `W1` (`input x hidden`,
/// row-major), `b1`, `W2` (`hidden x output`, row-major), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
    scaler: FeatureScaler,
    out_shift: Vec<f64>,
    out_scale: Vec<f64>,
}

impl MlpModel {
    /// All parameters zero, identity scaler and output affine.
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            params: vec![0.0; Self::count(input, hidden, output)],
            scaler: FeatureScaler::identity(input),
            out_shift: vec![0.0; output],
            out_scale: vec![1.0; output],
        }
    }

    /// Uniform fan-in scaled weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`,
    /// zero biases.
    pub fn he_uniform<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let a1 = (6.0 / input.max(1) as f64).sqrt();
        let a2 = (6.0 / hidden.max(1) as f64).sqrt();
        let (w1_end, b1_end, w2_end) = m.offsets();
        for p in &mut m.params[..w1_end] {
            *p = rng.random_range(-a1..a1);
        }
        for p in &mut m.params[b1_end..w2_end] {
            *p = rng.random_range(-a2..a2);
        }
        m
    }

    pub fn from_parts(
        input: usize,
        hidden: usize,
        output: usize,
        params: Vec<f64>,
        scaler: FeatureScaler,
        out_shift: Vec<f64>,
        out_scale: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::count(input, hidden, output);
        if params.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "network parameters",
                expected,
                found: params.len(),
            });
        }
        if scaler.width() != input {
            return Err(Error::ShapeMismatch {
                context: "network scaler",
                expected: input,
                found: scaler.width(),
            });
        }
        if out_shift.len() != output || out_scale.len() != output {
            return Err(Error::ShapeMismatch {
                context: "network output affine",
                expected: output,
                found: out_shift.len().min(out_scale.len()),
            });
        }
        if params.iter().chain(&out_shift).chain(&out_scale).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(Self {
            input,
            hidden,
            output,
            params,
            scaler,
            out_shift,
            out_scale,
        })
    }

    fn count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let w1 = self.input * self.hidden;
        let b1 = w1 + self.hidden;
        let w2 = b1 + self.hidden * self.output;
        (w1, b1, w2)
    }

    pub fn input(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn output(&self) -> usize {
        self.output
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    pub fn out_shift(&self) -> &[f64] {
        &self.out_shift
    }

    pub fn out_scale(&self) -> &[f64] {
        &self.out_scale
    }

    pub fn set_scaler(&mut self, scaler: FeatureScaler) -> Result<()> {
        if scaler.width() != self.input {
            return Err(Error::ShapeMismatch {
                context: "network scaler",
                expected: self.input,
                found: scaler.width(),
            });
        }
        self.scaler = scaler;
        Ok(())
    }

    pub fn set_output_affine(&mut self, shift: Vec<f64>, scale: Vec<f64>) -> Result<()> {
        if shift.len() != self.output || scale.len() != self.output {
            return Err(Error::ShapeMismatch {
                context: "network output affine",
                expected: self.output,
                found: shift.len(),
            });
        }
        self.out_shift = shift;
        self.out_scale = scale;
        Ok(())
    }

    /// The same function re-expressed under a new feature scaler and output
    /// affine. Features that the new scaler treats as constant are assumed to
    /// sit at their new mean.
    pub fn restandardized(&self, scaler: FeatureScaler, shift: Vec<f64>, scale: Vec<f64>) -> Result<MlpModel> {
        let mut out = self.clone();
        out.set_scaler(scaler)?;
        out.set_output_affine(shift, scale)?;
        let (w1_end, b1_end, w2_end) = self.offsets();
        let (h, o) = (self.hidden, self.output);
        let old_mean = self.scaler.mean();
        let old_inv = self.scaler.inv_scale();
        let new_mean = out.scaler.mean().to_vec();
        let new_inv = out.scaler.inv_scale().to_vec();
        for k in 0..self.input {
            let row = &self.params[k * h..(k + 1) * h];
            let shift_k = (new_mean[k] - old_mean[k]) * old_inv[k];
            for u in 0..h {
                out.params[w1_end + u] += shift_k * row[u];
            }
            let ratio = if new_inv[k] > 0.0 { old_inv[k] / new_inv[k] } else { 0.0 };
            for u in 0..h {
                out.params[k * h + u] = row[u] * ratio;
            }
        }
        for c in 0..o {
            let r = self.out_scale[c] / out.out_scale[c];
            for u in 0..h {
                out.params[b1_end + u * o + c] = self.params[b1_end + u * o + c] * r;
            }
            out.params[w2_end + c] =
                (self.params[w2_end + c] * self.out_scale[c] + self.out_shift[c] - out.out_shift[c]) / out.out_scale[c];
        }
        Ok(out)
    }

    fn w1(&self) -> ArrayView2<'_, f64> {
        let (e, _, _) = self.offsets();
        ArrayView2::from_shape((self.input, self.hidden), &self.params[..e]).unwrap()
    }

    fn b1(&self) -> ArrayView1<'_, f64> {
        let (a, e, _) = self.offsets();
        ArrayView1::from(&self.params[a..e])
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        let (_, a, e) = self.offsets();
        ArrayView2::from_shape((self.hidden, self.output), &self.params[a..e]).unwrap()
    }

    fn b2(&self) -> ArrayView1<'_, f64> {
        let (_, _, a) = self.offsets();
        ArrayView1::from(&self.params[a..])
    }

    /// Hidden pre-activations and raw (pre-affine) outputs for scaled inputs.
    fn raw(&self, scaled: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut pre = scaled.dot(&self.w1());
        pre += &self.b1();
        let h = pre.mapv(|v| v.max(0.0));
        let mut o = h.dot(&self.w2());
        o += &self.b2();
        (pre, h, o)
    }

    pub fn forward_batch(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let scaled = self.scaler.transform(features);
        let (_, _, mut o) = self.raw(scaled.view());
        for mut row in o.rows_mut() {
            for ((v, sh), sc) in row.iter_mut().zip(&self.out_shift).zip(&self.out_scale) {
                *v = sh + sc * *v;
            }
        }
        o
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input,
                found: features.len(),
            });
        }
        let x = ArrayView2::from_shape((1, self.input), features).unwrap();
        Ok(self.forward_batch(x).row(0).to_vec())
    }
}

/// Where `y` enters the generator inside the residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `g(t_i, U, V)`: the unknown appears inside the generator.
    #[default]
    Implicit,
    /// `g(t_i, Y_{i+1}, V)`.
    Explicit,
}

/// One minibatch for the joint residual
/// `U - Y_next - dt g(t, U, V) + V . dB`.
pub struct LossBatch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub y_next: ArrayView1<'a, f64>,
    pub dw: ArrayView2<'a, f64>,
}

/// Generator, time and step size shared by every row of a batch.
#[derive(Clone, Copy)]
pub struct StepProblem<'a> {
    pub generator: &'a Generator,
    pub t: f64,
    pub dt: f64,
    pub variant: Variant,
}

/// Mean squared residual over the batch and its gradient with respect to the
/// flat parameter vector.
pub fn loss_and_gradient(
    model: &MlpModel,
    batch: &LossBatch,
    problem: &StepProblem,
    execution: Execution,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.features.nrows();
    let d = batch.dw.ncols();
    if n == 0 {
        return Err(crate::error::param("batch", "must not be empty"));
    }
    if batch.features.ncols() != model.input {
        return Err(Error::ShapeMismatch {
            context: "batch features",
            expected: model.input,
            found: batch.features.ncols(),
        });
    }
    if batch.y_next.len() != n || batch.dw.nrows() != n {
        return Err(Error::ShapeMismatch {
            context: "batch rows",
            expected: n,
            found: batch.y_next.len().min(batch.dw.nrows()),
        });
    }
    if model.output != d + 1 {
        return Err(Error::ShapeMismatch {
            context: "network output vs 1 + d",
            expected: d + 1,
            found: model.output,
        });
    }
    let inv_n = 1.0 / n as f64;
    let parts = execution.map_blocks(n, LOSS_BLOCK, |range| block_gradient(model, batch, problem, range, inv_n));
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * inv_n, grad))
}

fn block_gradient(
    model: &MlpModel,
    batch: &LossBatch,
    problem: &StepProblem,
    range: std::ops::Range<usize>,
    inv_n: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = batch.dw.ncols();
    let rows = range.len();
    let features = batch.features.slice(s![range.clone(), ..]);
    let scaled = model.scaler.transform(features);
    let (pre, h, o) = model.raw(scaled.view());
    let mut d_o = Array2::<f64>::zeros((rows, model.output));
    let mut v = vec![0.0; d];
    let mut gz = vec![0.0; d];
    let mut loss = 0.0;
    let (dt, t) = (problem.dt, problem.t);
    for k in 0..rows {
        let row = range.start + k;
        let u = model.out_shift[0] + model.out_scale[0] * o[[k, 0]];
        for j in 0..d {
            v[j] = model.out_shift[j + 1] + model.out_scale[j + 1] * o[[k, j + 1]];
        }
        let y_next = batch.y_next[row];
        let y_in = match problem.variant {
            Variant::Implicit => u,
            Variant::Explicit => y_next,
        };
        let (g, gy) = problem.generator.eval_with_grad(t, y_in, &v, &mut gz);
        let mut r = u - y_next - dt * g;
        for j in 0..d {
            r += v[j] * batch.dw[[row, j]];
        }
        if !r.is_finite() {
            return Err(Error::NonFinite(format!(
                "residual at batch row {row}: U = {u}, Y_next = {y_next}, g = {g}"
            )));
        }
        loss += r * r;
        let c = 2.0 * r * inv_n;
        let du = match problem.variant {
            Variant::Implicit => c * (1.0 - dt * gy),
            Variant::Explicit => c,
        };
        d_o[[k, 0]] = du * model.out_scale[0];
        for j in 0..d {
            d_o[[k, j + 1]] = c * (batch.dw[[row, j]] - dt * gz[j]) * model.out_scale[j + 1];
        }
    }
    let grad_w2 = h.t().dot(&d_o);
    let grad_b2 = d_o.sum_axis(Axis(0));
    let mut dh = d_o.dot(&model.w2().t());
    ndarray::Zip::from(&mut dh).and(&pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    let grad_w1 = scaled.t().dot(&dh);
    let grad_b1 = dh.sum_axis(Axis(0));
    let mut grad = Vec::with_capacity(model.params.len());
    grad.extend(grad_w1.iter());
    grad.extend(grad_b1.iter());
    grad.extend(grad_w2.iter());
    grad.extend(grad_b2.iter());
    Ok((loss, grad))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; params],
            v: vec![0.0; params],
            step: 0,
        }
    }

    /// One bias-corrected update of `params` along `grad`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "Adam update",
                expected: self.m.len(),
                found: grad.len(),
            });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}

pub fn adam_step(model: &mut MlpModel, state: &mut AdamState, gradient: &[f64]) -> Result<()> {
    state.update(&mut model.params, gradient)
}

/// Column means of `values`, used for the output shift.
pub(crate) fn column_mean(values: ArrayView1<f64>) -> f64 {
    values.mean().unwrap_or(0.0)
}

pub(crate) fn column_std(values: ArrayView1<f64>) -> f64 {
    let m = column_mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len().max(1) as f64).sqrt()
}
