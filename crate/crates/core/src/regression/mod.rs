//! Regressors used by the backward schemes: exact least squares and a
//! one-hidden-layer ReLU network trained with Adam.

pub mod io;
pub mod linear;
pub mod mlp;

pub use linear::{linear_fit, LeastSquares, LinearModel};
pub use mlp::{adam_step, loss_and_gradient, AdamConfig, AdamState, LossBatch, MlpModel, StepProblem, Variant};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Per-feature affine standardisation `(x - mean) * inv_scale`. Columns with
/// (numerically) zero spread get `inv_scale = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureScaler {
    mean: Vec<f64>,
    inv_scale: Vec<f64>,
}

impl FeatureScaler {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            inv_scale: vec![1.0; width],
        }
    }

    pub fn from_parts(mean: Vec<f64>, inv_scale: Vec<f64>) -> Result<Self> {
        if mean.len() != inv_scale.len() {
            return Err(Error::ShapeMismatch {
                context: "scaler",
                expected: mean.len(),
                found: inv_scale.len(),
            });
        }
        Ok(Self { mean, inv_scale })
    }

    pub fn fit(features: ArrayView2<f64>) -> Self {
        let n = features.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut inv_scale = Vec::with_capacity(features.ncols());
        for col in features.axis_iter(Axis(1)) {
            let m = col.sum() / n;
            let var = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            mean.push(m);
            inv_scale.push(if sd > 1e-9 * m.abs().max(1.0) { 1.0 / sd } else { 0.0 });
        }
        Self { mean, inv_scale }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn inv_scale(&self) -> &[f64] {
        &self.inv_scale
    }

    pub fn transform(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let mut out = features.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for ((x, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_scale) {
                *x = (*x - m) * s;
            }
        }
        out
    }

    pub fn transform_row(&self, features: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(features).zip(&self.mean).zip(&self.inv_scale) {
            *o = (x - m) * s;
        }
    }
}

pub(crate) fn check_finite(context: &str, data: ArrayView2<f64>) -> Result<()> {
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        let (r, c) = (pos / data.ncols().max(1), pos % data.ncols().max(1));
        return Err(Error::NonFinite(format!("{context} entry ({r}, {c})")));
    }
    Ok(())
}

/// A fitted per-step map from features to `(y, z_1, ..., z_d)`.
#[derive(Debug, Clone, PartialEq)]
pub enum StepModel {
    Linear(LinearModel),
    Mlp(MlpModel),
}

impl StepModel {
    pub fn inputs(&self) -> usize {
        match self {
            StepModel::Linear(m) => m.inputs(),
            StepModel::Mlp(m) => m.input(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            StepModel::Linear(m) => m.outputs(),
            StepModel::Mlp(m) => m.output(),
        }
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Array2<f64> {
        match self {
            StepModel::Linear(m) => m.predict(features),
            StepModel::Mlp(m) => m.forward_batch(features),
        }
    }

    pub fn predict_row(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.inputs() {
            return Err(Error::ShapeMismatch {
                context: "feature vector",
                expected: self.inputs(),
                found: features.len(),
            });
        }
        Ok(match self {
            StepModel::Linear(m) => m.predict_row(features),
            StepModel::Mlp(m) => m.forward(features)?,
        })
    }
}
