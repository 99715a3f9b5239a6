use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use super::{check_finite, FeatureScaler};
use crate::error::{Error, Result};

/// Relative singular-value cutoff below which directions are treated as null.
const RCOND: f64 = 1e-11;

/// A least-squares solver for a fixed design matrix: Householder QR followed by
/// an SVD of the triangular factor, giving the minimum-norm solution for
/// rank-deficient designs. The factorisation is reused across right-hand sides.
pub struct LeastSquares {
    design: DMatrix<f64>,
    qr: nalgebra::QR<f64, nalgebra::Dyn, nalgebra::Dyn>,
    u: DMatrix<f64>,
    inv_sigma: DVector<f64>,
    v: DMatrix<f64>,
    rank: usize,
}

impl LeastSquares {
    pub fn new(design: DMatrix<f64>) -> Result<Self> {
        if design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design matrix".into()));
        }
        if design.nrows() == 0 || design.ncols() == 0 {
            return Err(Error::Decomposition("empty design matrix".into()));
        }
        let qr = design.clone().qr();
        let r = qr.r();
        let svd = r.svd(true, true);
        let u = svd.u.ok_or_else(|| Error::Decomposition("SVD did not return U".into()))?;
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Decomposition("SVD did not return V".into()))?;
        let smax = svd.singular_values.max();
        let cutoff = smax * RCOND;
        let mut rank = 0;
        let inv_sigma = svd.singular_values.map(|s| {
            if s > cutoff && s > 0.0 {
                rank += 1;
                1.0 / s
            } else {
                0.0
            }
        });
        Ok(Self {
            design,
            qr,
            u,
            inv_sigma,
            v: v_t.transpose(),
            rank,
        })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    /// Minimum-norm minimiser of `|A x - b|` for each column of `rhs`.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if rhs.nrows() != self.design.nrows() {
            return Err(Error::ShapeMismatch {
                context: "least-squares right-hand side rows",
                expected: self.design.nrows(),
                found: rhs.nrows(),
            });
        }
        if rhs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("least-squares targets".into()));
        }
        let mut qtb = rhs.clone();
        self.qr.q_tr_mul(&mut qtb);
        let k = self.u.nrows();
        let c = qtb.rows(0, k);
        let mut w = self.u.transpose() * c;
        for (i, s) in self.inv_sigma.iter().enumerate() {
            w.row_mut(i).scale_mut(*s);
        }
        Ok(&self.v * w)
    }

    pub fn fitted(&self, coefficients: &DMatrix<f64>) -> DMatrix<f64> {
        &self.design * coefficients
    }
}

/// `[1, scaled features]` as a column-major design matrix.
fn design_matrix(scaler: &FeatureScaler, features: ArrayView2<f64>) -> DMatrix<f64> {
    let (m, n) = features.dim();
    let mean = scaler.mean();
    let inv = scaler.inv_scale();
    DMatrix::from_fn(m, n + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (features[[i, j - 1]] - mean[j - 1]) * inv[j - 1]
        }
    })
}

pub(crate) fn to_dmatrix(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub(crate) fn to_array(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// An affine map `features -> outputs` fitted by least squares on
/// standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    scaler: FeatureScaler,
    /// Row 0 is the intercept; row `k + 1` multiplies scaled feature `k`.
    weights: Array2<f64>,
}

impl LinearModel {
    pub fn from_parts(scaler: FeatureScaler, weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() != scaler.width() + 1 {
            return Err(Error::ShapeMismatch {
                context: "linear model weights",
                expected: scaler.width() + 1,
                found: weights.nrows(),
            });
        }
        check_finite("linear model weights", weights.view())?;
        Ok(Self { scaler, weights })
    }

    pub fn scaler(&self) -> &FeatureScaler {
        &self.scaler
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn inputs(&self) -> usize {
        self.scaler.width()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let scaled = self.scaler.transform(features);
        let slopes = self.weights.slice(ndarray::s![1.., ..]);
        let mut out = scaled.dot(&slopes);
        for mut row in out.rows_mut() {
            row += &self.weights.row(0);
        }
        out
    }

    pub fn predict_row(&self, features: &[f64]) -> Vec<f64> {
        let mut scaled = vec![0.0; features.len()];
        self.scaler.transform_row(features, &mut scaled);
        (0..self.outputs())
            .map(|o| {
                let mut acc = self.weights[[0, o]];
                for (k, x) in scaled.iter().enumerate() {
                    acc += x * self.weights[[k + 1, o]];
                }
                acc
            })
            .collect()
    }
}

/// A factorised design that can be fitted against several targets.
pub struct LinearFitter {
    scaler: FeatureScaler,
    solver: LeastSquares,
}

impl LinearFitter {
    pub fn new(features: ArrayView2<f64>) -> Result<Self> {
        check_finite("regression features", features)?;
        let scaler = FeatureScaler::fit(features);
        let solver = LeastSquares::new(design_matrix(&scaler, features))?;
        Ok(Self { scaler, solver })
    }

    pub fn rows(&self) -> usize {
        self.solver.design().nrows()
    }

    pub fn rank(&self) -> usize {
        self.solver.rank()
    }

    /// Weight matrix (intercept first) for the given targets.
    pub fn solve(&self, targets: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.solver.solve(targets)
    }

    pub fn fitted(&self, weights: &DMatrix<f64>) -> DMatrix<f64> {
        self.solver.fitted(weights)
    }

    pub fn model(&self, weights: &DMatrix<f64>) -> Result<LinearModel> {
        LinearModel::from_parts(self.scaler.clone(), to_array(weights))
    }

    pub fn fit(&self, targets: ArrayView2<f64>) -> Result<LinearModel> {
        if targets.nrows() != self.rows() {
            return Err(Error::ShapeMismatch {
                context: "regression targets rows",
                expected: self.rows(),
                found: targets.nrows(),
            });
        }
        check_finite("regression targets", targets)?;
        let w = self.solve(&to_dmatrix(targets))?;
        self.model(&w)
    }
}

/// Ordinary least squares of `targets` on `[1, features]`.
pub fn linear_fit(features: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<LinearModel> {
    LinearFitter::new(features)?.fit(targets)
}
