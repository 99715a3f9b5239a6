//! Truncated Wiener chaos: Hermite polynomials, index sets, the
//! piecewise-constant basis, coefficient estimation and projection.

pub mod basis;
pub mod coefficients;
pub mod hermite;
pub mod index;

pub use basis::{basis_integral, gaussians, BasisSpec};
pub use coefficients::{
    estimate_coefficients, project, ChaosCoefficients, EstimateOptions,
};
pub use hermite::{factorial, hermite_eval, hermite_eval_all};
pub use index::{index_count, IndexSet, MultiIndex, DEFAULT_CARDINALITY_CAP};

use crate::error::{Error, Result};
use crate::simulation::BrownianPath;

/// `X_t^a = prod_s H_{a_s}(G_s(t))`, evaluated slot by slot.
pub fn chaos_monomial(a: &MultiIndex, path: &BrownianPath, basis: &BasisSpec, t: f64) -> Result<f64> {
    if a.slots() != basis.slots() {
        return Err(Error::ShapeMismatch {
            context: "multi-index length",
            expected: basis.slots(),
            found: a.slots(),
        });
    }
    let d = basis.dimension();
    let mut acc = 1.0;
    for (s, k) in a.support() {
        let g = basis_integral(path, basis, s / d, s % d, t)?;
        acc *= hermite_eval(k as usize, g);
    }
    Ok(acc)
}

/// The orthonormal functional `Phi_a = sqrt(a!) prod_s H_{a_s}(g_s)` of
/// independent standard normals `g`.
pub fn orthonormal_monomial(a: &MultiIndex, g: &[f64]) -> f64 {
    a.factorial().sqrt()
        * a.support()
            .map(|(s, k)| hermite_eval(k as usize, g[s]))
            .product::<f64>()
}
