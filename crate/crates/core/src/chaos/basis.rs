use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::simulation::BrownianPath;

/// The truncated basis `h_i^j = dt_i^{-1/2} 1_{(s_i, s_{i+1}]} e_j` of
/// `L^2([0,T]; R^d)` built on a partition `s_0 < ... < s_M`.
///
/// Slot `s = i * d + j` holds interval `i` (zero-based) and component `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    partition: TimeGrid,
    dimension: usize,
}

impl BasisSpec {
    pub fn new(partition: TimeGrid, dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(crate::error::param("dimension", "must be at least 1"));
        }
        Ok(Self {
            partition,
            dimension,
        })
    }

    pub fn partition(&self) -> &TimeGrid {
        &self.partition
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn intervals(&self) -> usize {
        self.partition.steps()
    }

    /// `M_d = M * d`.
    pub fn slots(&self) -> usize {
        self.intervals() * self.dimension
    }

    pub fn slot(&self, interval: usize, component: usize) -> usize {
        interval * self.dimension + component
    }

    pub fn interval_of(&self, slot: usize) -> usize {
        slot / self.dimension
    }

    pub fn component_of(&self, slot: usize) -> usize {
        slot % self.dimension
    }

    pub fn horizon(&self) -> f64 {
        self.partition.horizon()
    }

    /// The interval whose indicator is active at `t` for the forward SDE,
    /// taken right-continuous (`s_i <= t < s_{i+1}`), with `t = T` mapped to
    /// the last interval.
    pub fn active_interval(&self, t: f64) -> Result<usize> {
        let pts = self.partition.points();
        let tol = 1e-10 * self.horizon().max(1.0);
        if !(t >= -tol && t <= self.horizon() + tol) {
            return Err(crate::error::param(
                "t",
                format!("{t} outside [0, {}]", self.horizon()),
            ));
        }
        let i = pts.partition_point(|&p| p <= t + tol);
        Ok(i.saturating_sub(1).min(self.intervals() - 1))
    }

    /// `dt_i^{-1/2}`, the height of the basis functions on interval `i`.
    pub fn amplitude(&self, interval: usize) -> f64 {
        1.0 / self.partition.dt(interval).sqrt()
    }

    /// Grid positions of the partition points inside `grid`.
    pub fn knots_on(&self, grid: &TimeGrid) -> Result<Vec<usize>> {
        if (grid.horizon() - self.horizon()).abs() > 1e-10 * self.horizon().max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "basis horizon {} differs from simulation horizon {}",
                self.horizon(),
                grid.horizon()
            )));
        }
        self.partition
            .points()
            .iter()
            .map(|&t| grid.require_index(t))
            .collect()
    }
}

/// `G_s(t_k)` for the slot `(interval, component)` given the partition knots
/// on the path grid.
#[inline]
pub(crate) fn gaussian_at(
    path: &BrownianPath,
    knots: &[usize],
    sqrt_dt: &[f64],
    interval: usize,
    component: usize,
    k: usize,
) -> f64 {
    let lo = knots[interval];
    if k <= lo {
        return 0.0;
    }
    let hi = knots[interval + 1].min(k);
    (path.value(hi, component) - path.value(lo, component)) / sqrt_dt[interval]
}

pub(crate) fn sqrt_steps(basis: &BasisSpec) -> Vec<f64> {
    (0..basis.intervals())
        .map(|i| basis.partition.dt(i).sqrt())
        .collect()
}

/// `int_0^t h_i^j dB` for zero-based `interval` and `component`: zero up to
/// the start of the interval, the scaled increment inside it, constant after.
pub fn basis_integral(
    path: &BrownianPath,
    basis: &BasisSpec,
    interval: usize,
    component: usize,
    t: f64,
) -> Result<f64> {
    if interval >= basis.intervals() || component >= basis.dimension() {
        return Err(crate::error::param(
            "slot",
            format!("({interval}, {component}) outside the basis"),
        ));
    }
    if component >= path.dimension() {
        return Err(Error::ShapeMismatch {
            context: "path dimension",
            expected: basis.dimension(),
            found: path.dimension(),
        });
    }
    let k = path.grid().require_index(t)?;
    let knots = basis.knots_on(path.grid())?;
    let sqrt_dt = sqrt_steps(basis);
    Ok(gaussian_at(path, &knots, &sqrt_dt, interval, component, k))
}

/// All `G_s(t)`, in slot order.
pub fn gaussians(path: &BrownianPath, basis: &BasisSpec, t: f64) -> Result<Vec<f64>> {
    let k = path.grid().require_index(t)?;
    let knots = basis.knots_on(path.grid())?;
    let sqrt_dt = sqrt_steps(basis);
    Ok((0..basis.slots())
        .map(|s| {
            gaussian_at(
                path,
                &knots,
                &sqrt_dt,
                basis.interval_of(s),
                basis.component_of(s),
                k,
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn hand_path() -> BrownianPath {
        let grid = Arc::new(TimeGrid::new(vec![0.0, 0.1, 0.15, 0.2, 1.0]).unwrap());
        BrownianPath::from_values(grid, 1, vec![0.0, 0.3, 0.1, 0.5, -0.2]).unwrap()
    }

    #[test]
    fn integrals_on_hand_path() {
        let path = hand_path();
        let basis = BasisSpec::new(TimeGrid::new(vec![0.0, 0.1, 0.2, 1.0]).unwrap(), 1).unwrap();
        for s in 0..3 {
            assert_eq!(basis_integral(&path, &basis, s, 0, 0.0).unwrap(), 0.0);
        }
        let g = basis_integral(&path, &basis, 0, 0, 1.0).unwrap();
        assert!((g - 0.3 / 0.1f64.sqrt()).abs() < 1e-14);
        let half = basis_integral(&path, &basis, 1, 0, 0.15).unwrap();
        assert!((half - (0.1 - 0.3) / 0.1f64.sqrt()).abs() < 1e-14);
        let later = basis_integral(&path, &basis, 1, 0, 1.0).unwrap();
        assert!((later - (0.5 - 0.3) / 0.1f64.sqrt()).abs() < 1e-14);
        assert_eq!(basis_integral(&path, &basis, 2, 0, 0.2).unwrap(), 0.0);
        assert!(matches!(
            basis_integral(&path, &basis, 0, 0, 0.5),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn active_interval_is_right_continuous() {
        let basis = BasisSpec::new(TimeGrid::uniform(1.0, 4).unwrap(), 2).unwrap();
        assert_eq!(basis.active_interval(0.0).unwrap(), 0);
        assert_eq!(basis.active_interval(0.25).unwrap(), 1);
        assert_eq!(basis.active_interval(0.3).unwrap(), 1);
        assert_eq!(basis.active_interval(1.0).unwrap(), 3);
        assert!(basis.active_interval(1.5).is_err());
        assert_eq!(basis.slots(), 8);
        assert_eq!(basis.slot(2, 1), 5);
        assert_eq!((basis.interval_of(5), basis.component_of(5)), (2, 1));
    }
}
