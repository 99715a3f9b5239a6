use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when matching times against grid points.
const TIME_TOL: f64 = 1e-10;

/// A strictly increasing partition `0 = t_0 < ... < t_n = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;
    fn try_from(points: Vec<f64>) -> Result<Self> {
        TimeGrid::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.points
    }
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid("non-finite time".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!(
                "first point must be 0, got {}",
                points[0]
            )));
        }
        if let Some(w) = points.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "points must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { points })
    }

    /// `n` equal steps over `[0, horizon]`; the points are `horizon * i / n`.
    pub fn uniform(horizon: f64, n: usize) -> Result<Self> {
        if n == 0 || !(horizon > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "uniform grid needs n >= 1 and T > 0 (got n = {n}, T = {horizon})"
            )));
        }
        Self::new((0..=n).map(|i| horizon * i as f64 / n as f64).collect())
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Number of intervals.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    /// `|pi| = max_i dt_i`.
    pub fn mesh(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    fn tol(&self) -> f64 {
        TIME_TOL * self.horizon().max(1.0)
    }

    /// Position of `t` in the grid, if it is a grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = self.tol();
        let pos = self.points.partition_point(|&p| p < t - tol);
        (pos < self.points.len() && (self.points[pos] - t).abs() <= tol).then_some(pos)
    }

    pub fn require_index(&self, t: f64) -> Result<usize> {
        self.index_of(t).ok_or(Error::GridMismatch { t })
    }

    /// True when every point of `other` is a point of `self`.
    pub fn contains_grid(&self, other: &TimeGrid) -> bool {
        other.points.iter().all(|&t| self.index_of(t).is_some())
    }

    /// The common refinement of two grids with the same horizon.
    pub fn union(&self, other: &TimeGrid) -> Result<TimeGrid> {
        if (self.horizon() - other.horizon()).abs() > self.tol() {
            return Err(Error::InvalidGrid(format!(
                "horizons differ: {} vs {}",
                self.horizon(),
                other.horizon()
            )));
        }
        let mut pts: Vec<f64> = self.points.clone();
        for &t in &other.points {
            if self.index_of(t).is_none() {
                pts.push(t);
            }
        }
        pts.sort_by(f64::total_cmp);
        TimeGrid::new(pts)
    }
}
