//! Brownian paths, the forward chaos state `X_t` and its linear SDE.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::chaos::basis::{gaussian_at, sqrt_steps, BasisSpec};
use crate::chaos::hermite::hermite_fill;
use crate::chaos::IndexSet;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::rng;

const CORRELATION_TOL: f64 = 1e-12;

/// A factor `F` with `F F^T = C` for a positive semidefinite correlation
/// matrix `C` (row-major, `d x d`), computed by Cholesky with diagonal
/// pivoting so that rank-deficient matrices are accepted.
pub fn correlation_factor(correlation: &[f64], d: usize) -> Result<Vec<f64>> {
    if correlation.len() != d * d {
        return Err(Error::ShapeMismatch {
            context: "correlation matrix",
            expected: d * d,
            found: correlation.len(),
        });
    }
    for i in 0..d {
        if (correlation[i * d + i] - 1.0).abs() > CORRELATION_TOL {
            return Err(Error::Decomposition(format!(
                "diagonal entry {i} is {}, expected 1",
                correlation[i * d + i]
            )));
        }
        for j in 0..i {
            let (a, b) = (correlation[i * d + j], correlation[j * d + i]);
            if !a.is_finite() || (a - b).abs() > CORRELATION_TOL {
                return Err(Error::Decomposition(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let tol = CORRELATION_TOL * d as f64;
    let mut a = correlation.to_vec();
    let mut perm: Vec<usize> = (0..d).collect();
    let mut l = vec![0.0; d * d];
    for k in 0..d {
        let (p, pivot) = (k..d)
            .map(|i| (i, a[i * d + i]))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if pivot <= tol {
            for i in k..d {
                for j in k..d {
                    let v = a[i * d + j];
                    if (i == j && v < -tol) || (i != j && v.abs() > tol.sqrt()) {
                        return Err(Error::Decomposition(
                            "correlation matrix is not positive semidefinite".into(),
                        ));
                    }
                }
            }
            break;
        }
        if p != k {
            for j in 0..d {
                a.swap(k * d + j, p * d + j);
            }
            for i in 0..d {
                a.swap(i * d + k, i * d + p);
            }
            for j in 0..k {
                l.swap(k * d + j, p * d + j);
            }
            perm.swap(k, p);
        }
        let lkk = pivot.sqrt();
        l[k * d + k] = lkk;
        for i in k + 1..d {
            l[i * d + k] = a[i * d + k] / lkk;
        }
        for i in k + 1..d {
            for j in k + 1..=i {
                let v = a[i * d + j] - l[i * d + k] * l[j * d + k];
                a[i * d + j] = v;
                a[j * d + i] = v;
            }
        }
    }
    let mut f = vec![0.0; d * d];
    for i in 0..d {
        f[perm[i] * d..perm[i] * d + d].copy_from_slice(&l[i * d..i * d + d]);
    }
    Ok(f)
}

/// A `d`-dimensional Brownian path sampled on a grid; `values` holds one row
/// of `d` coordinates per grid point, starting from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    grid: Arc<TimeGrid>,
    dimension: usize,
    values: Vec<f64>,
}

impl BrownianPath {
    pub fn from_values(grid: Arc<TimeGrid>, dimension: usize, values: Vec<f64>) -> Result<Self> {
        let expected = grid.points().len() * dimension;
        if dimension == 0 || values.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "path values",
                expected,
                found: values.len(),
            });
        }
        if values[..dimension].iter().any(|&v| v != 0.0) {
            return Err(crate::error::param("values", "path must start at zero"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("path value".into()));
        }
        Ok(Self {
            grid,
            dimension,
            values,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `B^j` at grid point `k`.
    #[inline]
    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.dimension + j]
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.values[k * self.dimension..(k + 1) * self.dimension]
    }

    pub fn value_at(&self, t: f64, j: usize) -> Result<f64> {
        Ok(self.value(self.grid.require_index(t)?, j))
    }

    /// `B_{t_l} - B_{t_k}` component-wise.
    pub fn increment(&self, k: usize, l: usize) -> Vec<f64> {
        (0..self.dimension)
            .map(|j| self.value(l, j) - self.value(k, j))
            .collect()
    }

    /// The reflected path `-B`, used for antithetic sampling.
    pub fn negated(&self) -> BrownianPath {
        BrownianPath {
            grid: self.grid.clone(),
            dimension: self.dimension,
            values: self.values.iter().map(|v| -v).collect(),
        }
    }
}

/// Draws correlated Brownian paths on a fixed grid.
#[derive(Debug, Clone)]
pub struct PathSampler {
    grid: Arc<TimeGrid>,
    dimension: usize,
    correlation: Vec<f64>,
    factor: Option<Vec<f64>>,
    sqrt_dt: Vec<f64>,
}

impl PathSampler {
    /// `correlation` is row-major `d x d`; `None` means independent components.
    pub fn new(grid: TimeGrid, dimension: usize, correlation: Option<&[f64]>) -> Result<Self> {
        if dimension == 0 {
            return Err(crate::error::param("dimension", "must be at least 1"));
        }
        let identity: Vec<f64> = (0..dimension * dimension)
            .map(|i| if i % (dimension + 1) == 0 { 1.0 } else { 0.0 })
            .collect();
        let (correlation, factor) = match correlation {
            Some(c) if c != identity.as_slice() => {
                (c.to_vec(), Some(correlation_factor(c, dimension)?))
            }
            Some(_) | None => (identity, None),
        };
        let sqrt_dt = (0..grid.steps()).map(|i| grid.dt(i).sqrt()).collect();
        Ok(Self {
            grid: Arc::new(grid),
            dimension,
            correlation,
            factor,
            sqrt_dt,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn shared_grid(&self) -> &Arc<TimeGrid> {
        &self.grid
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn correlation(&self) -> &[f64] {
        &self.correlation
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> BrownianPath {
        let d = self.dimension;
        let mut values = vec![0.0; self.grid.points().len() * d];
        let mut w = vec![0.0; d];
        for (k, sdt) in self.sqrt_dt.iter().enumerate() {
            for wj in w.iter_mut() {
                *wj = rng.sample::<f64, _>(StandardNormal);
            }
            let (prev, next) = values[k * d..(k + 2) * d].split_at_mut(d);
            match &self.factor {
                None => {
                    for j in 0..d {
                        next[j] = prev[j] + sdt * w[j];
                    }
                }
                Some(f) => {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for m in 0..d {
                            acc += f[j * d + m] * w[m];
                        }
                        next[j] = prev[j] + sdt * acc;
                    }
                }
            }
        }
        BrownianPath {
            grid: self.grid.clone(),
            dimension: d,
            values,
        }
    }

    /// The path addressed by `(seed, key)`.
    pub fn sample_stream(&self, seed: u64, key: &[u64]) -> BrownianPath {
        self.sample(&mut rng::stream(seed, key))
    }
}

/// One path from the stream `(seed, [PATH, 0])`.
pub fn sample_path(
    grid: TimeGrid,
    dimension: usize,
    correlation: Option<&[f64]>,
    seed: u64,
) -> Result<BrownianPath> {
    Ok(PathSampler::new(grid, dimension, correlation)?.sample_stream(seed, &[rng::domain::PATH, 0]))
}

/// The chaos monomials `(X_t^a)_a` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    pub t: f64,
    pub values: Vec<f64>,
    pub index_set: Arc<IndexSet>,
}

/// Evaluates `X_t` on paths sampled over one fixed simulation grid.
#[derive(Debug, Clone)]
pub struct ForwardMap {
    index_set: Arc<IndexSet>,
    basis: BasisSpec,
    knots: Vec<usize>,
    sqrt_dt: Vec<f64>,
    grid_len: usize,
}

impl ForwardMap {
    pub fn new(basis: &BasisSpec, index_set: Arc<IndexSet>, grid: &TimeGrid) -> Result<Self> {
        if index_set.slots() != basis.slots() {
            return Err(Error::ShapeMismatch {
                context: "index set slots vs basis size",
                expected: basis.slots(),
                found: index_set.slots(),
            });
        }
        Ok(Self {
            knots: basis.knots_on(grid)?,
            sqrt_dt: sqrt_steps(basis),
            basis: basis.clone(),
            index_set,
            grid_len: grid.points().len(),
        })
    }

    pub fn index_set(&self) -> &Arc<IndexSet> {
        &self.index_set
    }

    pub fn basis(&self) -> &BasisSpec {
        &self.basis
    }

    pub fn len(&self) -> usize {
        self.index_set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_set.is_empty()
    }

    fn check(&self, path: &BrownianPath) -> Result<()> {
        if path.grid().points().len() != self.grid_len {
            return Err(Error::InvalidGrid(
                "path was not sampled on this map's grid".into(),
            ));
        }
        if path.dimension() != self.basis.dimension() {
            return Err(Error::ShapeMismatch {
                context: "path dimension",
                expected: self.basis.dimension(),
                found: path.dimension(),
            });
        }
        Ok(())
    }

    /// Writes `X^a` at grid point `k` into `out`; `scratch` is reused for the
    /// per-slot Hermite tables.
    pub fn values_into(
        &self,
        path: &BrownianPath,
        k: usize,
        out: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<()> {
        self.check(path)?;
        if out.len() != self.len() {
            return Err(Error::ShapeMismatch {
                context: "forward state buffer",
                expected: self.len(),
                found: out.len(),
            });
        }
        let d = self.basis.dimension();
        let p = self.index_set.order() as usize;
        scratch.clear();
        for s in 0..self.basis.slots() {
            let g = gaussian_at(path, &self.knots, &self.sqrt_dt, s / d, s % d, k);
            hermite_fill(g, p, scratch);
        }
        fill_monomials(&self.index_set, scratch, out);
        Ok(())
    }

    pub fn values(&self, path: &BrownianPath, k: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.len()];
        self.values_into(path, k, &mut out, &mut Vec::new())?;
        Ok(out)
    }

    pub fn state(&self, path: &BrownianPath, t: f64) -> Result<ForwardState> {
        let k = path.grid().require_index(t)?;
        Ok(ForwardState {
            t,
            values: self.values(path, k)?,
            index_set: self.index_set.clone(),
        })
    }

    /// `X_0`, where every Gaussian vanishes.
    pub fn initial(&self) -> Vec<f64> {
        initial_values(&self.index_set)
    }
}

/// `X_0^a = prod_s H_{a_s}(0)`.
pub fn initial_values(index_set: &IndexSet) -> Vec<f64> {
    let p = index_set.order() as usize;
    let mut table = Vec::with_capacity(index_set.slots() * (p + 1));
    for _ in 0..index_set.slots() {
        hermite_fill(0.0, p, &mut table);
    }
    let mut out = vec![0.0; index_set.len()];
    fill_monomials(index_set, &table, &mut out);
    out
}

fn fill_monomials(index_set: &IndexSet, table: &[f64], out: &mut [f64]) {
    let stride = index_set.order() as usize + 1;
    for (pos, x) in out.iter_mut().enumerate() {
        let mut acc = 1.0;
        for &(s, k) in index_set.support(pos) {
            acc *= table[s * stride + k as usize];
        }
        *x = acc;
    }
}

/// `X_t` on `path`.
pub fn forward_state(
    path: &BrownianPath,
    basis: &BasisSpec,
    index_set: &Arc<IndexSet>,
    t: f64,
) -> Result<ForwardState> {
    ForwardMap::new(basis, index_set.clone(), path.grid())?.state(path, t)
}

/// Drift `b(t, x)` and diffusion `sigma(t, x)` of the forward chaos SDE.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeCoefficients {
    pub drift: Vec<f64>,
    /// Row-major, one row of `d` entries per index.
    pub diffusion: Vec<f64>,
    pub dimension: usize,
}

impl SdeCoefficients {
    pub fn diffusion_row(&self, pos: usize) -> &[f64] {
        &self.diffusion[pos * self.dimension..(pos + 1) * self.dimension]
    }
}

/// SDE coefficients for independent Brownian components.
pub fn sde_coefficients(t: f64, state: &ForwardState, basis: &BasisSpec) -> Result<SdeCoefficients> {
    sde_coefficients_correlated(t, state, basis, None)
}

/// SDE coefficients with inner products `<h_r, h_s>` taken with respect to
/// the driver covariance, so correlated components couple through the
/// cross terms.
pub fn sde_coefficients_correlated(
    t: f64,
    state: &ForwardState,
    basis: &BasisSpec,
    correlation: Option<&[f64]>,
) -> Result<SdeCoefficients> {
    let set = &state.index_set;
    let d = basis.dimension();
    if set.slots() != basis.slots() || state.values.len() != set.len() {
        return Err(Error::ShapeMismatch {
            context: "forward state",
            expected: set.len(),
            found: state.values.len(),
        });
    }
    if let Some(c) = correlation {
        if c.len() != d * d {
            return Err(Error::ShapeMismatch {
                context: "correlation matrix",
                expected: d * d,
                found: c.len(),
            });
        }
    }
    let rho = |a: usize, b: usize| match correlation {
        Some(c) => c[a * d + b],
        None => {
            if a == b {
                1.0
            } else {
                0.0
            }
        }
    };
    let active = basis.active_interval(t)?;
    let alpha = basis.amplitude(active);
    let h = |s: usize| {
        if basis.interval_of(s) == active {
            alpha
        } else {
            0.0
        }
    };
    let inner = |r: usize, s: usize| h(r) * h(s) * rho(basis.component_of(r), basis.component_of(s));

    let x = &state.values;
    let mut drift = vec![0.0; set.len()];
    let mut diffusion = vec![0.0; set.len() * d];
    for pos in 0..set.len() {
        let support = set.support(pos);
        let mut b = 0.0;
        for (u, &(s, k)) in support.iter().enumerate() {
            if let Some(low) = set.lower(pos, s) {
                diffusion[pos * d + basis.component_of(s)] += x[low] * h(s);
            }
            if k >= 2 {
                if let Some(low) = set.lower2(pos, s, s) {
                    b += 0.5 * x[low] * inner(s, s);
                }
            }
            for &(r, _) in &support[..u] {
                if let Some(low) = set.lower2(pos, r, s) {
                    b += x[low] * inner(r, s);
                }
            }
        }
        drift[pos] = b;
    }
    Ok(SdeCoefficients {
        drift,
        diffusion,
        dimension: d,
    })
}

/// Euler-Maruyama integration of the forward chaos SDE along `path`, on the
/// path's own grid, starting from `x0`.
pub fn euler_maruyama_forward(
    x0: &ForwardState,
    path: &BrownianPath,
    basis: &BasisSpec,
    correlation: Option<&[f64]>,
) -> Result<Vec<ForwardState>> {
    let grid = path.grid();
    let d = path.dimension();
    let mut states = Vec::with_capacity(grid.points().len());
    states.push(x0.clone());
    for k in 0..grid.steps() {
        let cur = states.last().unwrap();
        let coef = sde_coefficients_correlated(grid.time(k), cur, basis, correlation)?;
        let dt = grid.dt(k);
        let db = path.increment(k, k + 1);
        let values = cur
            .values
            .iter()
            .enumerate()
            .map(|(pos, x)| {
                let row = coef.diffusion_row(pos);
                let mut v = x + coef.drift[pos] * dt;
                for j in 0..d {
                    v += row[j] * db[j];
                }
                v
            })
            .collect();
        states.push(ForwardState {
            t: grid.time(k + 1),
            values,
            index_set: cur.index_set.clone(),
        });
    }
    Ok(states)
}

const PATH_MAGIC: &[u8; 8] = b"OPBSDEP1";

/// Writes a path as: the 8-byte magic `OPBSDEP1`, then little-endian `u64`
/// point count, `u64` dimension, `u64` seed, the grid points as `f64`, and
/// the values row by row as `f64`.
pub fn write_path_dump<W: Write>(mut w: W, path: &BrownianPath, seed: u64) -> Result<()> {
    w.write_all(PATH_MAGIC)?;
    w.write_all(&(path.grid().points().len() as u64).to_le_bytes())?;
    w.write_all(&(path.dimension() as u64).to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    for t in path.grid().points() {
        w.write_all(&t.to_le_bytes())?;
    }
    for v in path.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a path written by [`write_path_dump`], returning it with its seed.
pub fn read_path_dump<R: Read>(mut r: R) -> Result<(BrownianPath, u64)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PATH_MAGIC {
        return Err(Error::Format("not a path dump".into()));
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let n = next_u64(&mut r)? as usize;
    let d = next_u64(&mut r)? as usize;
    let seed = next_u64(&mut r)?;
    if n > (1 << 28) || d > (1 << 16) {
        return Err(Error::Format("implausible path dump header".into()));
    }
    let mut read_f64s = |count: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; count * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };
    let times = read_f64s(n)?;
    let values = read_f64s(n * d)?;
    let grid = Arc::new(TimeGrid::new(times)?);
    Ok((BrownianPath::from_values(grid, d, values)?, seed))
}
