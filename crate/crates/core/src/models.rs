//! Generators `g(t, y, z)` and terminal conditions `xi(path)`.

use serde::{Deserialize, Serialize};

use crate::chaos::{chaos_monomial, BasisSpec, MultiIndex};
use crate::error::{param, Error, Result};
use crate::grid::TimeGrid;
use crate::simulation::{correlation_factor, BrownianPath};

/// Something that maps a Brownian path to a terminal value.
pub trait Payoff: Sync {
    fn payoff(&self, path: &BrownianPath) -> Result<f64>;
}

impl<F> Payoff for F
where
    F: Fn(&BrownianPath) -> f64 + Sync,
{
    fn payoff(&self, path: &BrownianPath) -> Result<f64> {
        Ok(self(path))
    }
}

/// A generator family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// `g = 0`.
    Zero,
    /// `g = -r y - theta . z`; an empty `theta` means no `z` term.
    LinearRate {
        rate: f64,
        #[serde(default)]
        theta: Vec<f64>,
    },
    /// `g = cos(y) + sum_j sin(z_j)`.
    Trig,
    /// `g = -r y - theta . z + (R - r) (y - sum_j (Sigma^{-1} z)_j)_-` with
    /// `Sigma_{ij} = sigma_i L_{ij}`, `L` the Cholesky factor of the
    /// equicorrelation matrix and `theta = Sigma^{-1} (mu - r 1)`.
    BorrowingRate {
        rate: f64,
        borrowing_rate: f64,
        drift: Vec<f64>,
        volatility: Vec<f64>,
        #[serde(default)]
        correlation: f64,
    },
}

impl GeneratorSpec {
    /// The Black-Scholes pricing generator `-r y - z (mu - r) / sigma`.
    pub fn black_scholes(rate: f64, drift: f64, volatility: f64) -> Self {
        GeneratorSpec::LinearRate {
            rate,
            theta: vec![(drift - rate) / volatility],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GeneratorSpec::Zero => "zero",
            GeneratorSpec::LinearRate { .. } => "linear_rate",
            GeneratorSpec::Trig => "trig",
            GeneratorSpec::BorrowingRate { .. } => "borrowing_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Zero,
    Linear { rate: f64, theta: Vec<f64> },
    Trig,
    Borrowing {
        rate: f64,
        spread: f64,
        theta: Vec<f64>,
        weights: Vec<f64>,
    },
}

/// A generator compiled for a fixed Brownian dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    spec: GeneratorSpec,
    dimension: usize,
    kind: Kind,
    lipschitz: f64,
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Generator {
    pub fn new(spec: GeneratorSpec, dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(param("dimension", "must be at least 1"));
        }
        let finite = |name: &'static str, v: f64| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(param(name, "must be finite"))
            }
        };
        let (kind, lipschitz) = match &spec {
            GeneratorSpec::Zero => (Kind::Zero, 0.0),
            GeneratorSpec::LinearRate { rate, theta } => {
                finite("rate", *rate)?;
                let theta = if theta.is_empty() {
                    vec![0.0; dimension]
                } else if theta.len() == dimension {
                    theta.clone()
                } else {
                    return Err(Error::ShapeMismatch {
                        context: "generator theta",
                        expected: dimension,
                        found: theta.len(),
                    });
                };
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(param("theta", "must be finite"));
                }
                let l = rate.abs().max(norm2(&theta));
                (Kind::Linear { rate: *rate, theta }, l)
            }
            GeneratorSpec::Trig => (Kind::Trig, (dimension as f64).sqrt().max(1.0)),
            GeneratorSpec::BorrowingRate {
                rate,
                borrowing_rate,
                drift,
                volatility,
                correlation,
            } => {
                finite("rate", *rate)?;
                finite("borrowing_rate", *borrowing_rate)?;
                for (name, v) in [("drift", drift), ("volatility", volatility)] {
                    if v.len() != dimension {
                        return Err(Error::ShapeMismatch {
                            context: if name == "drift" {
                                "generator drift"
                            } else {
                                "generator volatility"
                            },
                            expected: dimension,
                            found: v.len(),
                        });
                    }
                }
                let (theta, weights) =
                    borrowing_weights(*rate, drift, volatility, *correlation, dimension)?;
                let spread = borrowing_rate - rate;
                let l = rate.abs().max(borrowing_rate.abs()).max(norm2(&theta) + spread.abs() * norm2(&weights));
                (
                    Kind::Borrowing {
                        rate: *rate,
                        spread,
                        theta,
                        weights,
                    },
                    l,
                )
            }
        };
        Ok(Self {
            spec,
            dimension,
            kind,
            lipschitz,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// An upper bound on the Lipschitz constant in `(y, z)`.
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// True when `g` does not depend on `y` or `z` in a nonlinear way.
    pub fn is_linear(&self) -> bool {
        matches!(self.kind, Kind::Zero | Kind::Linear { .. })
    }

    pub fn eval(&self, _t: f64, y: f64, z: &[f64]) -> f64 {
        match &self.kind {
            Kind::Zero => 0.0,
            Kind::Linear { rate, theta } => -rate * y - dot(theta, z),
            Kind::Trig => y.cos() + z.iter().map(|v| v.sin()).sum::<f64>(),
            Kind::Borrowing {
                rate,
                spread,
                theta,
                weights,
            } => {
                let u = y - dot(weights, z);
                -rate * y - dot(theta, z) + spread * (-u).max(0.0)
            }
        }
    }

    /// Returns `(g, dg/dy)` and writes `dg/dz` into `grad_z`. The kink of the
    /// negative part gets subgradient 0.
    pub fn eval_with_grad(&self, t: f64, y: f64, z: &[f64], grad_z: &mut [f64]) -> (f64, f64) {
        match &self.kind {
            Kind::Zero => {
                grad_z.iter_mut().for_each(|g| *g = 0.0);
                (0.0, 0.0)
            }
            Kind::Linear { rate, theta } => {
                for (g, th) in grad_z.iter_mut().zip(theta) {
                    *g = -th;
                }
                (self.eval(t, y, z), -rate)
            }
            Kind::Trig => {
                for (g, zj) in grad_z.iter_mut().zip(z) {
                    *g = zj.cos();
                }
                (self.eval(t, y, z), -y.sin())
            }
            Kind::Borrowing {
                rate,
                spread,
                theta,
                weights,
            } => {
                let u = y - dot(weights, z);
                let active = u < 0.0;
                for ((g, th), w) in grad_z.iter_mut().zip(theta).zip(weights) {
                    *g = -th + if active { spread * w } else { 0.0 };
                }
                let gy = -rate - if active { *spread } else { 0.0 };
                (self.eval(t, y, z), gy)
            }
        }
    }
}

/// `theta = Sigma^{-1}(mu - r 1)` and `w` with `w . z = sum_j (Sigma^{-1} z)_j`.
fn borrowing_weights(
    rate: f64,
    drift: &[f64],
    volatility: &[f64],
    correlation: f64,
    d: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if volatility.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(param("volatility", "every volatility must be positive"));
    }
    if drift.iter().any(|m| !m.is_finite()) {
        return Err(param("drift", "must be finite"));
    }
    let c: Vec<f64> = (0..d * d)
        .map(|k| if k / d == k % d { 1.0 } else { correlation })
        .collect();
    let l = correlation_factor(&c, d)?;
    let mut sigma = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            sigma[i * d + j] = volatility[i] * l[i * d + j];
        }
    }
    let m = nalgebra::DMatrix::from_row_slice(d, d, &sigma);
    let inv = m
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Decomposition("volatility matrix is singular".into()))?;
    let excess: Vec<f64> = drift.iter().map(|mu| mu - rate).collect();
    let theta = (0..d)
        .map(|i| (0..d).map(|j| inv[(i, j)] * excess[j]).sum())
        .collect();
    let weights = (0..d).map(|k| (0..d).map(|j| inv[(j, k)]).sum()).collect();
    Ok((theta, weights))
}

/// One term `value * X_T^index` of a synthetic chaos payoff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChaosTerm {
    pub index: Vec<u32>,
    pub value: f64,
}

/// A terminal-condition family and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalFamily {
    /// `sum_{i<n} dt_i |B_{t_{i+1}}|^P - P max_{1<=i<=n} B_{t_i}` on the first
    /// component.
    PowerMax { power: f64 },
    /// Discretely monitored down-and-out call `(S_T - K)_+ 1{S_{t_i} >= L}`.
    BarrierCall {
        strike: f64,
        barrier: f64,
        spot: f64,
        drift: f64,
        volatility: f64,
    },
    /// `(mean_j sum_{i<n} dt_i S^j_{t_i} - K)_+`.
    AsianBasket {
        strike: f64,
        spot: Vec<f64>,
        drift: Vec<f64>,
        volatility: Vec<f64>,
    },
    /// `xi = value`.
    Constant { value: f64 },
    /// `xi = scale * (B^component_T)^power`.
    BrownianPower {
        power: u32,
        #[serde(default)]
        component: usize,
        #[serde(default = "one")]
        scale: f64,
    },
    /// `xi = sum value * X_T^index` over the basis on `partition`.
    ChaosSynthetic {
        partition: Vec<f64>,
        dimension: usize,
        terms: Vec<ChaosTerm>,
    },
}

fn one() -> f64 {
    1.0
}

/// A terminal condition together with the grid its payoff is monitored on.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSpec {
    family: TerminalFamily,
    monitoring: TimeGrid,
    synthetic_basis: Option<BasisSpec>,
}

impl TerminalSpec {
    pub fn new(family: TerminalFamily, monitoring: TimeGrid) -> Result<Self> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(param(name, format!("must be positive, got {v}")))
            }
        };
        let nonneg = |name: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(param(name, format!("must be non-negative, got {v}")))
            }
        };
        let mut synthetic_basis = None;
        match &family {
            TerminalFamily::PowerMax { power } => nonneg("power", *power)?,
            TerminalFamily::BarrierCall {
                strike,
                barrier,
                spot,
                drift,
                volatility,
            } => {
                nonneg("strike", *strike)?;
                nonneg("barrier", *barrier)?;
                positive("spot", *spot)?;
                nonneg("volatility", *volatility)?;
                if !drift.is_finite() {
                    return Err(param("drift", "must be finite"));
                }
            }
            TerminalFamily::AsianBasket {
                strike,
                spot,
                drift,
                volatility,
            } => {
                nonneg("strike", *strike)?;
                if spot.is_empty() || drift.len() != spot.len() || volatility.len() != spot.len() {
                    return Err(param(
                        "spot",
                        "spot, drift and volatility need one entry per asset",
                    ));
                }
                for &s in spot {
                    positive("spot", s)?;
                }
                for &s in volatility {
                    nonneg("volatility", s)?;
                }
                if drift.iter().any(|m| !m.is_finite()) {
                    return Err(param("drift", "must be finite"));
                }
            }
            TerminalFamily::Constant { value } => {
                if !value.is_finite() {
                    return Err(param("value", "must be finite"));
                }
            }
            TerminalFamily::BrownianPower { scale, .. } => {
                if !scale.is_finite() {
                    return Err(param("scale", "must be finite"));
                }
            }
            TerminalFamily::ChaosSynthetic {
                partition,
                dimension,
                terms,
            } => {
                let basis = BasisSpec::new(TimeGrid::new(partition.clone())?, *dimension)?;
                if (basis.horizon() - monitoring.horizon()).abs() > 1e-10 {
                    return Err(param("partition", "horizon differs from the monitoring grid"));
                }
                for term in terms {
                    if term.index.len() != basis.slots() {
                        return Err(Error::ShapeMismatch {
                            context: "synthetic chaos index",
                            expected: basis.slots(),
                            found: term.index.len(),
                        });
                    }
                    if !term.value.is_finite() {
                        return Err(param("terms", "values must be finite"));
                    }
                }
                synthetic_basis = Some(basis);
            }
        }
        Ok(Self {
            family,
            monitoring,
            synthetic_basis,
        })
    }

    pub fn family(&self) -> &TerminalFamily {
        &self.family
    }

    pub fn monitoring(&self) -> &TimeGrid {
        &self.monitoring
    }

    pub fn name(&self) -> &'static str {
        match self.family {
            TerminalFamily::PowerMax { .. } => "power_max",
            TerminalFamily::BarrierCall { .. } => "barrier_call",
            TerminalFamily::AsianBasket { .. } => "asian_basket",
            TerminalFamily::Constant { .. } => "constant",
            TerminalFamily::BrownianPower { .. } => "brownian_power",
            TerminalFamily::ChaosSynthetic { .. } => "chaos_synthetic",
        }
    }

    /// The smallest Brownian dimension the payoff can be evaluated on.
    pub fn min_dimension(&self) -> usize {
        match &self.family {
            TerminalFamily::AsianBasket { spot, .. } => spot.len(),
            TerminalFamily::BrownianPower { component, .. } => component + 1,
            TerminalFamily::ChaosSynthetic { dimension, .. } => *dimension,
            _ => 1,
        }
    }

    /// Every grid the payoff needs points from.
    pub fn required_grid(&self) -> Result<TimeGrid> {
        match &self.synthetic_basis {
            Some(b) => self.monitoring.union(b.partition()),
            None => Ok(self.monitoring.clone()),
        }
    }

    pub fn eval(&self, path: &BrownianPath) -> Result<f64> {
        if path.dimension() < self.min_dimension() {
            return Err(Error::ShapeMismatch {
                context: "path dimension for payoff",
                expected: self.min_dimension(),
                found: path.dimension(),
            });
        }
        let mon = &self.monitoring;
        let idx = |i: usize| path.grid().require_index(mon.time(i));
        let n = mon.steps();
        match &self.family {
            TerminalFamily::PowerMax { power } => {
                let mut sum = 0.0;
                let mut max = f64::NEG_INFINITY;
                for i in 0..n {
                    let b = path.value(idx(i + 1)?, 0);
                    sum += mon.dt(i) * b.abs().powf(*power);
                    max = max.max(b);
                }
                Ok(sum - power * max)
            }
            TerminalFamily::BarrierCall {
                strike,
                barrier,
                spot,
                drift,
                volatility,
            } => {
                let mut s = *spot;
                for i in 0..=n {
                    s = gbm(*spot, *drift, *volatility, mon.time(i), path.value(idx(i)?, 0));
                    if s < *barrier {
                        return Ok(0.0);
                    }
                }
                Ok((s - strike).max(0.0))
            }
            TerminalFamily::AsianBasket {
                strike,
                spot,
                drift,
                volatility,
            } => {
                let mut avg = 0.0;
                for i in 0..n {
                    let k = idx(i)?;
                    let t = mon.time(i);
                    for j in 0..spot.len() {
                        avg += mon.dt(i) * gbm(spot[j], drift[j], volatility[j], t, path.value(k, j));
                    }
                }
                Ok((avg / spot.len() as f64 - strike).max(0.0))
            }
            TerminalFamily::Constant { value } => Ok(*value),
            TerminalFamily::BrownianPower {
                power,
                component,
                scale,
            } => Ok(scale * path.value_at(mon.horizon(), *component)?.powi(*power as i32)),
            TerminalFamily::ChaosSynthetic { terms, .. } => {
                let basis = self.synthetic_basis.as_ref().unwrap();
                let mut v = 0.0;
                for term in terms {
                    let a = MultiIndex::new(term.index.clone());
                    v += term.value * chaos_monomial(&a, path, basis, basis.horizon())?;
                }
                Ok(v)
            }
        }
    }

    /// Reads a scalar parameter by name (`power`, `strike`, `barrier`,
    /// `spot`, `drift`, `volatility`, `value`, `scale`).
    pub fn parameter(&self, name: &str) -> Option<f64> {
        match (&self.family, name) {
            (TerminalFamily::PowerMax { power }, "power") => Some(*power),
            (TerminalFamily::BarrierCall { strike, .. }, "strike")
            | (TerminalFamily::AsianBasket { strike, .. }, "strike") => Some(*strike),
            (TerminalFamily::BarrierCall { barrier, .. }, "barrier") => Some(*barrier),
            (TerminalFamily::BarrierCall { spot, .. }, "spot") => Some(*spot),
            (TerminalFamily::BarrierCall { drift, .. }, "drift") => Some(*drift),
            (TerminalFamily::BarrierCall { volatility, .. }, "volatility") => Some(*volatility),
            (TerminalFamily::Constant { value }, "value") => Some(*value),
            (TerminalFamily::BrownianPower { scale, .. }, "scale") => Some(*scale),
            _ => None,
        }
    }

    /// A copy with one scalar parameter replaced. For baskets, `spot`,
    /// `drift` and `volatility` set every asset.
    pub fn with_parameter(&self, name: &str, value: f64) -> Result<TerminalSpec> {
        let mut family = self.family.clone();
        let ok = match (&mut family, name) {
            (TerminalFamily::PowerMax { power }, "power") => {
                *power = value;
                true
            }
            (TerminalFamily::BarrierCall { strike, .. }, "strike")
            | (TerminalFamily::AsianBasket { strike, .. }, "strike") => {
                *strike = value;
                true
            }
            (TerminalFamily::BarrierCall { barrier, .. }, "barrier") => {
                *barrier = value;
                true
            }
            (TerminalFamily::BarrierCall { spot, .. }, "spot") => {
                *spot = value;
                true
            }
            (TerminalFamily::BarrierCall { drift, .. }, "drift") => {
                *drift = value;
                true
            }
            (TerminalFamily::BarrierCall { volatility, .. }, "volatility") => {
                *volatility = value;
                true
            }
            (TerminalFamily::AsianBasket { spot, .. }, "spot") => {
                spot.iter_mut().for_each(|s| *s = value);
                true
            }
            (TerminalFamily::AsianBasket { drift, .. }, "drift") => {
                drift.iter_mut().for_each(|s| *s = value);
                true
            }
            (TerminalFamily::AsianBasket { volatility, .. }, "volatility") => {
                volatility.iter_mut().for_each(|s| *s = value);
                true
            }
            (TerminalFamily::Constant { value: v }, "value") => {
                *v = value;
                true
            }
            (TerminalFamily::BrownianPower { scale, .. }, "scale") => {
                *scale = value;
                true
            }
            _ => false,
        };
        if !ok {
            return Err(param(
                "parameter",
                format!("{} has no scalar parameter {name:?}", self.name()),
            ));
        }
        TerminalSpec::new(family, self.monitoring.clone())
    }

    /// The same payoff with every asset drift set to `rate`.
    pub fn risk_neutral(&self, rate: f64) -> TerminalSpec {
        let mut out = self.clone();
        match &mut out.family {
            TerminalFamily::BarrierCall { drift, .. } => *drift = rate,
            TerminalFamily::AsianBasket { drift, .. } => drift.iter_mut().for_each(|m| *m = rate),
            _ => {}
        }
        out
    }

    /// `(spot, volatility)` for single-asset payoffs.
    pub fn single_asset(&self) -> Option<(f64, f64)> {
        match &self.family {
            TerminalFamily::BarrierCall {
                spot, volatility, ..
            } => Some((*spot, *volatility)),
            _ => None,
        }
    }
}

impl Payoff for TerminalSpec {
    fn payoff(&self, path: &BrownianPath) -> Result<f64> {
        self.eval(path)
    }
}

#[inline]
fn gbm(s0: f64, mu: f64, sigma: f64, t: f64, b: f64) -> f64 {
    s0 * ((mu - 0.5 * sigma * sigma) * t + sigma * b).exp()
}

/// `S^j_t = s0_j exp((mu_j - sigma_j^2/2) t + sigma_j B^j_t)` at every grid
/// point of `path`; one vector per asset.
pub fn asset_paths(path: &BrownianPath, s0: &[f64], mu: &[f64], sigma: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = s0.len();
    if mu.len() != n || sigma.len() != n || n > path.dimension() {
        return Err(Error::ShapeMismatch {
            context: "asset parameters",
            expected: path.dimension(),
            found: n,
        });
    }
    let grid = path.grid();
    Ok((0..n)
        .map(|j| {
            grid.points()
                .iter()
                .enumerate()
                .map(|(k, &t)| gbm(s0[j], mu[j], sigma[j], t, path.value(k, j)))
                .collect()
        })
        .collect())
}
