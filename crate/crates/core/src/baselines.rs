//! Reference solvers: the per-terminal backward Euler scheme, plain Monte
//! Carlo prices and deltas for linear generators, and a nested conditional
//! expectation oracle for very coarse grids.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{param, Error, Result};
use crate::exec::{Execution, BLOCK};
use crate::grid::TimeGrid;
use crate::models::{Generator, Payoff, TerminalSpec};
use crate::operator::ReferenceSolution;
use crate::regression::StepModel;
use crate::rng::{self, domain};
use crate::scheme::{Engine, Problem, SchemeConfig, StepReport, Terminal, TerminalSource};
use crate::simulation::{BrownianPath, ForwardMap, PathSampler};
use crate::stats::Moments;

/// The backward Euler scheme trained for one terminal condition.
#[derive(Debug, Clone)]
pub struct FixedSolution {
    pub problem: Problem,
    pub source: TerminalSource,
    pub models: Vec<StepModel>,
    pub reports: Vec<StepReport>,
    pub y0: f64,
    pub z0: Vec<f64>,
    /// Standard errors of the step-0 regression targets.
    pub y0_se: f64,
    pub z0_se: Vec<f64>,
}

/// Runs the regression-based backward Euler scheme for a fixed terminal
/// condition. Regressors see only `X_{t_i}`.
pub fn backward_euler_fixed(source: &TerminalSource, problem: &Problem, config: &SchemeConfig) -> Result<FixedSolution> {
    let engine = Engine::new(problem, Terminal::Fixed(source), config.seed, config.execution)?;
    let (models, reports) = engine.run(config)?;
    let out = models[0].predict_row(&engine.initial_features(&[]))?;
    Ok(FixedSolution {
        problem: problem.clone(),
        source: source.clone(),
        y0: out[0],
        z0: out[1..].to_vec(),
        y0_se: reports[0].y_target_se,
        z0_se: reports[0].z_target_se.clone(),
        models,
        reports,
    })
}

impl ReferenceSolution for FixedSolution {
    fn grid(&self) -> &TimeGrid {
        &self.problem.grid
    }

    fn required_grid(&self) -> Result<TimeGrid> {
        self.problem.simulation_grid(None)
    }

    fn solution(&self, i: usize, path: &BrownianPath) -> Result<(f64, Vec<f64>)> {
        let p = &self.problem;
        if i >= p.grid.steps() {
            return Err(param("i", "the fixed scheme is evaluated before the terminal time"));
        }
        let map = ForwardMap::new(&p.basis, p.index_set.clone(), path.grid())?;
        let k = path.grid().require_index(p.grid.time(i))?;
        let out = self.models[i].predict_row(&map.values(path, k)?)?;
        Ok((out[0], out[1..].to_vec()))
    }
}

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Number of independent observations averaged.
    pub samples: usize,
}

fn mc_mean<F>(n: usize, execution: Execution, f: F) -> Result<McEstimate>
where
    F: Fn(usize) -> Result<f64> + Sync + Send,
{
    if n < 2 {
        return Err(param("paths", "at least two samples are needed"));
    }
    let parts = execution.map_blocks(n, BLOCK, |range| -> Result<Moments> {
        let mut m = Moments::new(1);
        for k in range {
            let v = f(k)?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("Monte Carlo sample {k}")));
            }
            m.push(&[v]);
        }
        Ok(m)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let total = Moments::merge_all(1, &parts);
    Ok(McEstimate {
        value: total.mean()[0],
        stderr: total.stderr()[0],
        samples: n,
    })
}

fn payoff_sampler(terminal: &TerminalSpec, correlation: Option<&[f64]>) -> Result<PathSampler> {
    PathSampler::new(terminal.required_grid()?, terminal.min_dimension(), correlation)
}

/// `e^{-rT} E^Q[xi]` for the linear generator `-r y - theta . z`, with the
/// payoff re-simulated under risk-neutral drift. With `antithetic`, `paths`
/// payoff evaluations are spent on `paths / 2` pairs `(B, -B)`.
pub fn mc_price_linear(
    terminal: &TerminalSpec,
    rate: f64,
    paths: usize,
    seed: u64,
    antithetic: bool,
    correlation: Option<&[f64]>,
    execution: Execution,
) -> Result<McEstimate> {
    let q = terminal.risk_neutral(rate);
    let sampler = payoff_sampler(&q, correlation)?;
    let discount = (-rate * q.monitoring().horizon()).exp();
    if antithetic {
        mc_mean(paths / 2, execution, |k| {
            let path = sampler.sample_stream(seed, &[domain::BASELINE, k as u64]);
            Ok(discount * 0.5 * (q.eval(&path)? + q.eval(&path.negated())?))
        })
    } else {
        mc_mean(paths, execution, |k| {
            let path = sampler.sample_stream(seed, &[domain::BASELINE, k as u64]);
            Ok(discount * q.eval(&path)?)
        })
    }
}

/// `Z_0 = sigma s0 dPrice/ds0` by a central difference with relative bump
/// `bump` on common random numbers. Constant payoffs have `Z_0 = 0`.
pub fn mc_delta(
    terminal: &TerminalSpec,
    rate: f64,
    bump: f64,
    paths: usize,
    seed: u64,
    execution: Execution,
) -> Result<McEstimate> {
    if let Some(v) = terminal.parameter("value") {
        if terminal.name() == "constant" && v.is_finite() {
            return Ok(McEstimate {
                value: 0.0,
                stderr: 0.0,
                samples: paths,
            });
        }
    }
    let (s0, sigma) = terminal
        .single_asset()
        .ok_or_else(|| param("terminal", format!("{} is not a single-asset payoff", terminal.name())))?;
    if !(bump > 0.0 && bump < 1.0) {
        return Err(param("bump", format!("must lie in (0, 1), got {bump}")));
    }
    let q = terminal.risk_neutral(rate);
    let up = q.with_parameter("spot", s0 * (1.0 + bump))?;
    let down = q.with_parameter("spot", s0 * (1.0 - bump))?;
    let sampler = payoff_sampler(&q, None)?;
    let factor = (-rate * q.monitoring().horizon()).exp() * sigma / (2.0 * bump);
    mc_mean(paths, execution, |k| {
        let path = sampler.sample_stream(seed, &[domain::BASELINE, k as u64]);
        Ok(factor * (up.eval(&path)? - down.eval(&path)?))
    })
}

/// Upper bound on payoff evaluations for [`nested_ce_oracle`].
pub const MAX_NESTED_EVALUATIONS: f64 = 5e7;

/// `(Y, Z)` at each grid point along one outer path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterSample {
    /// `B_{t_0}, ..., B_{t_n}`.
    pub path: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedOracle {
    pub grid: TimeGrid,
    pub y0: f64,
    pub y0_se: f64,
    pub z0: f64,
    pub z0_se: f64,
    pub outer: Vec<OuterSample>,
}

struct NodeValue {
    y: f64,
    z: f64,
    y_se: f64,
    z_se: f64,
}

/// Solves the implicit step `y = e + dt g(t, y, z)` by fixed-point iteration.
fn implicit_solve(g: &Generator, t: f64, dt: f64, e: f64, z: f64) -> f64 {
    let mut y = e;
    for _ in 0..100 {
        let next = e + dt * g.eval(t, y, &[z]);
        let done = (next - y).abs() <= 1e-14 * (1.0 + next.abs());
        y = next;
        if done {
            break;
        }
    }
    y
}

struct Nested<'a, P: ?Sized> {
    payoff: &'a P,
    generator: &'a Generator,
    grid: Arc<TimeGrid>,
    inner: usize,
}

impl<P: Payoff + ?Sized> Nested<'_, P> {
    fn node<R: Rng>(&self, prefix: &mut Vec<f64>, rng: &mut R) -> Result<NodeValue> {
        let i = prefix.len() - 1;
        let n = self.grid.steps();
        if i == n {
            let path = BrownianPath::from_values(self.grid.clone(), 1, prefix.clone())?;
            let y = self.payoff.payoff(&path)?;
            return Ok(NodeValue {
                y,
                z: 0.0,
                y_se: 0.0,
                z_se: 0.0,
            });
        }
        let (t, dt) = (self.grid.time(i), self.grid.dt(i));
        let sd = dt.sqrt();
        let mut m = Moments::new(2);
        for _ in 0..self.inner {
            let w: f64 = rng.sample::<f64, _>(StandardNormal) * sd;
            prefix.push(prefix[i] + w);
            let next = self.node(prefix, rng)?;
            prefix.pop();
            m.push(&[next.y, next.y * w / dt]);
        }
        let (mean, se) = (m.mean(), m.stderr());
        let z = mean[1];
        Ok(NodeValue {
            y: implicit_solve(self.generator, t, dt, mean[0], z),
            z,
            y_se: se[0],
            z_se: se[1],
        })
    }
}

/// Nested Monte Carlo for the implicit backward Euler scheme with exact
/// conditional expectations replaced by `inner` fresh samples per node, on a
/// one-dimensional grid with at most three steps.
pub fn nested_ce_oracle<P: Payoff + ?Sized>(
    payoff: &P,
    generator: &Generator,
    grid: &TimeGrid,
    inner: usize,
    outer: usize,
    seed: u64,
    execution: Execution,
) -> Result<NestedOracle> {
    let n = grid.steps();
    if n > 3 {
        return Err(param("grid", format!("nested oracle supports at most 3 steps, got {n}")));
    }
    if generator.dimension() != 1 {
        return Err(param("generator", "nested oracle is one-dimensional"));
    }
    if inner < 2 {
        return Err(param("inner", "at least two inner samples are needed"));
    }
    let per_root = (inner as f64).powi(n as i32);
    let per_outer: f64 = (0..n).map(|i| (inner as f64).powi((n - i) as i32)).sum();
    let cost = per_root + outer as f64 * per_outer;
    if cost > MAX_NESTED_EVALUATIONS {
        return Err(Error::Budget(format!(
            "nested oracle needs {cost:.3e} payoff evaluations, limit {MAX_NESTED_EVALUATIONS:.0e}"
        )));
    }
    let nested = Nested {
        payoff,
        generator,
        grid: Arc::new(grid.clone()),
        inner,
    };
    let root = nested.node(&mut vec![0.0], &mut rng::stream(seed, &[domain::NESTED, u64::MAX]))?;
    let samples = execution.map(outer, |k| -> Result<OuterSample> {
        let mut rng = rng::stream(seed, &[domain::NESTED, k as u64]);
        let mut path = vec![0.0];
        for i in 0..n {
            let w: f64 = rng.sample(StandardNormal);
            path.push(path[i] + w * grid.dt(i).sqrt());
        }
        let mut y = Vec::with_capacity(n);
        let mut z = Vec::with_capacity(n);
        for i in 0..n {
            let mut prefix = path[..=i].to_vec();
            let v = nested.node(&mut prefix, &mut rng)?;
            y.push(v.y);
            z.push(v.z);
        }
        Ok(OuterSample { path, y, z })
    });
    Ok(NestedOracle {
        grid: grid.clone(),
        y0: root.y,
        y0_se: root.y_se,
        z0: root.z,
        z0_se: root.z_se,
        outer: samples.into_iter().collect::<Result<_>>()?,
    })
}

/// Black-Scholes call price and `sigma s0 N(d1)`, used by tests and
/// experiments as a closed-form check.
pub fn black_scholes_call(spot: f64, strike: f64, rate: f64, volatility: f64, horizon: f64) -> (f64, f64) {
    let sd = volatility * horizon.sqrt();
    let d1 = ((spot / strike).ln() + (rate + 0.5 * volatility * volatility) * horizon) / sd;
    let d2 = d1 - sd;
    let price = spot * normal_cdf(d1) - strike * (-rate * horizon).exp() * normal_cdf(d2);
    (price, volatility * spot * normal_cdf(d1))
}

fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{GeneratorSpec, TerminalFamily};

    #[test]
    fn constant_payoff_price_and_delta() {
        let spec = TerminalSpec::new(TerminalFamily::Constant { value: 2.0 }, TimeGrid::uniform(1.0, 4).unwrap()).unwrap();
        let p = mc_price_linear(&spec, 0.05, 100, 1, false, None, Execution::Sequential).unwrap();
        assert!((p.value - 2.0 * (-0.05f64).exp()).abs() < 1e-14);
        assert_eq!(mc_delta(&spec, 0.05, 0.01, 10, 1, Execution::Sequential).unwrap().value, 0.0);
    }

    #[test]
    fn nested_budget_and_grid_checks() {
        let g = Generator::new(GeneratorSpec::Zero, 1).unwrap();
        let payoff = |p: &BrownianPath| p.value(p.grid().steps(), 0);
        let fine = TimeGrid::uniform(1.0, 4).unwrap();
        assert!(nested_ce_oracle(&payoff, &g, &fine, 10, 1, 0, Execution::Sequential).is_err());
        let coarse = TimeGrid::uniform(1.0, 3).unwrap();
        assert!(matches!(
            nested_ce_oracle(&payoff, &g, &coarse, 1000, 100, 0, Execution::Sequential),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn nested_martingale_payoff() {
        let g = Generator::new(GeneratorSpec::Zero, 1).unwrap();
        let payoff = |p: &BrownianPath| p.value(p.grid().steps(), 0);
        let grid = TimeGrid::uniform(1.0, 2).unwrap();
        let o = nested_ce_oracle(&payoff, &g, &grid, 400, 5, 3, Execution::Sequential).unwrap();
        assert!(o.y0.abs() < 5.0 * o.y0_se + 1e-12);
        assert!((o.z0 - 1.0).abs() < 5.0 * o.z0_se);
        for s in &o.outer {
            assert_eq!(s.path.len(), 3);
        }
    }

    #[test]
    fn black_scholes_reference_values() {
        let (price, z) = black_scholes_call(100.0, 100.0, 0.05, 0.2, 1.0);
        assert!((price - 10.450_583_572_185_565).abs() < 1e-5);
        assert!((z - 0.2 * 100.0 * 0.636_830_651_175_619).abs() < 1e-4);
    }
}
